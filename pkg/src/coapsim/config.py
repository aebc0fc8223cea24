"""Scenario configuration: flat key = value files with validated defaults."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

from .engine import ticks_from_s
from .radio import CsmaParams

SCHEMES = ("post-get", "mget", "observe-get", "idle")
LEISURE_DISTRIBUTIONS = ("uniform", "truncated-geometric")


class ConfigError(ValueError):
    pass


@dataclass
class ScenarioConfig:
    scheme: str = "post-get"
    n_nodes: int = 50
    sim_duration_s: float = 36000.0
    warmup_s: float = 300.0
    seed: int = 1

    # data dynamics and freshness
    mean_lifetime_s: float = 60.0
    freshness_threshold_s: float = 60.0
    t: float = 0.0
    k: int = 1
    check_interval_s: float = 1.0
    refresh_timeout_s: float = 2.0
    use_estimated_max_age: bool = False
    proactive_refresh: bool = True

    # multicast leisure / tokens
    duty_cycle_coefficient: float = 0.001
    leisure_distribution: str = "uniform"
    leisure_geometric_p: float = 0.0     # 0 = derive from the duty-cycle target
    epsilon_token: float = 1e-3
    min_mget_gap_s: float = 0.0          # 0 = freshness_threshold_s - check_interval_s

    # congestion gates (both off in the headline scenarios)
    congestion_gate_node: bool = False
    congestion_gate_proxy: bool = False
    rtt_s_initial_s: float = 0.0
    con_probe_interval: int = 16
    t_max: float = 8.0
    congestion_high_water: float = 0.10
    congestion_low_water: float = 0.02

    # proxy pipeline
    stage_count: int = 3
    stage_service_ms: float = 5.0

    # MAC / PHY
    backoff_unit_us: int = 320
    min_be: int = 3
    max_be: int = 5
    max_csma_backoffs: int = 4
    max_frame_retries: int = 3
    data_rate_bps: int = 250_000
    cca_duration_us: int = 128
    turnaround_us: int = 192
    ack_wait_margin_us: int = 64

    # frame sizes (bytes)
    data_frame_bytes: int = 127
    request_frame_bytes: int = 20
    created_reply_bytes: int = 20
    ack_frame_bytes: int = 11

    # per-backoff-unit radio energy (joules)
    energy_idle_j: float = 18.2e-9
    energy_rx_j: float = 17.9e-6
    energy_tx_j: float = 15.8e-6

    registration_pace_ms: float = 10.0

    def validate(self) -> "ScenarioConfig":
        def require(cond: bool, key: str, bound: str):
            if not cond:
                raise ConfigError(f"{key}: {bound}")

        require(self.scheme in SCHEMES, "scheme", f"must be one of {', '.join(SCHEMES)}")
        require(self.n_nodes >= 1, "n_nodes", "must be >= 1")
        require(self.sim_duration_s > 0, "sim_duration_s", "must be > 0")
        require(self.warmup_s >= 0, "warmup_s", "must be >= 0")
        require(self.warmup_s < self.sim_duration_s, "warmup_s", "must be < sim_duration_s")
        require(self.mean_lifetime_s > 0, "mean_lifetime_s", "must be > 0")
        require(self.freshness_threshold_s > 0, "freshness_threshold_s", "must be > 0")
        require(self.t >= 0, "t", "must be >= 0")
        require(1 <= self.k <= self.n_nodes, "k", "must be in [1, n_nodes]")
        require(self.check_interval_s > 0, "check_interval_s", "must be > 0")
        require(self.refresh_timeout_s > 0, "refresh_timeout_s", "must be > 0")
        require(self.duty_cycle_coefficient >= 0, "duty_cycle_coefficient", "must be >= 0")
        require(self.leisure_distribution in LEISURE_DISTRIBUTIONS,
                "leisure_distribution", f"must be one of {', '.join(LEISURE_DISTRIBUTIONS)}")
        require(0 <= self.leisure_geometric_p < 1, "leisure_geometric_p", "must be in [0, 1)")
        require(0 < self.epsilon_token < 1, "epsilon_token", "must be in (0, 1)")
        require(self.min_mget_gap_s >= 0, "min_mget_gap_s", "must be >= 0")
        require(self.con_probe_interval >= 1, "con_probe_interval", "must be >= 1")
        require(self.stage_count >= 1, "stage_count", "must be >= 1")
        require(self.stage_service_ms > 0, "stage_service_ms", "must be > 0")
        require(self.backoff_unit_us > 0, "backoff_unit_us", "must be > 0")
        require(0 <= self.min_be <= self.max_be, "min_be", "must satisfy 0 <= min_be <= max_be")
        require(self.max_csma_backoffs >= 0, "max_csma_backoffs", "must be >= 0")
        require(self.max_frame_retries >= 0, "max_frame_retries", "must be >= 0")
        require(self.data_rate_bps > 0, "data_rate_bps", "must be > 0")
        require(self.cca_duration_us >= 0, "cca_duration_us", "must be >= 0")
        require(self.turnaround_us >= 0, "turnaround_us", "must be >= 0")
        require(1 <= self.data_frame_bytes <= 127, "data_frame_bytes", "must be in [1, 127]")
        require(1 <= self.request_frame_bytes <= 127, "request_frame_bytes", "must be in [1, 127]")
        require(1 <= self.created_reply_bytes <= 127, "created_reply_bytes", "must be in [1, 127]")
        require(1 <= self.ack_frame_bytes <= 127, "ack_frame_bytes", "must be in [1, 127]")
        require(self.energy_idle_j >= 0 and self.energy_rx_j >= 0 and self.energy_tx_j >= 0,
                "energy_idle_j", "energy rates must be >= 0")
        require(self.registration_pace_ms >= 0, "registration_pace_ms", "must be >= 0")
        require(self.t_max >= 0, "t_max", "must be >= 0")
        return self

    # -- derived quantities --------------------------------------------------

    def csma_params(self) -> CsmaParams:
        return CsmaParams(
            backoff_unit=self.backoff_unit_us,
            min_be=self.min_be,
            max_be=self.max_be,
            max_csma_backoffs=self.max_csma_backoffs,
            max_frame_retries=self.max_frame_retries,
            data_rate=self.data_rate_bps,
            cca_duration=self.cca_duration_us,
            turnaround=self.turnaround_us,
            ack_bytes=self.ack_frame_bytes,
            ack_wait_margin=self.ack_wait_margin_us,
            idle_j_per_unit=self.energy_idle_j,
            rx_j_per_unit=self.energy_rx_j,
            tx_j_per_unit=self.energy_tx_j,
        )

    @property
    def duration_ticks(self) -> int:
        return ticks_from_s(self.sim_duration_s)

    @property
    def warmup_ticks(self) -> int:
        return ticks_from_s(self.warmup_s)

    @property
    def threshold_ticks(self) -> int:
        return ticks_from_s(self.freshness_threshold_s)

    @property
    def mean_lifetime_ticks(self) -> int:
        return ticks_from_s(self.mean_lifetime_s)

    @property
    def check_interval_ticks(self) -> int:
        return ticks_from_s(self.check_interval_s)

    @property
    def min_mget_gap_ticks(self) -> int:
        if self.min_mget_gap_s > 0:
            return ticks_from_s(self.min_mget_gap_s)
        return ticks_from_s(max(self.freshness_threshold_s - self.check_interval_s,
                                self.check_interval_s))


_BOOL_WORDS = {"on": True, "true": True, "yes": True, "1": True,
               "off": False, "false": False, "no": False, "0": False}

_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(ScenarioConfig)}


def _convert(key: str, raw: str):
    kind = _FIELD_TYPES[key]
    if kind == "bool":
        word = raw.lower()
        if word not in _BOOL_WORDS:
            raise ConfigError(f"{key}: expected on/off, got {raw!r}")
        return _BOOL_WORDS[word]
    if kind == "int":
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected an integer, got {raw!r}") from None
    if kind == "float":
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected a number, got {raw!r}") from None
    return raw


def parse_config(text: str, base: ScenarioConfig | None = None) -> ScenarioConfig:
    """Parse flat ``key = value`` lines (# comments) into a validated config."""
    values: dict[str, object] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown key {key!r}")
        values[key] = _convert(key, raw)
    config = dataclasses.replace(base, **values) if base is not None else ScenarioConfig(**values)
    return config.validate()


def config_items(config: ScenarioConfig) -> list[tuple[str, object]]:
    """(key, value) pairs in declaration order, for manifests and echoing."""
    return [(f.name, getattr(config, f.name)) for f in dataclasses.fields(ScenarioConfig)]
