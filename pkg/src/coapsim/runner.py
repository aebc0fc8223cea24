"""Scenario assembly, execution, sweeps and CSV emission."""

from __future__ import annotations

import dataclasses
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

from . import __version__
from .config import ScenarioConfig, config_items
from .engine import Engine
from .metrics import Metrics, MetricsSnapshot
from .node import IotNode
from .proxy import Proxy
from .radio import PROXY, Channel, EnergyMeter, MacStation

CSV_COLUMNS = ("scheme", "n_nodes", "seed", "p_success", "rtt_mean_s", "rtt_p95_s",
               "energy_daily_j", "stale_prob", "offered_frames", "unmatched_tokens")


@dataclass
class Simulation:
    config: ScenarioConfig
    engine: Engine
    channel: Channel
    metrics: Metrics
    nodes: list[IotNode]
    meters: list[EnergyMeter]
    proxy: Proxy


def build_simulation(config: ScenarioConfig, keep_energy_log: bool = False) -> Simulation:
    config.validate()
    engine = Engine(config.seed)
    params = config.csma_params()
    channel = Channel(engine, params)
    metrics = Metrics(config.warmup_ticks, config.duration_ticks)

    proxy_station = MacStation(engine, channel, PROXY, params,
                               engine.stream("proxy", "mac"),
                               outcome_callback=metrics.record_mac_outcome,
                               start_callback=metrics.frame_started)
    channel.register(proxy_station)

    nodes: list[IotNode] = []
    meters: list[EnergyMeter] = []
    for i in range(config.n_nodes):
        meter = EnergyMeter(params, keep_log=keep_energy_log)
        station = MacStation(engine, channel, i, params,
                             engine.stream("node", i, "mac"), meter=meter,
                             outcome_callback=metrics.record_mac_outcome,
                             start_callback=metrics.frame_started)
        channel.register(station)
        nodes.append(IotNode(i, engine, station, config, metrics))
        meters.append(meter)

    proxy = Proxy(engine, proxy_station, config, metrics, config.n_nodes)
    proxy.nodes = nodes
    if config.scheme == "mget" and not config.proactive_refresh:
        # calibration mode: the record mirrors the variable's renewal process
        for node in nodes:
            node.generation_callback = proxy.mirror_update
    return Simulation(config, engine, channel, metrics, nodes, meters, proxy)


def run_simulation(sim: Simulation) -> MetricsSnapshot:
    config = sim.config
    for node in sim.nodes:
        node.start()
    sim.proxy.start()

    baselines = [0.0] * len(sim.meters)

    def snapshot_baselines():
        for i, meter in enumerate(sim.meters):
            baselines[i] = meter.energy_at(sim.engine.now)

    sim.engine.schedule_at(config.warmup_ticks, snapshot_baselines)
    sim.engine.run_until(config.duration_ticks)
    sim.proxy.flush_staleness(config.duration_ticks)
    energy_window = sum(meter.energy_at(config.duration_ticks) - baselines[i]
                        for i, meter in enumerate(sim.meters))
    return sim.metrics.finalize(config.scheme, config.n_nodes, config.seed, energy_window)


def run_scenario(config: ScenarioConfig) -> MetricsSnapshot:
    """Build, run and finalize one scenario; deterministic in (config, seed)."""
    return run_simulation(build_simulation(config))


# -- sweeps ---------------------------------------------------------------------


def _format(value) -> str:
    if isinstance(value, float):
        if math.isnan(value):
            return "nan"
        return format(value, ".10g")
    return str(value)


def _data_row(snap: MetricsSnapshot) -> list[str]:
    return [snap.scheme, str(snap.n_nodes), str(snap.seed),
            _format(snap.p_success), _format(snap.rtt_mean_s), _format(snap.rtt_p95_s),
            _format(snap.energy_daily_j), _format(snap.stale_prob),
            str(snap.offered_frames), str(snap.unmatched_tokens)]


def _mean_row(snaps: list[MetricsSnapshot]) -> list[str]:
    def mean(values):
        return sum(values) / len(values)
    return [snaps[0].scheme, str(snaps[0].n_nodes), "mean",
            _format(mean([s.p_success for s in snaps])),
            _format(mean([s.rtt_mean_s for s in snaps])),
            _format(mean([s.rtt_p95_s for s in snaps])),
            _format(mean([s.energy_daily_j for s in snaps])),
            _format(mean([s.stale_prob for s in snaps])),
            _format(mean([s.offered_frames for s in snaps])),
            _format(mean([s.unmatched_tokens for s in snaps]))]


def sweep(base: ScenarioConfig, n_list: list[int], seeds_per_point: int = 3,
          schemes: list[str] | None = None, jobs: int = 1) -> list[list[str]]:
    """Run every (scheme, n, seed) point; return data rows plus per-point means.

    Points may run in separate processes (jobs > 1); each point owns its
    engine, and rows are assembled in (scheme, n, seed) order either way.
    """
    if not n_list:
        raise ValueError("n_list must not be empty")
    if seeds_per_point < 1:
        raise ValueError("seeds_per_point must be >= 1")
    schemes = schemes or [base.scheme]
    points = [dataclasses.replace(base, scheme=scheme, n_nodes=n, seed=base.seed + s)
              for scheme in schemes for n in n_list for s in range(seeds_per_point)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            snapshots = list(pool.map(run_scenario, points, chunksize=1))
    else:
        snapshots = [run_scenario(point) for point in points]
    rows: list[list[str]] = []
    for index in range(0, len(snapshots), seeds_per_point):
        group = snapshots[index:index + seeds_per_point]
        rows.extend(_data_row(snap) for snap in group)
        rows.append(_mean_row(group))
    return rows


def render_csv(rows: list[list[str]], base: ScenarioConfig,
               manifest_extra: dict[str, object] | None = None) -> str:
    """CSV text with a #-commented run manifest above the fixed header."""
    lines = [f"# coapsim {__version__}"]
    for key, value in config_items(base):
        lines.append(f"# {key} = {value}")
    for key, value in (manifest_extra or {}).items():
        lines.append(f"# {key} = {value}")
    lines.append(",".join(CSV_COLUMNS))
    lines.extend(",".join(row) for row in rows)
    return "\n".join(lines) + "\n"
