"""The caching proxy terminating the IoT domain.

Messages cross a chain of single-server FIFO stages with exponential service
times (uplink front-to-back, downlink back-to-front), modeling the layered
internals of the proxy.  Behind the stages sits the cache: one record per
node with an inter-arrival estimator, and a periodic freshness sweep that
refreshes stale records according to the configured scheme:

* post-get: unicast validation GET per stale record,
* observe-get: re-registration GET (observe option) per stale record,
* mget: one multicast GET once at least k records are stale.

Round trips are measured between the application stage's send instant and
the matching reply's arrival back at the application stage, so both pipeline
traversals and both MAC legs are included.  Multicast replies subtract the
reply's deliberate leisure hold, which is an application-scheduled delay,
not a network one.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

from . import coap
from .coap import Code, CoapMessage, MType, TokenTable
from .engine import Engine, RngStream, ticks_from_s
from .node import LeisureConfig
from .radio import BROADCAST, PROXY, MacFrame, MacStation


class ProxyStage:
    """Work-conserving single-server FIFO with exponential service times."""

    def __init__(self, engine: Engine, index: int, mean_service_ticks: float, rng: RngStream):
        self.engine = engine
        self.index = index
        self.mean_service = mean_service_ticks
        self.rng = rng
        self._queue: deque = deque()
        self._busy = False

    def submit(self, item, done) -> None:
        if self._busy:
            self._queue.append((item, done))
        else:
            self._serve(item, done)

    def _serve(self, item, done) -> None:
        self._busy = True
        delay = self.rng.exponential_ticks(self.mean_service)
        def finish():
            done(item)
            if self._queue:
                next_item, next_done = self._queue.popleft()
                self._serve(next_item, next_done)
            else:
                self._busy = False
        self.engine.schedule_in(delay, finish)


class FreshnessEstimator:
    """EWMA mean/deviation of data inter-arrival with one-way jitter removal.

    Each raw inter-arrival sample is corrected by the change in the one-way
    delay estimate (half the proxy-measured round trip) between the two
    arrivals that bound it, so a constant transmission delay cancels exactly.
    """

    def __init__(self, alpha: float = 0.125, beta: float = 0.25):
        self.alpha = alpha
        self.beta = beta
        self.mean = 0.0
        self.dev = 0.0
        self.samples = 0
        self._last_arrival: int | None = None
        self._last_oneway = 0.0

    def add_arrival(self, now: int, oneway_ticks: float) -> None:
        if self._last_arrival is not None:
            raw = now - self._last_arrival
            corrected = raw - (oneway_ticks - self._last_oneway)
            if corrected < 0.0:
                corrected = 0.0
            if self.samples == 0:
                self.mean = corrected
                self.dev = 0.0
            else:
                self.dev += self.beta * (abs(corrected - self.mean) - self.dev)
                self.mean += self.alpha * (corrected - self.mean)
            self.samples += 1
        self._last_arrival = now
        self._last_oneway = oneway_ticks

    def max_age(self, t: float) -> float | None:
        """Estimated validity window in ticks, or None before any sample."""
        if self.samples == 0:
            return None
        return self.mean + t * self.dev


def adjust_t(current: float, signal: float, high_water: float, low_water: float,
             t_max: float, step: float = 1.0) -> float:
    """Raise the deviation multiplier under congestion, lower it when calm."""
    if signal > high_water:
        return min(current + step, t_max)
    if signal < low_water:
        return max(current - step, 0.0)
    return current


def configure_leisure(n: int, coefficient: float, period_ticks: int, slot: int,
                      distribution: str = "uniform", geometric_p: float = 0.0) -> LeisureConfig:
    """Leisure distribution for a domain of n nodes.

    Duty cycle grows proportionally with the domain size (capped at 1) and
    the mean leisure equals duty_cycle times the expected gap between
    multicast requests.
    """
    if n <= 0:
        raise ValueError("node count must be positive")
    duty = min(1.0, coefficient * n)
    mean_slots = duty * period_ticks / slot
    if distribution == "truncated-geometric":
        max_slots = round(4 * mean_slots)
        if max_slots < 1:
            return LeisureConfig(distribution, slot, 0, 0.0, duty)
        p = geometric_p if geometric_p > 0 else 1.0 / (1.0 + mean_slots)
        return LeisureConfig(distribution, slot, max_slots, p, duty)
    max_slots = round(2 * mean_slots)
    return LeisureConfig("uniform", slot, max_slots, 0.0, duty)


@dataclass
class CacheRecord:
    resource_id: int
    value_tag: bytes | None = None
    last_update_at: int = 0
    pending_until: int | None = None
    effective_threshold: int = 0
    estimator: FreshnessEstimator = field(default_factory=FreshnessEstimator)
    probe_token: bytes | None = None

    def stale(self, now: int) -> bool:
        return now - self.last_update_at > self.effective_threshold

    def pending(self, now: int) -> bool:
        return self.pending_until is not None and now < self.pending_until


@dataclass
class RttProbe:
    token: bytes
    sent_at: int
    node_id: int
    kind: str                  # "validate" or "rereg"


class Proxy:
    def __init__(self, engine: Engine, station: MacStation, config, metrics, n_nodes: int):
        self.engine = engine
        self.station = station
        self.config = config
        self.metrics = metrics
        self.n_nodes = n_nodes
        service_ticks = ticks_from_s(config.stage_service_ms / 1000.0)
        self.stages = [ProxyStage(engine, i + 1, service_ticks, engine.stream("proxy", "stage", i + 1))
                       for i in range(config.stage_count)]
        # records start with staggered ages so staleness phases are spread out
        age_rng = engine.stream("proxy", "init-age")
        self.cache = {i: CacheRecord(i, effective_threshold=config.threshold_ticks,
                                     last_update_at=-age_rng.uniform_slots(config.threshold_ticks - 1))
                      for i in range(n_nodes)}
        self.t = config.t
        self.rtt_p: float | None = None
        self.probes: dict[bytes, RttProbe] = {}
        self.leisure: LeisureConfig | None = None
        self.token_table: TokenTable | None = None
        self.nodes = None                      # wired by the runner
        self._mid = coap.MessageIdAllocator(ticks_from_s(coap.TransmissionParams().max_rtt))
        self._dedup = coap.DuplicateDetector(ticks_from_s(coap.TransmissionParams().max_rtt))
        self._token_counter = 0
        self._refresh_timeout = ticks_from_s(config.refresh_timeout_s)
        # sweep/probe counters (observability and the proxy-side gate signal)
        self.validation_gets = 0
        self.rereg_gets = 0
        self.mgets_sent = 0
        self.mget_replies = 0
        self._probes_sent_interval = 0
        self._probe_replies_interval = 0
        station.receive_callback = self.on_mac_frame

    # -- startup -------------------------------------------------------------

    def start(self) -> None:
        scheme = self.config.scheme
        if scheme == "idle":
            return
        if scheme == "mget":
            self.leisure = configure_leisure(
                self.n_nodes, self.config.duty_cycle_coefficient,
                self.config.threshold_ticks, self.config.backoff_unit_us,
                self.config.leisure_distribution, self.config.leisure_geometric_p)
            leisure_max = self.leisure.max_slots * self.leisure.slot
            release_after = coap.token_release_count(
                leisure_max, self.config.min_mget_gap_ticks, self.config.epsilon_token)
            self.token_table = TokenTable(release_after)
            if self.nodes is not None:
                for node in self.nodes:
                    node.leisure = self.leisure
        if not self.config.proactive_refresh:
            return
        if scheme == "observe-get":
            pace = ticks_from_s(self.config.registration_pace_ms / 1000.0)
            for i in range(self.n_nodes):
                self.engine.schedule_at(self.engine.now + i * pace,
                                        lambda node=i: self._send_registration(node))
        self.engine.schedule_in(self.config.check_interval_ticks, self._check_tick)

    # -- pipeline ------------------------------------------------------------

    def _through_stages(self, stages, msg, final) -> None:
        def step(index):
            if index == len(stages):
                final(msg)
            else:
                stages[index].submit(msg, lambda _m: step(index + 1))
        step(0)

    def on_mac_frame(self, frame: MacFrame) -> None:
        src = frame.src
        self._through_stages(self.stages, frame.payload,
                             lambda msg: self._on_uplink(src, msg))

    def _send_downlink(self, msg: CoapMessage, dst: int, length: int) -> None:
        def to_radio(m):
            frame = MacFrame(src=PROXY, dst=dst, length_bytes=length,
                             payload=m, requires_ack=(dst != BROADCAST))
            self.station.submit(frame)
        self._through_stages(list(reversed(self.stages)), msg, to_radio)

    # -- uplink dispatch -----------------------------------------------------

    def _on_uplink(self, src: int, msg: CoapMessage) -> None:
        now = self.engine.now
        if self._dedup.is_duplicate(src, msg.message_id, now):
            return
        if msg.code == Code.POST:
            record = self.cache.get(src)
            if record is not None:
                self._data_arrival(record, msg, now)
            if msg.mtype == MType.CON:
                reply = CoapMessage(mtype=MType.ACK, code=Code.CREATED,
                                    message_id=msg.message_id, token=msg.token)
            else:
                reply = CoapMessage(mtype=MType.NON, code=Code.CREATED,
                                    message_id=self._mid.allocate(now), token=msg.token)
            self._send_downlink(reply, src, self.config.created_reply_bytes)
        elif msg.code == Code.CONTENT:
            self._on_content(src, msg, now)
        elif msg.code == Code.NOT_FOUND:
            probe = self.probes.pop(msg.token, None)
            if probe is not None:
                self._probe_replies_interval += 1

    def _on_content(self, src: int, msg: CoapMessage, now: int) -> None:
        record = self.cache.get(src)
        probe = self.probes.pop(msg.token, None)
        if probe is not None:
            self._note_rtt(now - probe.sent_at)
            self._probe_replies_interval += 1
            if record is not None:
                self._data_arrival(record, msg, now)
            return
        if self.token_table is not None and msg.observe_seq is None:
            self.mget_replies += 1
            entry = self.token_table.match(msg.token)
            if entry is None:
                self.metrics.unmatched_tokens += 1
                return
            self._note_rtt(now - entry.issued_at - msg.leisure_hold)
            if record is not None:
                self._data_arrival(record, msg, now)
            return
        if record is not None:
            self._data_arrival(record, msg, now)

    def _data_arrival(self, record: CacheRecord, msg: CoapMessage, now: int) -> None:
        self._account_staleness(record, now)
        oneway = (self.rtt_p or 0.0) / 2.0
        record.estimator.add_arrival(now, oneway)
        record.value_tag = msg.etag
        record.last_update_at = now
        record.pending_until = None
        record.probe_token = None
        record.effective_threshold = self._threshold_for(record)

    def _threshold_for(self, record: CacheRecord) -> int:
        if self.config.use_estimated_max_age:
            estimated = record.estimator.max_age(self.t)
            if estimated is not None:
                return max(1, round(estimated))
        return self.config.threshold_ticks

    def _note_rtt(self, sample: int) -> None:
        if sample < 0:
            sample = 0
        if self.rtt_p is None:
            self.rtt_p = float(sample)
        else:
            self.rtt_p += (sample - self.rtt_p) / 8.0
        self.metrics.record_rtt(sample, self.engine.now)

    # -- staleness accounting --------------------------------------------------

    def _account_staleness(self, record: CacheRecord, upto: int) -> None:
        stale_from = record.last_update_at + record.effective_threshold
        self.metrics.add_stale_interval(stale_from, upto)

    def flush_staleness(self, t_end: int) -> None:
        for record in self.cache.values():
            self._account_staleness(record, t_end)

    def mirror_update(self, node_id: int, now: int) -> None:
        """Zero-delay record refresh at a generation instant (calibration mode)."""
        record = self.cache[node_id]
        self._account_staleness(record, now)
        record.last_update_at = now

    # -- freshness sweep -------------------------------------------------------

    def _check_tick(self) -> None:
        self.check_freshness()
        self.engine.schedule_in(self.config.check_interval_ticks, self._check_tick)

    def check_freshness(self) -> None:
        now = self.engine.now
        scheme = self.config.scheme
        if self.config.congestion_gate_proxy:
            self._update_t()
        if scheme == "mget":
            due = [r for r in self.cache.values() if r.stale(now) and not r.pending(now)]
            if len(due) >= self.config.k:
                self._send_mget(now)
            return
        due = [r for r in self.cache.values() if r.stale(now) and not r.pending(now)]
        if not due:
            return
        # pace this sweep's requests across the interval so the proxy does not
        # burst its own downlink; each is re-checked at its send instant
        spacing = self.config.check_interval_ticks // (len(due) + 1)
        for j, record in enumerate(due):
            self.engine.schedule_in(j * spacing,
                                    lambda r=record: self._refresh_if_still_due(r))

    def _refresh_if_still_due(self, record: CacheRecord) -> None:
        now = self.engine.now
        if not record.stale(now) or record.pending(now):
            return
        if self.config.scheme == "post-get":
            self._send_validation(record, now)
        else:
            self._send_registration(record.resource_id)

    def _new_token(self) -> bytes:
        self._token_counter += 1
        return coap.token_from_counter(self._token_counter)

    def _send_validation(self, record: CacheRecord, now: int) -> None:
        token = self._new_token()
        if record.probe_token is not None:
            self.probes.pop(record.probe_token, None)
        record.probe_token = token
        record.pending_until = now + self._refresh_timeout
        self.probes[token] = RttProbe(token, now, record.resource_id, "validate")
        self.validation_gets += 1
        self._probes_sent_interval += 1
        msg = CoapMessage(mtype=MType.NON, code=Code.GET,
                          message_id=self._mid.allocate(now), token=token,
                          resource_id=record.resource_id)
        self._send_downlink(msg, record.resource_id, self.config.request_frame_bytes)

    def _send_registration(self, node_id: int) -> None:
        now = self.engine.now
        record = self.cache[node_id]
        token = self._new_token()
        if record.probe_token is not None:
            self.probes.pop(record.probe_token, None)
        record.probe_token = token
        record.pending_until = now + self._refresh_timeout
        self.probes[token] = RttProbe(token, now, node_id, "rereg")
        self.rereg_gets += 1
        self._probes_sent_interval += 1
        msg = CoapMessage(mtype=MType.NON, code=Code.GET,
                          message_id=self._mid.allocate(now), token=token,
                          observe_seq=0, resource_id=node_id)
        self._send_downlink(msg, node_id, self.config.request_frame_bytes)

    def _send_mget(self, now: int) -> None:
        token = self._new_token()
        self.token_table.issue(token, now)
        self.mgets_sent += 1
        leisure_max = self.leisure.max_slots * self.leisure.slot
        for record in self.cache.values():
            record.pending_until = now + leisure_max + self._refresh_timeout
        msg = CoapMessage(mtype=MType.NON, code=Code.GET,
                          message_id=self._mid.allocate(now), token=token)
        self._send_downlink(msg, BROADCAST, self.config.request_frame_bytes)

    def _update_t(self) -> None:
        sent = self._probes_sent_interval
        if sent >= 8:
            signal = 1.0 - self._probe_replies_interval / sent
            self.t = adjust_t(self.t, signal, self.config.congestion_high_water,
                              self.config.congestion_low_water, self.config.t_max)
            self._probes_sent_interval = 0
            self._probe_replies_interval = 0
