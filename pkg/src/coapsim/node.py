"""Behavior of one constrained server node.

Each node hosts a single physical variable whose value changes at
exponentially distributed instants.  Depending on the configured scheme the
node pushes a POST on every change, streams observe notifications, or stays
silent and answers multicast GETs after a sampled leisure delay.  Unicast
GETs are answered immediately (no leisure).

The optional node-side congestion gate drops push-type transmissions that
would start within one node-measured round-trip time of the previous one;
that round trip is learned from occasional confirmable exchanges.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from . import coap
from .coap import Code, CoapMessage, MType
from .engine import Engine, RngStream, ticks_from_s
from .radio import BROADCAST, PROXY, MacFrame, MacStation


@dataclass
class LeisureConfig:
    """Slot-aligned random delay before a node answers a multicast GET."""

    distribution: str = "uniform"     # or "truncated-geometric"
    slot: int = 320                   # ticks; equals the MAC backoff unit
    max_slots: int = 0
    geometric_p: float = 0.0
    duty_cycle: float = 0.0

    def sample(self, rng: RngStream) -> int:
        if self.max_slots == 0:
            return 0
        if self.distribution == "truncated-geometric":
            slots = rng.truncated_geometric(self.geometric_p, self.max_slots)
        else:
            slots = rng.uniform_slots(self.max_slots)
        return slots * self.slot


@dataclass
class PhysicalVariable:
    """Versioned value that changes exactly at its generation instants."""

    value_tag: int = 0
    next_change_at: int = 0
    generations: int = 0


@dataclass
class ObserveRegistration:
    token: bytes = b""
    next_seq: int = 0
    active: bool = False


@dataclass
class NodeCongestionState:
    enabled: bool = False
    last_tx_at: int | None = None
    rtt_s: int = 0                    # ticks; 0 until seeded
    samples: int = 0

    def note_rtt(self, sample: int) -> None:
        if self.samples == 0:
            self.rtt_s = sample
        else:
            self.rtt_s += (sample - self.rtt_s) >> 3
        self.samples += 1


def gate_allows(state: NodeCongestionState, now: int) -> bool:
    """Gate rule: block a push starting within rtt_s of the previous one."""
    if not state.enabled:
        return True
    if state.last_tx_at is not None and now - state.last_tx_at < state.rtt_s:
        return False
    state.last_tx_at = now
    return True


class IotNode:
    def __init__(self, node_id: int, engine: Engine, station: MacStation,
                 config, metrics, scheme: str | None = None):
        self.node_id = node_id
        self.engine = engine
        self.station = station
        self.config = config
        self.metrics = metrics
        self.scheme = scheme if scheme is not None else config.scheme
        self.variable = PhysicalVariable()
        self.registration = ObserveRegistration()
        self.leisure: LeisureConfig = LeisureConfig(slot=config.backoff_unit_us)
        self.gate = NodeCongestionState(enabled=config.congestion_gate_node,
                                        rtt_s=ticks_from_s(config.rtt_s_initial_s))
        self.generation_callback = None      # wired by the runner
        self._var_rng = engine.stream("node", node_id, "var")
        self._leisure_rng = engine.stream("node", node_id, "leisure")
        self._coap_rng = engine.stream("node", node_id, "coap")
        self._mid = coap.MessageIdAllocator(ticks_from_s(coap.TransmissionParams().max_rtt))
        self._dedup = coap.DuplicateDetector(ticks_from_s(coap.TransmissionParams().max_rtt))
        self._token_counter = 0
        self._data_tx_count = 0
        self._pending_con: dict[int, dict] = {}   # message_id -> probe state
        station.receive_callback = self.on_frame

    # -- lifecycle -----------------------------------------------------------

    def start(self) -> None:
        self._schedule_next_change()

    def _schedule_next_change(self) -> None:
        gap = self._var_rng.exponential_ticks(self.config.mean_lifetime_ticks)
        self.variable.next_change_at = self.engine.now + gap
        self.engine.schedule_in(gap, self._on_variable_change)

    def _on_variable_change(self) -> None:
        self.variable.value_tag += 1
        self.variable.generations += 1
        if self.generation_callback is not None:
            self.generation_callback(self.node_id, self.engine.now)
        if self.scheme == "post-get":
            self._push(Code.POST)
        elif self.scheme == "observe-get" and self.registration.active:
            self._push_notification()
        self._schedule_next_change()

    # -- uplink helpers ------------------------------------------------------

    def _new_token(self) -> bytes:
        self._token_counter += 1
        return coap.token_from_counter((self.node_id << 16) ^ self._token_counter)

    def _push(self, code: Code) -> None:
        if not gate_allows(self.gate, self.engine.now):
            self.metrics.dropped_by_gate += 1
            return
        mtype = MType.NON
        if self.gate.enabled:
            self._data_tx_count += 1
            if self._data_tx_count % self.config.con_probe_interval == 1:
                mtype = MType.CON
        msg = CoapMessage(mtype=mtype, code=code,
                          message_id=self._mid.allocate(self.engine.now),
                          token=self._new_token(),
                          etag=coap.token_from_counter(self.variable.value_tag),
                          payload_len=80, resource_id=self.node_id)
        self._submit(msg, self.config.data_frame_bytes)
        if mtype == MType.CON:
            self._arm_con_probe(msg)

    def _push_notification(self) -> None:
        if not gate_allows(self.gate, self.engine.now):
            self.metrics.dropped_by_gate += 1
            return
        reg = self.registration
        msg = CoapMessage(mtype=MType.NON, code=Code.CONTENT,
                          message_id=self._mid.allocate(self.engine.now),
                          token=reg.token, observe_seq=reg.next_seq,
                          etag=coap.token_from_counter(self.variable.value_tag),
                          payload_len=80, resource_id=self.node_id)
        reg.next_seq += 1
        self._submit(msg, self.config.data_frame_bytes)

    def _submit(self, msg: CoapMessage, length: int, dst: int = PROXY) -> None:
        frame = MacFrame(src=self.node_id, dst=dst, length_bytes=length,
                         payload=msg, requires_ack=(dst != BROADCAST))
        self.station.submit(frame)

    # -- confirmable probe machinery (active only with the node gate) --------

    def _arm_con_probe(self, msg: CoapMessage) -> None:
        offsets = coap.retransmission_schedule(coap.TransmissionParams(), self._coap_rng)
        probe = {"sent_at": self.engine.now, "offsets": offsets, "index": 0,
                 "msg": msg, "retransmitted": False, "timer": None}
        self._pending_con[msg.message_id] = probe
        probe["timer"] = self.engine.schedule_in(offsets[0], lambda: self._con_timeout(msg.message_id))

    def _con_timeout(self, message_id: int) -> None:
        probe = self._pending_con.get(message_id)
        if probe is None:
            return
        probe["index"] += 1
        if probe["index"] >= len(probe["offsets"]):
            del self._pending_con[message_id]
            return
        probe["retransmitted"] = True
        self._submit(probe["msg"], self.config.data_frame_bytes)
        probe["timer"] = self.engine.schedule_in(
            probe["offsets"][probe["index"]], lambda: self._con_timeout(message_id))

    def _on_coap_ack(self, msg: CoapMessage) -> None:
        probe = self._pending_con.pop(msg.message_id, None)
        if probe is None:
            return
        self.engine.cancel(probe["timer"])
        if not probe["retransmitted"]:
            self.gate.note_rtt(self.engine.now - probe["sent_at"])

    # -- downlink handling ----------------------------------------------------

    def on_frame(self, frame: MacFrame) -> None:
        msg: CoapMessage = frame.payload
        if msg.code == Code.GET:
            if frame.dst == BROADCAST:
                self._on_mget(msg)
            else:
                if self._dedup.is_duplicate(frame.src, msg.message_id, self.engine.now):
                    return
                self._on_unicast_get(msg)
        elif msg.mtype == MType.ACK:
            self._on_coap_ack(msg)
        elif msg.code == Code.CREATED:
            pass  # POST confirmed; nothing further to do without the gate

    def _on_unicast_get(self, msg: CoapMessage) -> None:
        if msg.resource_id is not None and msg.resource_id != self.node_id:
            reply = CoapMessage(mtype=MType.NON, code=Code.NOT_FOUND,
                                message_id=self._mid.allocate(self.engine.now),
                                token=msg.token)
            self._submit(reply, self.config.request_frame_bytes)
            return
        observe = msg.observe_seq is not None
        if observe:
            reg = self.registration
            reg.token = msg.token
            reg.active = True
            seq = reg.next_seq
            reg.next_seq += 1
        reply = CoapMessage(mtype=MType.NON, code=Code.CONTENT,
                            message_id=self._mid.allocate(self.engine.now),
                            token=msg.token,
                            observe_seq=seq if observe else None,
                            etag=coap.token_from_counter(self.variable.value_tag),
                            payload_len=80, resource_id=self.node_id)
        self._submit(reply, self.config.data_frame_bytes)

    def _on_mget(self, msg: CoapMessage) -> None:
        hold = self.leisure.sample(self._leisure_rng)
        token = msg.token
        self.engine.schedule_in(hold, lambda: self._send_mget_reply(token, hold))

    def _send_mget_reply(self, token: bytes, hold: int) -> None:
        if not gate_allows(self.gate, self.engine.now):
            self.metrics.dropped_by_gate += 1
            return
        reply = CoapMessage(mtype=MType.NON, code=Code.CONTENT,
                            message_id=self._mid.allocate(self.engine.now),
                            token=token,
                            etag=coap.token_from_counter(self.variable.value_tag),
                            payload_len=80, resource_id=self.node_id,
                            leisure_hold=hold)
        self._submit(reply, self.config.data_frame_bytes)
