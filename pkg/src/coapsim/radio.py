"""Single-hop shared channel with unslotted CSMA/CA and energy accounting.

The channel is a broadcast medium: any two time-overlapping transmissions
corrupt each other (no capture effect).  Clear-channel assessment (CCA) takes
a configurable window, and the radio needs a rx/tx turnaround before the
frame actually hits the air; transmissions committed inside another station's
turnaround gap are how collisions arise.

Unicast frames are acknowledged at the MAC layer: the receiver turns the ACK
around after one turnaround delay, without CSMA.  A missed or corrupted ACK
consumes one of the frame retries.

Energy is accounted per radio state.  The radio is *receiving* while counting
down backoff, assessing the channel, waiting for a MAC ACK, and while a frame
addressed to it (or a broadcast) is on the air; *transmitting* during its own
airtime; *inactive* otherwise.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional

from .engine import SECOND, Engine, RngStream

PROXY = -1
BROADCAST = -2


@dataclass(frozen=True)
class CsmaParams:
    backoff_unit: int = 320            # ticks
    min_be: int = 3
    max_be: int = 5
    max_csma_backoffs: int = 4
    max_frame_retries: int = 3
    data_rate: int = 250_000           # bits/s
    cca_duration: int = 128            # ticks
    turnaround: int = 192              # ticks
    ack_bytes: int = 11
    ack_wait_margin: int = 64          # ticks of slack past the expected ACK end
    # per-backoff-unit energy rates
    idle_j_per_unit: float = 18.2e-9
    rx_j_per_unit: float = 17.9e-6
    tx_j_per_unit: float = 15.8e-6

    def __post_init__(self):
        if self.min_be > self.max_be:
            raise ValueError("min_be must not exceed max_be")
        if self.backoff_unit <= 0 or self.data_rate <= 0:
            raise ValueError("backoff_unit and data_rate must be positive")
        if min(self.max_csma_backoffs, self.max_frame_retries) < 0:
            raise ValueError("retry counts must be >= 0")


def frame_airtime(length_bytes: int, params: CsmaParams) -> int:
    """Airtime in ticks of a frame of the given size, rounded up."""
    if not 1 <= length_bytes <= 127:
        raise ValueError(f"frame length must be in [1, 127] bytes, got {length_bytes}")
    bits = length_bytes * 8
    return -(-bits * SECOND // params.data_rate)


@dataclass
class MacFrame:
    src: int
    dst: int                      # station id, PROXY, or BROADCAST
    length_bytes: int
    payload: object = None        # a CoapMessage in normal operation
    requires_ack: bool = True

    def __post_init__(self):
        if not 1 <= self.length_bytes <= 127:
            raise ValueError(f"frame length must be in [1, 127] bytes, got {self.length_bytes}")
        if self.dst == BROADCAST and self.requires_ack:
            raise ValueError("broadcast frames cannot require a MAC ACK")


class MacStatus(Enum):
    DELIVERED = "delivered"
    CHANNEL_ACCESS_FAILURE = "channel_access_failure"
    RETRY_EXHAUSTED = "retry_exhausted"
    BROADCAST_SENT = "broadcast_sent"


@dataclass(frozen=True)
class MacOutcome:
    status: MacStatus
    attempts_used: int
    completion_time: int
    first_attempt_at: int
    frame: MacFrame
    broadcast_corrupted: bool = False


INACTIVE = "inactive"
RECEIVING = "receiving"
TRANSMITTING = "transmitting"


class EnergyMeter:
    """Joule accumulator over radio states, driven by enter/leave transitions.

    Receive and transmit are reference-counted; transmit dominates receive.
    With ``keep_log`` set, every state transition is recorded so tests can
    replay the log and check the accumulated total independently.
    """

    def __init__(self, params: CsmaParams, keep_log: bool = False):
        unit = params.backoff_unit
        self._rates = {
            INACTIVE: params.idle_j_per_unit / unit,
            RECEIVING: params.rx_j_per_unit / unit,
            TRANSMITTING: params.tx_j_per_unit / unit,
        }
        self.joules = 0.0
        self._last_t = 0
        self._rx_depth = 0
        self._tx_depth = 0
        self.log: list[tuple[int, str]] | None = [(0, INACTIVE)] if keep_log else None

    @property
    def state(self) -> str:
        if self._tx_depth > 0:
            return TRANSMITTING
        if self._rx_depth > 0:
            return RECEIVING
        return INACTIVE

    def _advance(self, now: int) -> None:
        if now > self._last_t:
            self.joules += (now - self._last_t) * self._rates[self.state]
            self._last_t = now

    def _shift(self, now: int, rx: int = 0, tx: int = 0) -> None:
        self._advance(now)
        before = self.state
        self._rx_depth += rx
        self._tx_depth += tx
        if self.log is not None and self.state != before:
            self.log.append((now, self.state))

    def enter_rx(self, now: int) -> None:
        self._shift(now, rx=1)

    def leave_rx(self, now: int) -> None:
        self._shift(now, rx=-1)

    def enter_tx(self, now: int) -> None:
        self._shift(now, tx=1)

    def leave_tx(self, now: int) -> None:
        self._shift(now, tx=-1)

    def energy_at(self, now: int) -> float:
        """Total joules including the idle tail up to ``now``."""
        if now < self._last_t:
            raise ValueError("energy_at may not go backwards")
        self._advance(now)
        return self.joules


class _Transmission:
    __slots__ = ("src", "dst", "start", "end", "frame", "is_ack", "ack_ref", "corrupted")

    def __init__(self, src, dst, start, end, frame, is_ack, ack_ref):
        self.src = src
        self.dst = dst
        self.start = start
        self.end = end
        self.frame = frame
        self.is_ack = is_ack
        self.ack_ref = ack_ref
        self.corrupted = False


class Channel:
    """The shared medium: carrier sensing, overlap corruption, delivery."""

    def __init__(self, engine: Engine, params: CsmaParams):
        self.engine = engine
        self.params = params
        self.stations: dict[int, "MacStation"] = {}
        self._live: deque[_Transmission] = deque()

    def register(self, station: "MacStation") -> None:
        self.stations[station.station_id] = station

    def _prune(self, horizon: int) -> None:
        live = self._live
        while live and live[0].end <= horizon:
            live.popleft()

    def busy_during(self, start: int, end: int) -> bool:
        """True iff any transmission overlaps the interval [start, end)."""
        self._prune(start)
        return any(tx.start < end and tx.end > start for tx in self._live)

    def transmit(self, src: int, dst: int, airtime: int,
                 frame: MacFrame | None, is_ack: bool = False, ack_ref: object = None) -> _Transmission:
        """Put a transmission on the air now; deliver (or not) at its end."""
        now = self.engine.now
        tx = _Transmission(src, dst, now, now + airtime, frame, is_ack, ack_ref)
        self._prune(now)
        for other in self._live:
            if other.end > now:
                other.corrupted = True
                tx.corrupted = True
        self._live.append(tx)
        # listeners' radios are on for the whole airtime, corrupted or not
        if dst == BROADCAST:
            for station in self.stations.values():
                if station.station_id != src and station.meter is not None:
                    station.meter.enter_rx(now)
        else:
            target = self.stations.get(dst)
            if target is not None and target.meter is not None:
                target.meter.enter_rx(now)
        self.engine.schedule_at(tx.end, lambda: self._finish(tx))
        return tx

    def _finish(self, tx: _Transmission) -> None:
        now = self.engine.now
        if tx.dst == BROADCAST:
            for station in self.stations.values():
                if station.station_id != tx.src:
                    if station.meter is not None:
                        station.meter.leave_rx(now)
                    if not tx.corrupted:
                        station.on_reception(tx)
        else:
            target = self.stations.get(tx.dst)
            if target is not None:
                if target.meter is not None:
                    target.meter.leave_rx(now)
                if not tx.corrupted:
                    target.on_reception(tx)

    def hold_busy(self, duration: int, src: int = -99) -> None:
        """Occupy the channel with an undecodable carrier (test helper)."""
        tx = _Transmission(src, -98, self.engine.now, self.engine.now + duration, None, False, None)
        tx.corrupted = True
        self._live.append(tx)
        self.engine.schedule_at(tx.end, lambda: None)


class MacStation:
    """One radio running unslotted CSMA/CA with MAC retries over the channel.

    Frames are served FIFO, one at a time.  Unicast service ends in DELIVERED,
    RETRY_EXHAUSTED or CHANNEL_ACCESS_FAILURE; broadcast ends in
    BROADCAST_SENT after a single un-acknowledged transmission.
    """

    def __init__(self, engine: Engine, channel: Channel, station_id: int,
                 params: CsmaParams, rng: RngStream,
                 meter: EnergyMeter | None = None,
                 receive_callback: Callable[[MacFrame], None] | None = None,
                 outcome_callback: Callable[[MacOutcome], None] | None = None,
                 start_callback: Callable[[int], None] | None = None):
        self.engine = engine
        self.channel = channel
        self.station_id = station_id
        self.params = params
        self.rng = rng
        self.meter = meter
        self.receive_callback = receive_callback
        self.outcome_callback = outcome_callback
        self.start_callback = start_callback
        self._queue: deque[tuple[MacFrame, Optional[Callable]]] = deque()
        self._frame: MacFrame | None = None
        self._done: Optional[Callable] = None
        self._attempts = 0
        self._nb = 0
        self._be = params.min_be
        self._first_attempt_at = 0
        self._tx_committed = False      # turnaround or airtime in progress (data or ack)
        self._ack_pending = False       # an outgoing MAC ACK is scheduled
        self._awaited: _Transmission | None = None
        self._ack_timer = None
        self._cca_window = (0, 0)
        self.ack_airtime = frame_airtime(params.ack_bytes, params)

    # -- submission --------------------------------------------------------

    def submit(self, frame: MacFrame, on_outcome: Callable[[MacOutcome], None] | None = None) -> None:
        self._queue.append((frame, on_outcome))
        if self._frame is None:
            self._next_frame()

    def _next_frame(self) -> None:
        if not self._queue:
            return
        self._frame, self._done = self._queue.popleft()
        self._attempts = 0
        self._first_attempt_at = self.engine.now
        if self.start_callback is not None:
            self.start_callback(self._first_attempt_at)
        self._start_attempt()

    def _start_attempt(self) -> None:
        self._nb = 0
        self._be = self.params.min_be
        self._backoff()

    # -- CSMA/CA rounds ----------------------------------------------------

    def _backoff(self) -> None:
        units = self.rng.uniform_slots((1 << self._be) - 1)
        if self.meter is not None:
            self.meter.enter_rx(self.engine.now)
        cca_start = self.engine.now + units * self.params.backoff_unit
        self._cca_window = (cca_start, cca_start + self.params.cca_duration)
        self.engine.schedule_at(self._cca_window[1], self._cca_decision)

    def _cca_decision(self) -> None:
        if self.meter is not None:
            self.meter.leave_rx(self.engine.now)
        busy = (self.channel.busy_during(*self._cca_window)
                or self._tx_committed or self._ack_pending)
        if busy:
            self._nb += 1
            if self._nb > self.params.max_csma_backoffs:
                self._complete(MacStatus.CHANNEL_ACCESS_FAILURE)
            else:
                self._be = min(self._be + 1, self.params.max_be)
                self._backoff()
        else:
            self._tx_committed = True
            self.engine.schedule_in(self.params.turnaround, self._tx_start)

    def _tx_start(self) -> None:
        frame = self._frame
        now = self.engine.now
        if self.meter is not None:
            self.meter.enter_tx(now)
        airtime = frame_airtime(frame.length_bytes, self.params)
        self._attempts += 1
        tx = self.channel.transmit(self.station_id, frame.dst, airtime, frame)
        self.engine.schedule_at(tx.end, lambda: self._tx_end(tx))

    def _tx_end(self, tx: _Transmission) -> None:
        now = self.engine.now
        if self.meter is not None:
            self.meter.leave_tx(now)
        self._tx_committed = False
        frame = self._frame
        if frame.dst == BROADCAST:
            self._complete(MacStatus.BROADCAST_SENT, broadcast_corrupted=tx.corrupted)
            return
        if not frame.requires_ack:
            self._complete(MacStatus.DELIVERED)
            return
        # listen for the MAC ACK
        self._awaited = tx
        if self.meter is not None:
            self.meter.enter_rx(now)
        deadline = now + self.params.turnaround + self.ack_airtime + self.params.ack_wait_margin
        self._ack_timer = self.engine.schedule_at(deadline, self._ack_timeout)

    # -- reception side ----------------------------------------------------

    def on_reception(self, tx: _Transmission) -> None:
        if tx.is_ack:
            if self._awaited is not None and tx.ack_ref is self._awaited:
                self.engine.cancel(self._ack_timer)
                self._awaited = None
                if self.meter is not None:
                    self.meter.leave_rx(self.engine.now)
                self._complete(MacStatus.DELIVERED)
            return
        if tx.frame is not None and tx.frame.requires_ack:
            self._ack_pending = True
            self.engine.schedule_in(self.params.turnaround, lambda: self._send_ack(tx))
        if tx.frame is not None and self.receive_callback is not None:
            self.receive_callback(tx.frame)

    def _send_ack(self, data_tx: _Transmission) -> None:
        self._ack_pending = False
        if self._tx_committed:
            return  # radio busy with its own frame; sender will time out
        self._tx_committed = True
        now = self.engine.now
        if self.meter is not None:
            self.meter.enter_tx(now)
        ack = self.channel.transmit(self.station_id, data_tx.src, self.ack_airtime,
                                    None, is_ack=True, ack_ref=data_tx)
        self.engine.schedule_at(ack.end, self._ack_sent)

    def _ack_sent(self) -> None:
        if self.meter is not None:
            self.meter.leave_tx(self.engine.now)
        self._tx_committed = False

    def _ack_timeout(self) -> None:
        self._awaited = None
        if self.meter is not None:
            self.meter.leave_rx(self.engine.now)
        if self._attempts > self.params.max_frame_retries:
            self._complete(MacStatus.RETRY_EXHAUSTED)
        else:
            self._start_attempt()

    # -- completion --------------------------------------------------------

    def _complete(self, status: MacStatus, broadcast_corrupted: bool = False) -> None:
        outcome = MacOutcome(
            status=status,
            attempts_used=self._attempts,
            completion_time=self.engine.now,
            first_attempt_at=self._first_attempt_at,
            frame=self._frame,
            broadcast_corrupted=broadcast_corrupted,
        )
        done = self._done
        self._frame = None
        self._done = None
        if self.outcome_callback is not None:
            self.outcome_callback(outcome)
        if done is not None:
            done(outcome)
        self._next_frame()
