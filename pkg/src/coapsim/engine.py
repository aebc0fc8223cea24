"""Deterministic discrete-event engine with stream-separated randomness.

Time is an integer number of microsecond ticks.  Events fire in
non-decreasing time order; ties break in insertion (FIFO) order, which makes
a run fully reproducible from its master seed.  Every model component draws
randomness from its own named stream, so adding or removing one component
never perturbs the draws seen by another.
"""

from __future__ import annotations

import hashlib
import heapq
import math
import random
from typing import Callable

US = 1
MS = 1_000
SECOND = 1_000_000


def ticks_from_s(seconds: float) -> int:
    """Convert seconds to integer ticks (nearest microsecond)."""
    return round(seconds * SECOND)


def ticks_to_s(ticks: int) -> float:
    return ticks / SECOND


class EngineError(RuntimeError):
    """Programming error in event scheduling (e.g. scheduling in the past)."""


class RngStream:
    """One independent pseudo-random stream, derived from (master seed, label).

    The stream seed is the first 8 bytes of SHA-256("<master>/<label>"), so
    streams with distinct labels are statistically independent and a stream's
    draw sequence depends only on its own label, never on other streams.

    Exponential draws use inverse-transform sampling on a 64-bit uniform:
    ``t = round(-mean * ln(1 - k / 2**64))`` with ``k`` drawn uniformly from
    ``[0, 2**64)``.  This is reproducible across platforms.
    """

    __slots__ = ("label", "_rand")

    def __init__(self, master_seed: int, label: str):
        digest = hashlib.sha256(f"{master_seed}/{label}".encode()).digest()
        self.label = label
        self._rand = random.Random(int.from_bytes(digest[:8], "big"))

    def uniform01(self) -> float:
        """Uniform float in [0, 1)."""
        return self._rand.random()

    def exponential_ticks(self, mean_ticks: float) -> int:
        """Exp(1/mean) draw rounded to the nearest tick.  mean must be > 0."""
        if mean_ticks <= 0:
            raise ValueError(f"exponential mean must be positive, got {mean_ticks}")
        u = self._rand.getrandbits(64) / 2.0**64
        return round(-mean_ticks * math.log1p(-u))

    def uniform_slots(self, max_slots: int) -> int:
        """Integer uniform on {0, 1, ..., max_slots}; max_slots=0 degenerates to 0."""
        if max_slots < 0:
            raise ValueError(f"max_slots must be >= 0, got {max_slots}")
        if max_slots == 0:
            return 0
        return self._rand.randint(0, max_slots)

    def truncated_geometric(self, p: float, max_slots: int) -> int:
        """Geometric(p) on {0, 1, ...} conditioned on the result being <= max_slots.

        Inverse transform: with Z = 1 - (1-p)^(max_slots+1), draw u and return
        ceil(ln(1 - u*Z) / ln(1-p)) - 1, clamped to [0, max_slots].
        """
        if not 0.0 < p < 1.0:
            raise ValueError(f"p must be in (0, 1), got {p}")
        if max_slots < 1:
            raise ValueError(f"max_slots must be >= 1, got {max_slots}")
        z = 1.0 - (1.0 - p) ** (max_slots + 1)
        u = self._rand.getrandbits(64) / 2.0**64
        k = math.ceil(math.log1p(-u * z) / math.log1p(-p)) - 1
        return min(max(k, 0), max_slots)


class EventHandle:
    """Cancellation handle for a scheduled event."""

    __slots__ = ("_entry",)

    def __init__(self, entry: list):
        self._entry = entry

    @property
    def cancelled(self) -> bool:
        return self._entry[2] is None


class Engine:
    """Single-threaded event loop over integer-tick simulated time."""

    def __init__(self, master_seed: int = 1):
        self.master_seed = master_seed
        self.now = 0
        self._queue: list[list] = []  # entries [fire_at, seq, callback]
        self._seq = 0
        self._streams: dict[str, RngStream] = {}

    def stream(self, *label) -> RngStream:
        """Return (creating on first use) the stream named by the label parts."""
        key = "/".join(str(part) for part in label)
        stream = self._streams.get(key)
        if stream is None:
            stream = RngStream(self.master_seed, key)
            self._streams[key] = stream
        return stream

    def schedule_at(self, fire_at: int, callback: Callable[[], None]) -> EventHandle:
        if fire_at < self.now:
            raise EngineError(f"event scheduled in the past: {fire_at} < now {self.now}")
        entry = [fire_at, self._seq, callback]
        self._seq += 1
        heapq.heappush(self._queue, entry)
        return EventHandle(entry)

    def schedule_in(self, delay: int, callback: Callable[[], None]) -> EventHandle:
        return self.schedule_at(self.now + delay, callback)

    def cancel(self, handle: EventHandle) -> None:
        handle._entry[2] = None

    def run_until(self, t_end: int) -> int:
        """Process every event with fire_at <= t_end; leave now == t_end.

        Returns the number of (non-cancelled) events processed.
        """
        processed = 0
        queue = self._queue
        while queue and queue[0][0] <= t_end:
            fire_at, _seq, callback = heapq.heappop(queue)
            if callback is None:
                continue
            self.now = fire_at
            callback()
            processed += 1
        self.now = t_end
        return processed
