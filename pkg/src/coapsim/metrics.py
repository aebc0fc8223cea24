"""Scenario observables and their exact definitions.

Transmission success is first-MAC-attempt delivery of a unicast data frame:
a frame counts as successful iff its very first CSMA attempt ends Delivered
(attempts_used == 1).  Eventual per-frame delivery is tracked alongside as a
secondary measure.  Broadcast frames and MAC ACKs are excluded.

Round-trip samples cover proxy-initiated request/reply exchanges, measured
application stage to application stage.  All statistics honour the
measurement window: frames belong to the window of their first attempt,
round trips to the window of the reply arrival, staleness and energy are
clipped to it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .engine import SECOND
from .radio import BROADCAST, MacOutcome, MacStatus


@dataclass(frozen=True)
class MetricsSnapshot:
    scheme: str
    n_nodes: int
    seed: int
    p_success: float
    p_success_eventual: float
    rtt_mean_s: float
    rtt_p95_s: float
    rtt_samples: int
    energy_daily_j: float
    stale_prob: float
    offered_frames: int
    dropped_by_gate: int
    unmatched_tokens: int
    sim_duration_s: float
    warmup_s: float


class Metrics:
    def __init__(self, window_start: int, window_end: int):
        self.window_start = window_start
        self.window_end = window_end
        self.offered_frames = 0
        self.first_attempt_frames = 0
        self.first_attempt_delivered = 0
        self.delivered = 0
        self.retry_exhausted = 0
        self.access_failures = 0
        self.broadcast_sent = 0
        self.dropped_by_gate = 0
        self.unmatched_tokens = 0
        self.rtt_ticks: list[int] = []
        self.stale_ticks = 0

    # -- MAC accounting ------------------------------------------------------

    def frame_started(self, at: int) -> None:
        if self.window_start <= at < self.window_end:
            self.offered_frames += 1

    def record_mac_outcome(self, outcome: MacOutcome) -> None:
        if not self.window_start <= outcome.first_attempt_at < self.window_end:
            return
        status = outcome.status
        if status == MacStatus.BROADCAST_SENT:
            self.broadcast_sent += 1
            return
        self.first_attempt_frames += 1
        if status == MacStatus.DELIVERED:
            self.delivered += 1
            if outcome.attempts_used == 1:
                self.first_attempt_delivered += 1
        elif status == MacStatus.RETRY_EXHAUSTED:
            self.retry_exhausted += 1
        elif status == MacStatus.CHANNEL_ACCESS_FAILURE:
            self.access_failures += 1

    @property
    def in_flight_at_cutoff(self) -> int:
        completed = (self.first_attempt_frames + self.broadcast_sent)
        return self.offered_frames - completed

    # -- other observables -----------------------------------------------------

    def record_rtt(self, sample_ticks: int, arrival: int) -> None:
        if self.window_start <= arrival <= self.window_end:
            self.rtt_ticks.append(sample_ticks)

    def add_stale_interval(self, start: int, end: int) -> None:
        lo = max(start, self.window_start)
        hi = min(end, self.window_end)
        if hi > lo:
            self.stale_ticks += hi - lo

    # -- finalization ------------------------------------------------------------

    def finalize(self, scheme: str, n_nodes: int, seed: int,
                 energy_window_j: float) -> MetricsSnapshot:
        window = self.window_end - self.window_start
        if window <= 0:
            raise ValueError("measurement window must extend past the warmup")
        window_s = window / SECOND
        if self.first_attempt_frames > 0:
            p_success = self.first_attempt_delivered / self.first_attempt_frames
            p_eventual = self.delivered / self.first_attempt_frames
        else:
            p_success = p_eventual = math.nan
        if self.rtt_ticks:
            ordered = sorted(self.rtt_ticks)
            rtt_mean = sum(ordered) / len(ordered) / SECOND
            index = max(0, math.ceil(0.95 * len(ordered)) - 1)
            rtt_p95 = ordered[index] / SECOND
        else:
            rtt_mean = rtt_p95 = math.nan
        return MetricsSnapshot(
            scheme=scheme,
            n_nodes=n_nodes,
            seed=seed,
            p_success=p_success,
            p_success_eventual=p_eventual,
            rtt_mean_s=rtt_mean,
            rtt_p95_s=rtt_p95,
            rtt_samples=len(self.rtt_ticks),
            energy_daily_j=energy_window_j / n_nodes / window_s * 86400.0,
            stale_prob=self.stale_ticks / (n_nodes * window),
            offered_frames=self.offered_frames,
            dropped_by_gate=self.dropped_by_gate,
            unmatched_tokens=self.unmatched_tokens,
            sim_duration_s=self.window_end / SECOND,
            warmup_s=self.window_start / SECOND,
        )
