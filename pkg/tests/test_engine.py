"""Event ordering, cancellation, determinism and sampling distributions."""

from __future__ import annotations

import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coapsim.engine import MS, SECOND, Engine, EngineError, RngStream, ticks_from_s


def test_event_at_now_fires_before_later_event():
    engine = Engine(1)
    order = []
    engine.schedule_at(1, lambda: order.append("late"))
    engine.schedule_at(0, lambda: order.append("now"))
    engine.run_until(10)
    assert order == ["now", "late"]


def test_equal_time_events_fire_in_insertion_order():
    engine = Engine(1)
    order = []
    for tag in range(5):
        engine.schedule_at(7, lambda tag=tag: order.append(tag))
    engine.run_until(7)
    assert order == [0, 1, 2, 3, 4]


def test_cancelled_event_never_fires():
    engine = Engine(1)
    fired = []
    handle = engine.schedule_at(5, lambda: fired.append(1))
    engine.cancel(handle)
    processed = engine.run_until(10)
    assert fired == []
    assert processed == 0
    assert handle.cancelled


def test_run_until_empty_queue_advances_clock():
    engine = Engine(1)
    assert engine.run_until(3600 * SECOND) == 0
    assert engine.now == 3600 * SECOND


def test_run_until_leaves_future_events_pending():
    engine = Engine(1)
    fired = []
    engine.schedule_at(10 * SECOND, lambda: fired.append(1))
    assert engine.run_until(5 * SECOND) == 0
    assert fired == []
    assert engine.run_until(10 * SECOND) == 1
    assert fired == [1]


def test_scheduling_in_the_past_is_an_engine_fault():
    engine = Engine(1)
    engine.schedule_at(5, lambda: None)
    engine.run_until(5)
    with pytest.raises(EngineError):
        engine.schedule_at(4, lambda: None)


def test_nested_scheduling_during_run():
    engine = Engine(1)
    seen = []

    def outer():
        seen.append(("outer", engine.now))
        engine.schedule_in(3, lambda: seen.append(("inner", engine.now)))

    engine.schedule_at(2, outer)
    engine.run_until(10)
    assert seen == [("outer", 2), ("inner", 5)]


def test_monotone_clock_across_callbacks():
    engine = Engine(3)
    stamps = []
    rng = engine.stream("t")
    for _ in range(200):
        engine.schedule_at(rng.uniform_slots(1000), lambda: stamps.append(engine.now))
    engine.run_until(1000)
    assert stamps == sorted(stamps)


def test_same_seed_same_trace():
    def trace(seed):
        engine = Engine(seed)
        rng = engine.stream("a")
        out = []
        def tick():
            out.append((engine.now, rng.uniform_slots(100)))
            if engine.now < 1000:
                engine.schedule_in(1 + rng.uniform_slots(10), tick)
        engine.schedule_at(0, tick)
        engine.run_until(2000)
        return out

    assert trace(42) == trace(42)
    assert trace(42) != trace(43)


def test_streams_are_independent_of_each_other():
    engine = Engine(99)
    before = [engine.stream("node", 5, "var").uniform01() for _ in range(50)]
    # a fresh engine where another stream is drained first sees the same draws
    other = Engine(99)
    for _ in range(1000):
        other.stream("node", 3, "var").uniform01()
    after = [other.stream("node", 5, "var").uniform01() for _ in range(50)]
    assert before == after


def test_stream_is_cached_per_label():
    engine = Engine(1)
    assert engine.stream("a", 1) is engine.stream("a", 1)
    assert engine.stream("a", 1) is not engine.stream("a", 2)


class TestExponential:
    def test_mean_60_s(self):
        rng = RngStream(7, "exp60")
        mean = 60 * SECOND
        total = sum(rng.exponential_ticks(mean) for _ in range(100_000))
        assert 59.4 * SECOND <= total / 100_000 <= 60.6 * SECOND

    def test_mean_5_ms(self):
        rng = RngStream(7, "exp5")
        mean = 5 * MS
        total = sum(rng.exponential_ticks(mean) for _ in range(100_000))
        assert 4.95 * MS <= total / 100_000 <= 5.05 * MS

    def test_zero_mean_rejected(self):
        rng = RngStream(7, "exp0")
        with pytest.raises(ValueError):
            rng.exponential_ticks(0)

    def test_inverse_transform_formula(self):
        # the documented formula: t = round(-mean * ln(1 - k / 2**64))
        import random as _random
        rng = RngStream(11, "formula")
        shadow = _random.Random(int.from_bytes(
            __import__("hashlib").sha256(b"11/formula").digest()[:8], "big"))
        for _ in range(100):
            expected = round(-1000.0 * math.log1p(-shadow.getrandbits(64) / 2.0**64))
            assert rng.exponential_ticks(1000) == expected


class TestUniformSlots:
    def test_max_one(self):
        rng = RngStream(7, "u1")
        values = {rng.uniform_slots(1) for _ in range(100)}
        assert values <= {0, 1} and len(values) == 2

    def test_mean_of_hundred(self):
        rng = RngStream(7, "u100")
        total = sum(rng.uniform_slots(100) for _ in range(100_000))
        assert 49 <= total / 100_000 <= 51

    def test_degenerate_zero(self):
        rng = RngStream(7, "u0")
        assert rng.uniform_slots(0) == 0


class TestTruncatedGeometric:
    def test_two_atom_distribution(self):
        rng = RngStream(7, "g")
        counts = [0, 0]
        for _ in range(100_000):
            counts[rng.truncated_geometric(0.5, 1)] += 1
        assert abs(counts[0] / 100_000 - 2 / 3) < 0.02
        assert abs(counts[1] / 100_000 - 1 / 3) < 0.02

    def test_p_near_one_collapses_to_zero(self):
        rng = RngStream(7, "g1")
        draws = [rng.truncated_geometric(0.999, 10) for _ in range(2000)]
        assert sum(draws) <= 5

    def test_p_out_of_range_rejected(self):
        rng = RngStream(7, "g2")
        with pytest.raises(ValueError):
            rng.truncated_geometric(1.5, 10)

    @given(st.floats(min_value=0.01, max_value=0.99),
           st.integers(min_value=1, max_value=50),
           st.integers(min_value=0, max_value=2**32))
    @settings(max_examples=1000, deadline=None)
    def test_support_is_respected(self, p, max_slots, seed):
        rng = RngStream(seed, "gsupport")
        value = rng.truncated_geometric(p, max_slots)
        assert 0 <= value <= max_slots


def test_ticks_from_s_rounds_to_nearest():
    assert ticks_from_s(1.0) == SECOND
    assert ticks_from_s(0.0000005) == 1
    assert ticks_from_s(60.0) == 60 * SECOND
