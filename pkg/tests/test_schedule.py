import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import schedule_fraction
from sdm.schedule import ALL_KINDS, MaskSchedule, ScheduleKind, known_fraction, reveal_counts

kinds = st.sampled_from(ALL_KINDS)


def test_linear_midpoint():
    assert known_fraction(MaskSchedule(ScheduleKind.LINEAR, 4), 2) == 0.5


@pytest.mark.parametrize("kind", ALL_KINDS)
def test_endpoints(kind):
    s = MaskSchedule(kind, 5)
    assert known_fraction(s, 0) == 0.0
    assert known_fraction(s, 5) == 1.0


def test_cubic_half():
    assert known_fraction(MaskSchedule(ScheduleKind.CUBIC, 2), 1) == pytest.approx(0.125, abs=1e-15)


def test_out_of_range_rejected():
    s = MaskSchedule(ScheduleKind.LINEAR, 3)
    with pytest.raises(ValueError):
        known_fraction(s, 4)
    with pytest.raises(ValueError):
        known_fraction(s, -1)
    with pytest.raises(ValueError):
        MaskSchedule(ScheduleKind.LINEAR, 0)


def test_reveal_counts_examples():
    assert reveal_counts(MaskSchedule(ScheduleKind.LINEAR, 4), 8) == [2, 2, 2, 2]
    assert reveal_counts(MaskSchedule(ScheduleKind.SQUARE_ROOT, 2), 10) == [8, 2]
    for kind in ALL_KINDS:
        assert reveal_counts(MaskSchedule(kind, 6), 0) == [0] * 6


def test_linear_is_default():
    assert MaskSchedule().kind is ScheduleKind.LINEAR


def test_parse_names():
    assert ScheduleKind.parse("Square Root") is ScheduleKind.SQUARE_ROOT
    assert ScheduleKind.parse("cosine") is ScheduleKind.COSINE
    with pytest.raises(ValueError):
        ScheduleKind.parse("quartic")


@given(kinds, st.integers(1, 16))
def test_fraction_matches_formula_and_is_monotone(kind, T):
    s = MaskSchedule(kind, T)
    fr = [known_fraction(s, t) for t in range(T + 1)]
    for t, f in enumerate(fr):
        if 0 < t < T:
            assert f == pytest.approx(schedule_fraction(kind.value, t / T), abs=1e-12)
        assert 0.0 <= f <= 1.0
    assert all(b >= a for a, b in zip(fr, fr[1:]))


@given(kinds, st.integers(1, 16), st.integers(0, 10**6))
def test_reveal_counts_sum(kind, T, n):
    counts = reveal_counts(MaskSchedule(kind, T), n)
    assert len(counts) == T
    assert sum(counts) == n
    assert all(c >= 0 for c in counts)


@given(kinds, st.integers(1, 16), st.integers(0, 5000))
def test_reveal_counts_cumulative_ceiling(kind, T, n):
    counts = reveal_counts(MaskSchedule(kind, T), n)
    cum = 0
    for t in range(1, T + 1):
        cum += counts[t - 1]
        expect = n if t == T else min(n, math.ceil(schedule_fraction(kind.value, t / T) * n - 1e-9))
        assert cum == expect
