import pytest
from hypothesis import given, strategies as st

from agsense.power import IntervalPolicy, PowerProfile, adapt_intervals, battery_duration


def test_default_share_in_band():
    assert 0.83 <= PowerProfile().active_share(30, 60) <= 0.87


def test_idle_only_limit():
    p = PowerProfile(e_sense=0.0, e_upload=0.0, e_wake=0.002, e_sleep_per_min=0.003, capacity_mAh=1000.0)
    assert battery_duration(p, (30, 60)) == pytest.approx(1000.0 / (1440 * 0.005) * 24, rel=1e-15)


def test_halving_intervals_halves_duration_without_idle_cost():
    p = PowerProfile(e_wake=0.0, e_sleep_per_min=0.0)
    assert battery_duration(p, (15, 30)) == pytest.approx(battery_duration(p, (30, 60)) / 2, rel=1e-14)


def test_zero_consumption_rejected():
    with pytest.raises(ValueError):
        battery_duration(PowerProfile(0, 0, 0, 0), (30, 60))


@given(st.integers(1, 600), st.integers(1, 600), st.integers(0, 600), st.integers(0, 600))
def test_duration_monotone(s, u, ds, du):
    p = PowerProfile()
    assert battery_duration(p, (s + ds, u + du)) >= battery_duration(p, (s, u))


def test_adapt_intervals():
    pol = IntervalPolicy(30, 60, (75.0, 150.0), (0.5, 0.5), floor_min=10)
    assert adapt_intervals(pol, 20.0) == (30, 60)
    assert adapt_intervals(pol, 80.0) == (15, 30)
    assert adapt_intervals(pol, 500.0) == (10, 15)
    tight = IntervalPolicy(30, 31, (1.0,), (0.1,), floor_min=3)
    s, u = adapt_intervals(tight, 5.0)
    assert s == 3 and u >= s
