import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from agsense.field_model import (
    DiffusionParams,
    Field,
    FieldError,
    GridSpec,
    OutOfBoundsError,
    SourceSpec,
    StabilityError,
    WeatherParams,
    WeatherRecord,
    build_field,
    read_weather_csv,
    sample_truth,
    weather_at,
    write_field_csv,
    write_weather_csv,
)


def naive_field(grid, sources, dynamics, weather):
    """Loop-by-loop re-implementation of the update rule."""
    nx, ny, nz = grid.shape
    h, dt = grid.cell_size, grid.t_step
    r = dynamics.diffusivity * dt / h**2
    c = [[[float(dynamics.background)] * nz for _ in range(ny)] for _ in range(nx)]
    out = np.zeros((nx, ny, nz, grid.n_steps + 1))
    out[..., 0] = dynamics.background

    def at(cc, i, j, k):
        return cc[min(max(i, 0), nx - 1)][min(max(j, 0), ny - 1)][min(max(k, 0), nz - 1)]

    for s in range(grid.n_steps):
        t = s * dt
        inj = np.zeros((nx, ny, nz))
        for src in sources:
            if src.active_window[0] <= t <= src.active_window[1]:
                # all test sources sit on nodes
                idx = tuple(int(round(p / h)) for p in src.position)
                inj[idx] += src.emission_rate * dt / h**3
        wind = weather[s].wind
        new = [[[0.0] * nz for _ in range(ny)] for _ in range(nx)]
        for i in range(nx):
            for j in range(ny):
                for k in range(nz):
                    cur = c[i][j][k]
                    diff = 0.0
                    adv = 0.0
                    for axis, (di, dj, dk) in enumerate(((1, 0, 0), (0, 1, 0), (0, 0, 1))):
                        plus = at(c, i + di, j + dj, k + dk)
                        minus = at(c, i - di, j - dj, k - dk)
                        diff = diff + (plus + minus - 2.0 * cur)
                        cr = wind[axis] * dt / h
                        if cr > 0:
                            adv = adv - cr * (cur - minus)
                        elif cr < 0:
                            adv = adv - cr * (plus - cur)
                    v = cur + r * diff + adv - dynamics.decay_rate * dt * (cur - dynamics.background) + inj[i, j, k]
                    new[i][j][k] = max(v, 0.0)
        c = new
        out[..., s + 1] = np.array(c)
    return out


def const_weather(grid, wind=(0.0, 0.0, 0.0)):
    return tuple(WeatherRecord(time=s * grid.t_step, wind=wind, humidity=50.0, temperature=10.0)
                 for s in range(grid.n_steps))


def test_no_sources_all_zero():
    g = GridSpec(5, 4, 2, 10.0, 5.0, 12)
    f = build_field(g, [], 0, DiffusionParams(1.0), WeatherParams(wind_sigma=0.2))
    assert not f.concentration.any()


def test_matches_dense_heat_kernel_and_is_monotone():
    g = GridSpec(9, 9, 1, 1.0, 1.0, 300)
    D = 0.15
    src = SourceSpec((4.0, 4.0, 0.0), 2.0)
    f = build_field(g, [src], 0, DiffusionParams(D), weather=const_weather(g))

    n = 81
    r = D
    M = np.eye(n)
    idx = lambda i, j: i * 9 + j
    for i in range(9):
        for j in range(9):
            row = idx(i, j)
            for ni, nj in ((i + 1, j), (i - 1, j), (i, j + 1), (i, j - 1)):
                ni, nj = min(max(ni, 0), 8), min(max(nj, 0), 8)
                M[row, idx(ni, nj)] += r
            M[row, row] -= 4 * r
    inj = np.zeros(n)
    inj[idx(4, 4)] = 2.0
    c = np.zeros(n)
    for s in range(g.n_steps):
        c = M @ c + inj
        np.testing.assert_allclose(f.snapshot(s + 1)[:, :, 0].ravel(), c, rtol=1e-11, atol=1e-12)

    last = f.snapshot(g.n_steps)[:, :, 0]
    assert np.unravel_index(np.argmax(last), last.shape) == (4, 4)
    for d in range(4):
        assert last[4 + d, 4] >= last[4 + d + 1, 4]
        assert last[4 - d, 4] >= last[4 - d - 1, 4]
        assert last[4, 4 + d] >= last[4, 4 + d + 1]


def test_wind_moves_pulse_downstream():
    g = GridSpec(20, 5, 1, 1.0, 1.0, 25)
    src = SourceSpec((2.0, 2.0, 0.0), 50.0, (0.0, 0.0))
    f = build_field(g, [src], 0, DiffusionParams(0.05), weather=const_weather(g, (0.5, 0.0, 0.0)))
    xs = [np.unravel_index(np.argmax(f.snapshot(s)), g.shape)[0] for s in range(1, g.n_steps + 1)]
    assert all(b >= a for a, b in zip(xs, xs[1:]))
    assert xs[-1] > xs[0]


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_oracle_equivalence_small_grids(seed):
    rng = np.random.default_rng(seed)
    g = GridSpec(int(rng.integers(3, 11)), int(rng.integers(3, 11)), int(rng.integers(1, 4)), 10.0, 10.0, 20)
    srcs = [SourceSpec(tuple(float(rng.integers(0, n)) * 10.0 for n in g.shape), float(rng.uniform(0, 100)),
                       (0.0, float(rng.uniform(0, 200))))
            for _ in range(3)]
    dyn = DiffusionParams(0.5, decay_rate=0.001, background=3.0)
    wp = WeatherParams(mean_wind=(0.1, -0.1, 0.0), wind_sigma=0.05)
    f = build_field(g, srcs, seed, dyn, wp)
    ref = naive_field(g, srcs, dyn, f.weather)
    np.testing.assert_allclose(f.concentration, ref, rtol=1e-13, atol=1e-13)


def test_determinism_and_positivity():
    g = GridSpec(8, 8, 3, 10.0, 10.0, 30)
    srcs = [SourceSpec((30.0, 20.0, 10.0), 40.0)]
    dyn = DiffusionParams(0.5, decay_rate=1e-3)
    wp = WeatherParams(mean_wind=(0.2, 0.1, 0.0), wind_sigma=0.1, ar_coeff=0.8)
    a = build_field(g, srcs, 11, dyn, wp)
    b = build_field(g, srcs, 11, dyn, wp)
    assert a.concentration.tobytes() == b.concentration.tobytes()
    assert (a.concentration >= 0).all()


def test_zero_wind_symmetry():
    g = GridSpec(9, 9, 2, 5.0, 5.0, 40)
    f = build_field(g, [SourceSpec((20.0, 20.0, 0.0), 10.0)], 0, DiffusionParams(0.8),
                    weather=const_weather(g))
    for s in range(g.n_steps + 1):
        snap = f.snapshot(s)
        assert np.array_equal(snap, snap.transpose(1, 0, 2))


def test_stability_rejections():
    g = GridSpec(4, 4, 1, 1.0, 1.0, 3)
    with pytest.raises(StabilityError, match="1/6"):
        build_field(g, [], 0, DiffusionParams(0.2))
    with pytest.raises(StabilityError, match="Courant"):
        build_field(g, [], 0, DiffusionParams(0.0), weather=const_weather(g, (1.5, 0.0, 0.0)))
    with pytest.raises(FieldError, match="outside grid"):
        build_field(g, [SourceSpec((9.0, 0.0, 0.0), 1.0)], 0, DiffusionParams(0.1))


def _toy_field(values):
    g = GridSpec(2, 2, 2, 1.0, 1.0, 1)
    return Field(g, np.asarray(values, dtype=float), const_weather(g))


def test_sample_truth_nodes_and_midpoints():
    rng = np.random.default_rng(5)
    vals = rng.uniform(0, 100, (2, 2, 2, 2))
    f = _toy_field(vals)
    for idx in np.ndindex(vals.shape):
        assert sample_truth(f, idx[:3], idx[3]) == vals[idx]
    mid = sample_truth(f, (0.5, 1.0, 0.0), 1.0)
    assert mid == pytest.approx((vals[0, 1, 0, 1] + vals[1, 1, 0, 1]) / 2, rel=1e-15)


def test_sample_truth_hand_weighted_sum():
    vals = np.arange(16, dtype=float).reshape(2, 2, 2, 2) ** 1.5
    f = _toy_field(vals)
    x, y, z, t = 0.3, 0.6, 0.2, 0.9
    expected = 0.0
    for i in (0, 1):
        for j in (0, 1):
            for k in (0, 1):
                for s in (0, 1):
                    w = (x if i else 1 - x) * (y if j else 1 - y) * (z if k else 1 - z) * (t if s else 1 - t)
                    expected += w * vals[i, j, k, s]
    assert sample_truth(f, (x, y, z), t) == pytest.approx(expected, rel=1e-13)


def test_sample_truth_out_of_bounds_names_axis():
    f = _toy_field(np.zeros((2, 2, 2, 2)))
    with pytest.raises(OutOfBoundsError) as exc:
        sample_truth(f, (0.0, 1.5, 0.0), 0.0)
    assert exc.value.axis == "y"
    with pytest.raises(OutOfBoundsError) as exc:
        sample_truth(f, (0.0, 0.0, 0.0), 2.0)
    assert exc.value.axis == "t"


def test_weather_hold():
    g = GridSpec(2, 2, 1, 1.0, 60.0, 3)
    f = build_field(g, [], 3, DiffusionParams(0.0), WeatherParams(wind_sigma=0.001, humidity_sigma=5))
    assert weather_at(f, 60.0) is f.weather[1]
    assert weather_at(f, 61.0) is f.weather[1]
    for t, i in [(0.0, 0), (59.9, 0), (120.0, 2), (150.0, 2), (180.0, 2)]:
        assert weather_at(f, t) is f.weather[i]
    with pytest.raises(ValueError):
        weather_at(f, -1.0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_weather_csv_round_trip(seed):
    g = GridSpec(2, 2, 1, 100.0, 30.0, 6)
    trace = build_field(g, [], seed, DiffusionParams(0.0),
                        WeatherParams(mean_wind=(0.01, 0, 0), wind_sigma=0.005, humidity_sigma=30,
                                      temperature_sigma=4)).weather
    assert read_weather_csv(write_weather_csv(trace)) == trace
    assert all(0 <= r.humidity <= 100 for r in trace)


def test_field_csv_layout():
    f = _toy_field(np.ones((2, 2, 2, 2)))
    lines = write_field_csv(f, steps=[1]).splitlines()
    assert lines[0].startswith("# schema")
    assert lines[1] == "x,y,z,t,value"
    assert len(lines) == 2 + 8
    assert math.isclose(float(lines[2].split(",")[-1]), 1.0)
