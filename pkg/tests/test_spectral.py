import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.special import gamma

from sonine.errors import ValidationError
from sonine.kernels import make_pair
from sonine.specfun import mittag_leffler
from sonine.spectral import (
    FieldState,
    GroupMetadata,
    PeriodicGrid,
    evolve_homogeneous,
    evolve_inhomogeneous,
    fit_counting_exponent,
    make_symbol,
    modal_history,
    point_mass,
    random_band_limited,
    spectral_counting,
)
from sonine.volterra import TimeGrid

HALF = make_pair("fractional", alpha=0.5)
LAP1 = make_symbol("laplacian", 1)
LAP2 = make_symbol("laplacian", 2)


def plane_wave(grid, k=1):
    return FieldState.from_function(grid, lambda x: np.exp(1j * k * x))


# ------------------------------------------------------------------ symbols

def test_symbol_examples():
    assert LAP2([1, 1]) == 2.0 and LAP2.nu == 2 and LAP2.Q == 2
    poly = make_symbol("polyharmonic", 1, m=2)
    assert poly(3.0) == 81.0 and poly.nu == 4
    assert make_symbol("anisotropic", 2, a=(1, 2), m=1)([1, 1]) == 3.0


@pytest.mark.parametrize("kind, n, params", [
    ("laplacian", 3, {}),
    ("laplacian", 1, {"m": 2}),
    ("polyharmonic", 1, {"m": 0}),
    ("polyharmonic", 1, {"m": 1.5}),
    ("anisotropic", 2, {"a": (1.0, -1.0)}),
    ("anisotropic", 2, {"a": (1.0,)}),
    ("biharmonic", 1, {}),
])
def test_symbol_validation(kind, n, params):
    with pytest.raises(ValidationError):
        make_symbol(kind, n, **params)


SYMBOLS = [LAP1, LAP2, make_symbol("polyharmonic", 2, m=2), make_symbol("anisotropic", 2, a=(0.5, 3.0), m=2)]


@pytest.mark.parametrize("symbol", SYMBOLS, ids=lambda s: f"{s.kind}-{s.dim}")
@given(data=st.data())
def test_symbol_homogeneity(symbol, data):
    xi = np.array(data.draw(st.lists(st.integers(-20, 20), min_size=symbol.dim, max_size=symbol.dim)), float)
    c = data.draw(st.integers(1, 6))
    s = symbol(xi)
    assert (s == 0) == (not np.any(xi))
    assert s >= 0
    assert symbol(c * xi) == pytest.approx(c**symbol.nu * s, rel=1e-12)


def test_group_metadata():
    assert GroupMetadata.heisenberg(1).Q == 4
    assert GroupMetadata.heisenberg(3).Q == 8
    assert GroupMetadata.engel().Q == 7
    assert GroupMetadata.engel().admits(2) and not GroupMetadata.engel().admits(3)


def test_grid_validation():
    with pytest.raises(ValidationError):
        PeriodicGrid(1, 12)
    with pytest.raises(ValidationError):
        PeriodicGrid(3, 16)
    with pytest.raises(ValidationError):
        FieldState(PeriodicGrid(1, 8), np.full(8, np.nan))


def test_symbol_values_use_period():
    grid = PeriodicGrid(1, 8, period=math.pi)
    assert grid.symbol_values(LAP1)[1] == pytest.approx(4.0)


# ---------------------------------------------------------------- evolution

def test_constant_is_stationary():
    grid = PeriodicGrid(2, 8)
    u0 = FieldState(grid, np.full(grid.shape, 3.5))
    tgrid = TimeGrid.for_pair(HALF, T=1.0, N=64)
    for state in evolve_homogeneous(u0, HALF, LAP2, tgrid.nodes[[32, 64]], tgrid):
        assert np.array_equal(state.values, u0.values)


def test_mode_amplitude():
    grid = PeriodicGrid(1, 16)
    (state,) = evolve_homogeneous(plane_wave(grid), HALF, LAP1, [1.0], TimeGrid.for_pair(HALF, T=1.0, N=1024))
    assert abs(state.coefficients()[1]) == pytest.approx(0.4275835762, abs=1e-4)
    expected = mittag_leffler(-1.0, 0.5) * np.exp(1j * grid.coordinates()[0])
    assert np.max(np.abs(state.values - expected)) <= 1e-4


@pytest.fixture(scope="module")
def random_run():
    grid = PeriodicGrid(2, 32)
    u0 = random_band_limited(grid, 10, seed=7, mean_zero=False)
    tgrid = TimeGrid.for_pair(HALF, T=20.0, N=256)
    times = tgrid.nodes[[16, 64, 128, 192, 256]]
    states, hist = evolve_homogeneous(u0, HALF, LAP2, times, tgrid, history=True)
    return grid, u0, tgrid, states, hist


def test_parseval(random_run):
    grid, _, _, states, _ = random_run
    for state in states:
        spatial = np.sum(np.abs(state.values) ** 2) * grid.cell_volume
        modal = np.sum(np.abs(state.coefficients()) ** 2) * grid.volume
        assert abs(spatial - modal) <= 1e-12 * modal


def test_mean_conservation(random_run):
    _, u0, _, states, _ = random_run
    c0 = u0.coefficients()[0, 0]
    assert all(s.coefficients()[0, 0] == c0 for s in states)


def test_modal_decay_and_sandwich(random_run):
    grid, u0, _, states, _ = random_run
    c0 = np.abs(u0.coefficients())
    sigma = grid.symbol_values(LAP2)
    live = (sigma > 0) & (c0 > 1e-12)
    previous = c0
    for state in states:
        c = np.abs(state.coefficients())
        assert np.all(c[live] <= previous[live] * (1 + 1e-12) + 1e-15)
        bound = 1.0 / (1.0 + sigma[live] * HALF.L(state.time))
        assert np.all(c[live] / c0[live] <= bound + 1e-6)
        previous = c


def test_real_symmetry(random_run):
    _, u0, _, states, _ = random_run
    assert np.max(np.abs(u0.values.imag)) == 0.0
    for state in states:
        assert np.max(np.abs(state.values.imag)) <= 1e-12


def test_history_deduplicates_levels(random_run):
    grid, _, _, _, hist = random_run
    assert hist.levels.size == np.unique(grid.symbol_values(LAP2)).size
    assert hist.levels.size < grid.M**2
    assert np.all(hist.relaxation[:, 0] == 1.0)


def test_thread_count_does_not_change_results():
    grid = PeriodicGrid(2, 64)
    u0 = random_band_limited(grid, 30, seed=3)
    tgrid = TimeGrid.for_pair(HALF, T=2.0, N=64)
    one = evolve_homogeneous(u0, HALF, LAP2, tgrid.nodes[[32, 64]], tgrid, threads=1)
    four = evolve_homogeneous(u0, HALF, LAP2, tgrid.nodes[[32, 64]], tgrid, threads=4)
    assert all(np.array_equal(a.values, b.values) for a, b in zip(one, four))


def test_times_must_be_nodes():
    grid = PeriodicGrid(1, 8)
    with pytest.raises(ValidationError):
        evolve_homogeneous(plane_wave(grid), HALF, LAP1, [0.3333], TimeGrid.for_pair(HALF, T=1.0, N=16))


def test_modal_history_matches_scalar_solves():
    grid = PeriodicGrid(1, 8)
    tgrid = TimeGrid.for_pair(HALF, T=1.0, N=128)
    hist = modal_history(plane_wave(grid), HALF, LAP1, tgrid, [1.0])
    assert hist.levels.tolist() == [0.0, 1.0, 4.0, 9.0, 16.0]
    exact = mittag_leffler(-hist.levels * 1.0, 0.5)
    assert np.max(np.abs(hist.relaxation[0] - exact)) <= 1e-3


# ------------------------------------------------------------ inhomogeneous

def test_zero_source_reduces_to_homogeneous(random_run):
    grid, u0, tgrid, states, _ = random_run
    times = [s.time for s in states]
    zero = np.zeros((tgrid.N + 1,) + grid.shape)
    for convention in ("kernel_eq", "subdiffusion_eq"):
        forced = evolve_inhomogeneous(u0, zero, HALF, LAP2, times, convention, tgrid=tgrid)
        for a, b in zip(forced, states):
            assert np.max(np.abs(a.values - b.values)) <= 1e-14


def test_kernel_eq_constant_source_tends_to_one():
    grid = PeriodicGrid(1, 16)
    zero = FieldState(grid, np.zeros(16))
    tgrid = TimeGrid.for_pair(HALF, T=50.0, N=1024)
    (state,) = evolve_inhomogeneous(zero, lambda t, x: np.exp(1j * x), HALF, LAP1, [50.0],
                                    "kernel_eq", tgrid=tgrid)
    amplitude = state.coefficients()[1]
    assert abs(amplitude - 1.0) <= 0.1
    assert amplitude.real == pytest.approx(1 - mittag_leffler(-(50.0**0.5), 0.5), abs=1e-4)


def test_kernel_eq_manufactured_solution():
    grid = PeriodicGrid(1, 16)
    zero = FieldState(grid, np.zeros(16))
    tgrid = TimeGrid.for_pair(HALF, T=1.0, N=2048)
    rate = gamma(1.8) / gamma(1.3)
    source = lambda t, x: (rate * t**0.3 + t**0.8) * np.exp(1j * x)
    idx = [512, 1024, 2048]
    states = evolve_inhomogeneous(zero, source, HALF, LAP1, tgrid.nodes[idx], "kernel_eq", tgrid=tgrid)
    for state in states:
        assert abs(state.coefficients()[1] - state.time**0.8) <= 1e-3


def test_subdiffusion_eq_constant_source():
    # w + l*w = t solved by w = 1*s_1 = t E_{a,2}(-t^a)
    grid = PeriodicGrid(1, 8)
    zero = FieldState(grid, np.zeros(8))
    tgrid = TimeGrid.for_pair(HALF, T=4.0, N=1024)
    states = evolve_inhomogeneous(zero, lambda t, x: np.exp(1j * x), HALF, LAP1, tgrid.nodes[[512, 1024]],
                                  "subdiffusion_eq", tgrid=tgrid)
    for state in states:
        t = state.time
        assert state.coefficients()[1].real == pytest.approx(t * mittag_leffler(-(t**0.5), 0.5, 2.0), abs=1e-5)


def test_source_as_states_matches_callable():
    grid = PeriodicGrid(1, 8)
    u0 = plane_wave(grid, 2)
    tgrid = TimeGrid.for_pair(HALF, T=1.0, N=32)
    fn = lambda t, x: np.cos(x) * (1 + t)
    states = [FieldState.from_function(grid, lambda x, t=t: fn(t, x), time=t) for t in tgrid.nodes]
    a = evolve_inhomogeneous(u0, fn, HALF, LAP1, [1.0], "kernel_eq", tgrid=tgrid)
    b = evolve_inhomogeneous(u0, states, HALF, LAP1, [1.0], "kernel_eq", tgrid=tgrid)
    assert np.array_equal(a[0].values, b[0].values)


def test_source_validation():
    grid = PeriodicGrid(1, 8)
    u0 = plane_wave(grid)
    tgrid = TimeGrid.for_pair(HALF, T=1.0, N=16)
    with pytest.raises(ValidationError):
        evolve_inhomogeneous(u0, np.zeros((5, 8)), HALF, LAP1, [1.0], "kernel_eq", tgrid=tgrid)
    with pytest.raises(ValidationError):
        evolve_inhomogeneous(u0, np.zeros((17, 8)), HALF, LAP1, [1.0], "duhamel", tgrid=tgrid)
    other = [FieldState(PeriodicGrid(1, 16), np.zeros(16), t) for t in tgrid.nodes]
    with pytest.raises(ValidationError):
        evolve_inhomogeneous(u0, other, HALF, LAP1, [1.0], "kernel_eq", tgrid=tgrid)


# ----------------------------------------------------------------- counting

def test_counting_examples():
    assert spectral_counting(LAP2, 1.5) == 4
    assert spectral_counting(LAP2, 2.5) == 8
    assert spectral_counting(LAP2, 0.5) == 0


def test_counting_truncation_checked():
    with pytest.raises(ValidationError):
        spectral_counting(LAP2, 100.0, truncation=3)
    assert spectral_counting(LAP2, 100.0, truncation=40) == spectral_counting(LAP2, 100.0)


@given(st.floats(0.1, 5000.0), st.floats(0.0, 5000.0))
def test_counting_monotone(v1, dv):
    assert spectral_counting(LAP2, v1) <= spectral_counting(LAP2, v1 + dv)


def test_counting_matches_brute_force():
    sym = make_symbol("anisotropic", 2, a=(0.5, 2.0), m=1)
    k = np.arange(-30, 31)
    brute = sum(1 for i in k for j in k if (i or j) and 0.5 * i * i + 2.0 * j * j < 97.3)
    assert spectral_counting(sym, 97.3) == brute


def test_counting_slope_laplacian_2d():
    fit = fit_counting_exponent(LAP2, np.logspace(1, 4, 31))
    assert fit.exponent == pytest.approx(1.0, abs=0.03)
    assert fit.prefactor == pytest.approx(math.pi, rel=0.1)


def test_counting_slope_polyharmonic():
    # floor((v)^(1/4)) lattice steps bias short grids upward; dense sampling is needed
    fit = fit_counting_exponent(make_symbol("polyharmonic", 1, m=2), np.logspace(1, 6, 201))
    assert fit.exponent == pytest.approx(0.25, abs=0.05)


def test_counting_anisotropic_reduces_to_laplacian():
    v = np.logspace(1, 4, 31)
    a = fit_counting_exponent(make_symbol("anisotropic", 2, a=(1, 1), m=1), v)
    b = fit_counting_exponent(LAP2, v)
    assert np.array_equal(a.counts, b.counts)


@pytest.mark.parametrize("levels", [[1, 10, 100], np.logspace(1, 3.5, 10), np.linspace(10, 1e4, 20), [10, 5, 1e4]])
def test_counting_fit_rejects_bad_grids(levels):
    with pytest.raises(ValidationError):
        fit_counting_exponent(LAP2, levels)


# --------------------------------------------------------------- data, io

def test_point_mass_coefficients():
    grid = PeriodicGrid(2, 16)
    pm = point_mass(grid, band=3)
    c = pm.coefficients()
    k = np.max(np.abs(grid.integer_frequencies), axis=-1)
    assert np.allclose(c[k <= 3], 1.0 / grid.volume, rtol=1e-12)
    assert np.max(np.abs(c[k > 3])) <= 1e-15
    assert np.sum(pm.values.real) * grid.cell_volume == pytest.approx(1.0, rel=1e-12)


def test_random_field_reproducible_and_real():
    grid = PeriodicGrid(2, 16)
    a = random_band_limited(grid, 5, seed=11)
    b = random_band_limited(grid, 5, seed=11)
    assert np.array_equal(a.values, b.values)
    assert np.max(np.abs(a.values.imag)) == 0.0
    assert abs(a.coefficients()[0, 0]) <= 1e-15
    with pytest.raises(ValidationError):
        random_band_limited(grid, 5, seed=None)


def test_field_csv_roundtrip(tmp_path):
    grid = PeriodicGrid(2, 8)
    state = FieldState(grid, random_band_limited(grid, 3, seed=1).values * (1 + 0.5j), time=2.5)
    csv_path, json_path = state.to_csv(tmp_path / "u.csv")
    assert json_path.exists()
    back = FieldState.read_csv(csv_path)
    assert back.grid == grid and back.time == 2.5
    assert np.array_equal(back.values, state.values)
