"""Frequency-by-frequency evolution on periodic lattices.

On the torus of period ``L`` the operator is diagonal in the Fourier basis
``exp(i xi.x)``, ``xi`` in ``(2 pi / L) Z^n``, with symbol ``sigma(xi)``.  Each
coefficient then evolves by the scalar relaxation function of the kernel
pair, ``u_hat(t, xi) = s_{sigma(xi)}(t) u_hat(0, xi)``.  Lattice symbols take
few distinct values, so one relaxation solve is run per distinct value and
mapped back through the level sets.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import AccuracyError, ValidationError
from .kernels import SoninePair
from .volterra import TimeGrid, forced_values, kernel_convolution, product_weights, relaxation_values

SYMBOL_KINDS = ("laplacian", "polyharmonic", "anisotropic")
_LEVEL_CHUNK = 128


# ------------------------------------------------------------------ symbols


@dataclass(frozen=True)
class OperatorSymbol:
    """Homogeneous elliptic symbol ``sigma`` of order ``nu`` in ``dim`` variables."""

    kind: str
    dim: int
    nu: float
    Q: float
    order: int = 1
    weights: tuple[float, ...] = ()

    def __call__(self, xi) -> np.ndarray:
        xi = np.asarray(xi, dtype=float)
        if xi.shape[-1:] != (self.dim,):
            if self.dim == 1 and xi.ndim <= 1:
                xi = xi[..., None]
            else:
                raise ValidationError(f"frequencies must have trailing axis {self.dim}, got shape {xi.shape}")
        if self.kind == "anisotropic":
            return np.sum(np.asarray(self.weights) * xi ** (2 * self.order), axis=-1)
        return np.sum(xi**2, axis=-1) ** self.order

    @property
    def floor_constant(self) -> float:
        """``c`` with ``sigma(xi) >= c * max_j |xi_j| ** nu``."""
        return min(self.weights) if self.kind == "anisotropic" else 1.0

    def describe(self) -> dict:
        out = {"kind": self.kind, "dim": self.dim, "nu": self.nu, "Q": self.Q}
        if self.kind != "laplacian":
            out["order"] = self.order
        if self.kind == "anisotropic":
            out["weights"] = list(self.weights)
        return out


def make_symbol(kind: str, n: int, **params) -> OperatorSymbol:
    """``laplacian``: ``|xi|**2``; ``polyharmonic`` (``m``): ``|xi|**(2m)``;
    ``anisotropic`` (``a``, ``m``): ``sum_j a_j xi_j**(2m)``."""
    if n not in (1, 2):
        raise ValidationError(f"spatial dimension must be 1 or 2, got {n}")
    if kind == "laplacian":
        if params:
            raise ValidationError(f"laplacian takes no parameters, got {sorted(params)}")
        return OperatorSymbol("laplacian", n, 2.0, float(n))
    m = params.pop("m", 1)
    if int(m) != m or m < 1:
        raise ValidationError(f"order m must be a positive integer, got {m}")
    m = int(m)
    if kind == "polyharmonic":
        if params:
            raise ValidationError(f"unexpected parameters {sorted(params)}")
        return OperatorSymbol("polyharmonic", n, 2.0 * m, float(n), order=m)
    if kind == "anisotropic":
        a = tuple(float(x) for x in np.atleast_1d(params.pop("a", (1.0,) * n)))
        if params:
            raise ValidationError(f"unexpected parameters {sorted(params)}")
        if len(a) != n:
            raise ValidationError(f"need {n} weights, got {len(a)}")
        if not all(x > 0 for x in a):
            raise ValidationError(f"weights must be positive, got {a}")
        return OperatorSymbol("anisotropic", n, 2.0 * m, float(n), order=m, weights=a)
    raise ValidationError(f"unknown symbol kind {kind!r}; expected one of {SYMBOL_KINDS}")


@dataclass(frozen=True)
class GroupMetadata:
    """Homogeneous dimension of a stratified group, for rate prediction only.

    Positive Rockland operators on these groups have even homogeneous order.
    """

    name: str
    Q: int
    rank: int | None = None

    @classmethod
    def heisenberg(cls, n: int) -> "GroupMetadata":
        if int(n) != n or n < 1:
            raise ValidationError(f"Heisenberg rank must be a positive integer, got {n}")
        return cls("heisenberg", 2 * int(n) + 2, int(n))

    @classmethod
    def engel(cls) -> "GroupMetadata":
        return cls("engel", 7)

    def admits(self, nu: float) -> bool:
        return nu > 0 and float(nu) == int(nu) and int(nu) % 2 == 0


# -------------------------------------------------------------------- fields


@dataclass(frozen=True)
class PeriodicGrid:
    """``M**dim`` equispaced points on the torus of side ``period``."""

    dim: int
    M: int
    period: float = 2.0 * math.pi

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise ValidationError(f"spatial dimension must be 1 or 2, got {self.dim}")
        if int(self.M) != self.M or self.M < 2 or int(self.M) & (int(self.M) - 1):
            raise ValidationError(f"points per axis must be a power of two, got {self.M}")
        if not self.period > 0:
            raise ValidationError(f"period must be positive, got {self.period}")
        object.__setattr__(self, "M", int(self.M))
        object.__setattr__(self, "period", float(self.period))

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.M,) * self.dim

    @property
    def spacing(self) -> float:
        return self.period / self.M

    @property
    def cell_volume(self) -> float:
        return self.spacing**self.dim

    @property
    def volume(self) -> float:
        return self.period**self.dim

    @property
    def scale(self) -> float:
        """Frequency unit ``2 pi / period``."""
        return 2.0 * math.pi / self.period

    def coordinates(self) -> list[np.ndarray]:
        axis = np.arange(self.M) * self.spacing
        return list(np.meshgrid(*([axis] * self.dim), indexing="ij"))

    @cached_property
    def integer_frequencies(self) -> np.ndarray:
        """Integer wave vectors in FFT order, shape ``shape + (dim,)``."""
        k = np.fft.fftfreq(self.M, d=1.0 / self.M).round().astype(np.int64)
        mesh = np.meshgrid(*([k] * self.dim), indexing="ij")
        out = np.stack(mesh, axis=-1)
        out.setflags(write=False)
        return out

    def symbol_values(self, symbol: OperatorSymbol) -> np.ndarray:
        """``sigma`` on the lattice, via homogeneity so equal levels are bit-identical."""
        if symbol.dim != self.dim:
            raise ValidationError(f"symbol acts in {symbol.dim} dimensions, grid has {self.dim}")
        return symbol(self.integer_frequencies) * self.scale**symbol.nu

    def describe(self) -> dict:
        return {"dim": self.dim, "M": self.M, "period": self.period}


@dataclass(frozen=True, eq=False)
class FieldState:
    """Complex samples of a field on a :class:`PeriodicGrid` at one time."""

    grid: PeriodicGrid
    values: np.ndarray
    time: float = 0.0
    spectrum: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=complex)
        if v.shape != self.grid.shape:
            raise ValidationError(f"values have shape {v.shape}, grid needs {self.grid.shape}")
        if not np.all(np.isfinite(v)):
            raise ValidationError("field values must be finite")
        if not self.time >= 0:
            raise ValidationError(f"time must be nonnegative, got {self.time}")
        v = v.copy()
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        if self.spectrum is not None:
            c = np.array(self.spectrum, dtype=complex)
            if c.shape != self.grid.shape:
                raise ValidationError(f"spectrum has shape {c.shape}, grid needs {self.grid.shape}")
            c.setflags(write=False)
            object.__setattr__(self, "spectrum", c)
        object.__setattr__(self, "time", float(self.time))

    @classmethod
    def from_function(cls, grid: PeriodicGrid, fn: Callable, time: float = 0.0) -> "FieldState":
        return cls(grid, fn(*grid.coordinates()), time)

    @classmethod
    def from_coefficients(cls, grid: PeriodicGrid, coefficients: np.ndarray, time: float = 0.0) -> "FieldState":
        """Inverse of :meth:`coefficients`; the given coefficients are kept verbatim."""
        coefficients = np.asarray(coefficients)
        return cls(grid, np.fft.ifftn(coefficients * grid.M**grid.dim), time, coefficients)

    def coefficients(self) -> np.ndarray:
        """Fourier coefficients ``c_xi`` with ``u(x) = sum_xi c_xi exp(i xi.x)``."""
        if self.spectrum is not None:
            return self.spectrum.copy()
        return np.fft.fftn(self.values) / self.grid.M**self.grid.dim

    def to_csv(self, path) -> tuple[Path, Path]:
        """Write ``path`` (CSV) and a JSON header next to it; returns both paths."""
        path = Path(path)
        header = path.with_suffix(".json")
        axes = "ij"[: self.grid.dim]
        coords = self.grid.coordinates()
        with path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow([*axes, *("xy"[: self.grid.dim]), "real", "imag"])
            for idx in np.ndindex(*self.grid.shape):
                value = self.values[idx]
                writer.writerow([*idx, *(_fmt(c[idx]) for c in coords), _fmt(value.real), _fmt(value.imag)])
        meta = {"grid": self.grid.describe(), "time": self.time, "columns": [*axes, *"xy"[: self.grid.dim], "real", "imag"]}
        header.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path, header

    @classmethod
    def read_csv(cls, path) -> "FieldState":
        path = Path(path)
        meta = json.loads(path.with_suffix(".json").read_text(encoding="utf-8"))
        grid = PeriodicGrid(**meta["grid"])
        values = np.zeros(grid.shape, dtype=complex)
        with path.open(newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            next(reader)
            for row in reader:
                idx = tuple(int(x) for x in row[: grid.dim])
                values[idx] = float(row[-2]) + 1j * float(row[-1])
        return cls(grid, values, meta["time"])


def _fmt(x) -> str:
    # 17 significant digits round-trip every double
    return format(float(x), ".17g")


# ----------------------------------------------------------------- evolution


@dataclass(frozen=True, eq=False)
class ModalHistory:
    """Per-level relaxation values behind an evolution, kept for diagnostics."""

    levels: np.ndarray
    level_of: np.ndarray = field(repr=False)
    relaxation: np.ndarray = field(repr=False)
    time_indices: np.ndarray


def _solve_levels(pair, levels, tgrid, threads):
    # fixed chunks keep results bit-identical whatever the thread count
    product_weights(pair, tgrid)
    chunks = [levels[i:i + _LEVEL_CHUNK] for i in range(0, levels.size, _LEVEL_CHUNK)]
    solve = lambda c: relaxation_values(pair, c, tgrid)
    if threads <= 1 or len(chunks) == 1:
        parts = [solve(c) for c in chunks]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(solve, chunks))
    values = np.concatenate([p[0] for p in parts], axis=1)
    residual = np.concatenate([p[1] for p in parts])
    if np.any(~np.isfinite(values)) or np.max(residual) > 1e-10:
        bad = int(np.argmax(np.where(np.isfinite(residual), residual, np.inf)))
        raise AccuracyError(f"relaxation solve failed at spectral value {levels[bad]!r}",
                            level=float(levels[bad]), residual=float(residual[bad]))
    return values


def _output_indices(times, tgrid: TimeGrid) -> np.ndarray:
    times = np.atleast_1d(np.asarray(times, dtype=float))
    if times.ndim != 1 or times.size == 0:
        raise ValidationError("output times must be a nonempty 1-d sequence")
    return tgrid.index_of(times)


def modal_history(u0: FieldState, pair: SoninePair, symbol: OperatorSymbol, tgrid: TimeGrid,
                  times, *, threads: int = 1) -> ModalHistory:
    """Relaxation values ``s_sigma(t)`` for every distinct lattice level."""
    sigma = u0.grid.symbol_values(symbol)
    levels, level_of = np.unique(sigma.ravel(), return_inverse=True)
    idx = _output_indices(times, tgrid)
    values = _solve_levels(pair, levels, tgrid, threads)
    return ModalHistory(levels=levels, level_of=level_of.reshape(sigma.shape),
                        relaxation=values[idx], time_indices=idx)


def evolve_homogeneous(u0: FieldState, pair: SoninePair, symbol: OperatorSymbol, times,
                       tgrid: TimeGrid | None = None, *, threads: int = 1,
                       history: bool = False):
    """States at ``times``; each time must be a node of ``tgrid``.

    The mean mode is multiplied by ``s_0 = 1`` and therefore preserved
    exactly.  With ``history=True`` the :class:`ModalHistory` is returned as
    well.
    """
    if tgrid is None:
        tgrid = TimeGrid.for_pair(pair, T=float(np.max(times)))
    hist = modal_history(u0, pair, symbol, tgrid, times, threads=threads)
    coef = u0.coefficients()
    t = tgrid.nodes[hist.time_indices]
    states = []
    for row, time_value in zip(hist.relaxation, t):
        multiplier = row[hist.level_of]
        states.append(FieldState.from_coefficients(u0.grid, coef * multiplier, time_value))
    return (states, hist) if history else states


SOURCE_CONVENTIONS = ("kernel_eq", "subdiffusion_eq")


def _source_coefficients(source, grid: PeriodicGrid, tgrid: TimeGrid) -> np.ndarray:
    """Fourier coefficients of the source at every time node, shape ``(N+1,) + grid.shape``."""
    t = tgrid.nodes
    if callable(source):
        samples = [np.asarray(source(float(ti), *grid.coordinates()), dtype=complex) for ti in t]
        values = np.stack([np.broadcast_to(s, grid.shape) for s in samples])
    elif isinstance(source, Sequence) and source and isinstance(source[0], FieldState):
        if len(source) != tgrid.N + 1:
            raise ValidationError(f"source needs one state per time node ({tgrid.N + 1}), got {len(source)}")
        for s, ti in zip(source, t):
            if s.grid != grid:
                raise ValidationError("source states live on a different spatial grid")
            if abs(s.time - ti) > 1e-12 * max(1.0, tgrid.T):
                raise ValidationError(f"source state at time {s.time} does not match node {ti}")
        values = np.stack([s.values for s in source])
    else:
        values = np.asarray(source, dtype=complex)
        if values.shape != (tgrid.N + 1,) + grid.shape:
            raise ValidationError(
                f"source samples must have shape {(tgrid.N + 1,) + grid.shape}, got {values.shape}")
    axes = tuple(range(1, grid.dim + 1))
    return np.fft.fftn(values, axes=axes) / grid.M**grid.dim


def _cumulative_trapezoid(tgrid: TimeGrid, samples: np.ndarray) -> np.ndarray:
    # exact for the piecewise linear interpolant of the samples
    h = tgrid.steps.reshape((-1,) + (1,) * (samples.ndim - 1))
    cells = 0.5 * h * (samples[1:] + samples[:-1])
    return np.concatenate([np.zeros_like(samples[:1]), np.cumsum(cells, axis=0)])


def evolve_inhomogeneous(u0: FieldState, source, pair: SoninePair, symbol: OperatorSymbol, times,
                         source_convention: str, *, tgrid: TimeGrid, threads: int = 1):
    """States at ``times`` for a forced problem.

    ``source`` is sampled at every node of ``tgrid``: a callable
    ``f(t, *coords)``, a sequence of :class:`FieldState`, or an array of
    shape ``(N+1,) + grid.shape``.  ``kernel_eq`` forces the integral form
    with ``l*f``, ``subdiffusion_eq`` with ``1*f``; both are integrated
    exactly for piecewise linear ``f``.  The data part is the homogeneous
    evolution, the forced part solves ``w + sigma (l*w) = F`` for every
    frequency that carries source.
    """
    if source_convention not in SOURCE_CONVENTIONS:
        raise ValidationError(f"source convention must be one of {SOURCE_CONVENTIONS}, got {source_convention!r}")
    idx = _output_indices(times, tgrid)
    free = evolve_homogeneous(u0, pair, symbol, tgrid.nodes[idx], tgrid, threads=threads)
    fhat = _source_coefficients(source, u0.grid, tgrid)
    flat = fhat.reshape(tgrid.N + 1, -1)
    active = np.flatnonzero(np.any(flat != 0, axis=0))
    if active.size == 0:
        return free
    samples = flat[:, active]
    if source_convention == "kernel_eq":
        forcing = kernel_convolution(pair, tgrid, samples)
    else:
        forcing = _cumulative_trapezoid(tgrid, samples)
    sigma = u0.grid.symbol_values(symbol).ravel()[active]
    # real and imaginary parts march as separate columns with the same level
    stacked = np.concatenate([forcing.real, forcing.imag], axis=1)
    mus = np.concatenate([sigma, sigma])
    forced, residual = forced_values(pair, mus, tgrid, stacked)
    if np.max(residual) > 1e-10:
        bad = int(np.argmax(residual)) % active.size
        raise AccuracyError(f"forced solve failed at spectral value {sigma[bad]!r}",
                            level=float(sigma[bad]), residual=float(np.max(residual)))
    forced = forced[:, : active.size] + 1j * forced[:, active.size:]
    out = []
    for state, i in zip(free, idx):
        coef = state.coefficients().ravel()
        coef[active] += forced[i]
        out.append(FieldState.from_coefficients(u0.grid, coef.reshape(u0.grid.shape), state.time))
    return out


# ------------------------------------------------------------------ counting


def _lattice_levels(symbol: OperatorSymbol, radius: int) -> np.ndarray:
    axis = np.arange(-radius, radius + 1)
    mesh = np.stack(np.meshgrid(*([axis] * symbol.dim), indexing="ij"), axis=-1)
    return symbol(mesh).ravel()


def _required_radius(symbol: OperatorSymbol, v: float) -> int:
    # sigma(xi) >= c |xi|_inf**nu, so sigma < v forces |xi|_inf < (v/c)**(1/nu)
    return int(math.floor((v / symbol.floor_constant) ** (1.0 / symbol.nu))) + 1


def spectral_counting(symbol: OperatorSymbol, v: float, truncation: int | None = None) -> int:
    """``#{xi in Z^n, xi != 0 : sigma(xi) < v}``.

    ``truncation`` is the half-width of the enumerated box; it is checked
    against the growth of the symbol, never silently too small.
    """
    if not v > 0:
        raise ValidationError(f"level must be positive, got {v}")
    need = _required_radius(symbol, v)
    radius = need if truncation is None else int(truncation)
    if radius < need:
        raise ValidationError(f"truncation {radius} too small for level {v}; need at least {need}")
    levels = _lattice_levels(symbol, radius)
    return int(np.count_nonzero((levels < v) & (levels > 0)))


@dataclass(frozen=True)
class CountingFit:
    exponent: float
    prefactor: float
    residual: float
    levels: np.ndarray
    counts: np.ndarray


def fit_counting_exponent(symbol: OperatorSymbol, v_grid) -> CountingFit:
    """Least-squares slope of ``log N(v)`` against ``log v``."""
    v = np.asarray(v_grid, dtype=float)
    if v.ndim != 1 or v.size < 3:
        raise ValidationError("need at least three levels")
    if np.any(v <= 0) or np.any(np.diff(v) <= 0):
        raise ValidationError("levels must be positive and increasing")
    if math.log10(v[-1] / v[0]) < 3.0 - 1e-9:
        raise ValidationError("levels must span at least three decades")
    spacing = np.diff(np.log(v))
    if np.max(np.abs(spacing - spacing.mean())) > 1e-6 * max(1.0, abs(spacing.mean())):
        raise ValidationError("levels must be log-spaced")
    levels = np.sort(_lattice_levels(symbol, _required_radius(symbol, v[-1])))
    levels = levels[levels > 0]
    counts = np.searchsorted(levels, v, side="left")
    if np.any(counts == 0):
        raise ValidationError(f"no lattice level below {v[counts == 0][0]}; start the grid higher")
    x, y = np.log(v), np.log(counts.astype(float))
    slope, intercept = np.polyfit(x, y, 1)
    resid = float(np.sqrt(np.mean((y - (slope * x + intercept)) ** 2)))
    return CountingFit(float(slope), float(np.exp(intercept)), resid, v, counts)


def point_mass(grid: PeriodicGrid, band: int | None = None, *, mass: float = 1.0) -> FieldState:
    """Band-limited approximation of a point mass at the origin.

    All integer wave vectors with ``max_j |k_j| <= band`` carry the same
    coefficient ``mass / volume``; ``band`` defaults to the Nyquist limit.
    """
    band = grid.M // 2 - 1 if band is None else int(band)
    if not 0 <= band < grid.M // 2:
        raise ValidationError(f"band must lie in [0, {grid.M // 2 - 1}], got {band}")
    k = grid.integer_frequencies
    inside = np.max(np.abs(k), axis=-1) <= band
    coef = np.where(inside, mass / grid.volume, 0.0)
    return FieldState.from_coefficients(grid, coef)


def random_band_limited(grid: PeriodicGrid, band: int, seed: int, *, mean_zero: bool = True) -> FieldState:
    """Real random field with independent normal coefficients for ``max_j |k_j| <= band``."""
    if seed is None:
        raise ValidationError("random fields need an explicit seed")
    if not 0 < band < grid.M // 2:
        raise ValidationError(f"band must lie in [1, {grid.M // 2 - 1}], got {band}")
    rng = np.random.default_rng(seed)
    k = grid.integer_frequencies
    # the band is symmetric under k -> -k, so filtering real noise keeps it real
    inside = np.max(np.abs(k), axis=-1) <= band
    coef = np.fft.fftn(rng.standard_normal(grid.shape)) / grid.M**grid.dim * inside
    if mean_zero:
        coef[(0,) * grid.dim] = 0.0
    values = np.fft.ifftn(coef * grid.M**grid.dim).real
    return FieldState(grid, values)
