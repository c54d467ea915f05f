"""Scalar Volterra equations with weakly singular kernels.

The relaxation function solves ``s + mu (l*s) = 1`` and the resolvent solves
``r + mu (l*r) = l``.  Both are discretised by product integration: the
unknown is piecewise linear on a graded mesh and every cell integral of the
kernel is computed exactly from the running integrals ``L = 1*l`` and
``L2 = 1*1*l`` near the diagonal and by Simpson's rule on the smooth part of
``l`` away from it.  The resulting lower-triangular system is marched
node by node; each step is a scalar linear solve.
"""

from __future__ import annotations

import csv
import threading
import time
from dataclasses import dataclass, field
from functools import cached_property, lru_cache
from pathlib import Path

import numpy as np
from scipy.linalg import solve_triangular

from .errors import AccuracyError, DomainError, ValidationError
from .kernels import SoninePair, _jacobi_running_integrals

# cells with  t_i - t_{j+1} < _NEAR_CELLS * h_j  use running-integral differences;
# beyond, Simpson's rule errs by about (h/a)**4/120 relative
_NEAR_CELLS = 64.0
_TABLE_NODES = 10
_TABLE_RTOL = 1e-12
_MIN_GRADING, _MAX_GRADING = 2.0, 20.0
# l(s) is interpolated linearly on a cell only when t_j >= _SMOOTH_CELLS * h_j
_SMOOTH_CELLS = 4.0
_DYADIC_LEVELS = 40
_PANEL_NODES = 8


@dataclass(frozen=True)
class TimeGrid:
    """Graded nodes ``t_i = T (i/N)**grading``, ``i = 0..N``."""

    T: float
    N: int
    grading: float = 2.0

    def __post_init__(self):
        if not self.T > 0:
            raise ValidationError(f"time horizon must be positive, got {self.T}")
        if int(self.N) != self.N or self.N < 8:
            raise ValidationError(f"need an integer N >= 8, got {self.N}")
        if not self.grading >= 1.0:
            raise ValidationError(f"grading exponent must be >= 1, got {self.grading}")
        object.__setattr__(self, "N", int(self.N))
        object.__setattr__(self, "T", float(self.T))
        object.__setattr__(self, "grading", float(self.grading))

    @classmethod
    def for_pair(cls, pair: SoninePair, T: float = 10.0, N: int = 1024,
                 grading: float | str = "auto") -> "TimeGrid":
        """Grid whose grading matches the ``t**(1-eta)`` onset of the solution."""
        if grading == "auto":
            grading = auto_grading(pair)
        return cls(T, N, float(grading))

    @cached_property
    def nodes(self) -> np.ndarray:
        t = self.T * (np.arange(self.N + 1) / self.N) ** self.grading
        t.setflags(write=False)
        return t

    @property
    def steps(self) -> np.ndarray:
        return np.diff(self.nodes)

    def coarsen(self) -> "TimeGrid":
        """Every other node; exact sub-grid because the node map is a power law."""
        if self.N % 2 or self.N // 2 < 8:
            raise ValidationError("grid cannot be coarsened further")
        return TimeGrid(self.T, self.N // 2, self.grading)

    def refine(self) -> "TimeGrid":
        return TimeGrid(self.T, 2 * self.N, self.grading)

    def index_of(self, times) -> np.ndarray:
        """Indices of ``times`` among the nodes; each must be a node."""
        times = np.atleast_1d(np.asarray(times, dtype=float))
        idx = np.searchsorted(self.nodes, times)
        idx = np.clip(idx, 0, self.N)
        lower = np.clip(idx - 1, 0, self.N)
        pick = np.where(np.abs(self.nodes[lower] - times) < np.abs(self.nodes[idx] - times), lower, idx)
        if np.any(np.abs(self.nodes[pick] - times) > 1e-12 * max(self.T, 1.0)):
            bad = times[np.abs(self.nodes[pick] - times) > 1e-12 * max(self.T, 1.0)][0]
            raise ValidationError(f"time {bad!r} is not a node of the grid")
        return pick


def auto_grading(pair: SoninePair) -> float:
    # s behaves like 1 - c t**(1-eta); graded meshes recover second order with r = 2/(1-eta)
    onset = 1.0 - pair.singularity_exponent
    return float(np.clip(2.0 / onset, _MIN_GRADING, _MAX_GRADING))


# -------------------------------------------------------------- kernel table


class _LogChebyshevTable:
    """Piecewise Chebyshev interpolant of ``log l`` in ``log t``.

    Panels are halved until the interpolant reproduces ``l`` at panel
    midpoints to ``_TABLE_RTOL``; gives up (``ok`` false) when ``l`` is not
    positive or refinement stalls.
    """

    def __init__(self, fn, lo: float, hi: float):
        self.ok = False
        k = np.arange(_TABLE_NODES)
        self._x = np.cos(np.pi * (k + 0.5) / _TABLE_NODES)[::-1]
        # values -> coefficients for Chebyshev points of the first kind
        vander = np.polynomial.chebyshev.chebvander(self._x, _TABLE_NODES - 1)
        self._to_coef = np.linalg.inv(vander)
        ulo, uhi = np.log(lo), np.log(hi)
        width = 0.5
        for _ in range(6):
            count = max(1, int(np.ceil((uhi - ulo) / width)))
            edges = np.linspace(ulo, uhi, count + 1)
            mids = 0.5 * (edges[:-1, None] + edges[1:, None]) + 0.5 * np.diff(edges)[:, None] * self._x
            vals = fn(np.exp(mids.ravel())).reshape(mids.shape)
            if not np.all(np.isfinite(vals)) or np.any(vals <= 0):
                return
            coef = np.log(vals) @ self._to_coef.T
            self._edges, self._coef = edges, coef
            probe = 0.5 * (mids[:, 1:] + mids[:, :-1]).ravel()
            exact = fn(np.exp(probe))
            self._columns = np.ascontiguousarray(coef.T)
            if np.all(exact > 0) and np.max(np.abs(self(np.exp(probe)) / exact - 1.0)) <= _TABLE_RTOL:
                self.ok = True
                return
            width *= 0.5

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        u = np.log(t).ravel()
        edges = self._edges
        width = edges[1] - edges[0]
        # panels are uniform in log t
        idx = np.clip(((u - edges[0]) / width).astype(np.intp), 0, len(edges) - 2)
        x = np.clip(2.0 * (u - edges[idx]) / width - 1.0, -1.0, 1.0)
        # Clenshaw recurrence on gathered coefficient columns
        coef = self._columns
        b1 = np.zeros_like(x)
        b2 = np.zeros_like(x)
        two_x = 2.0 * x
        for k in range(len(coef) - 1, 0, -1):
            nxt = coef[k][idx]
            nxt += two_x * b1
            nxt -= b2
            b2 = b1
            b1 = nxt
        out = coef[0][idx] + x * b1 - b2
        return np.exp(out).reshape(t.shape)


def _fast(fn, lo: float, hi: float):
    """``fn`` itself when it is cheap, else a verified interpolation table.

    The table is used on ``[lo, hi]``; zero arguments map to zero, as for
    the running integrals.
    """
    probe = np.geomspace(lo, hi, 4096)
    start = time.perf_counter()
    fn(probe)
    if time.perf_counter() - start < 4096 * 5e-8:
        return fn
    table = _LogChebyshevTable(fn, lo, hi)
    if not table.ok:
        return fn

    def evaluate(t):
        t = np.asarray(t, dtype=float)
        out = np.zeros_like(t)
        pos = t > 0
        out[pos] = table(t[pos])
        return out

    return evaluate


def _fast_kernel(pair: SoninePair, lo: float, hi: float):
    return _fast(pair.l, lo, hi)


# ------------------------------------------------------------------ weights


@dataclass(frozen=True)
class ProductWeights:
    """Cell integrals of ``l(t_i - s)`` against the two hat pieces.

    ``cell[i, j] = int_{t_j}^{t_{j+1}} l(t_i - s) ds`` and ``slope[i, j]``
    is the same integral weighted by ``(s - t_j)/h_j``; both vanish for
    ``j >= i``.  ``matrix`` maps nodal values to ``(l*u)(t_i)``.
    """

    cell: np.ndarray
    slope: np.ndarray
    matrix: np.ndarray


_weights_lock = threading.Lock()


@lru_cache(maxsize=4)
def _cached_weights(pair: SoninePair, grid: TimeGrid) -> ProductWeights:
    return _build_weights(pair, grid)


def product_weights(pair: SoninePair, grid: TimeGrid) -> ProductWeights:
    with _weights_lock:
        return _cached_weights(pair, grid)


def _build_weights(pair: SoninePair, grid: TimeGrid) -> ProductWeights:
    t = grid.nodes
    h = grid.steps
    n = grid.N
    cell = np.zeros((n + 1, n))
    slope = np.zeros((n + 1, n))

    ii, jj = np.tril_indices(n + 1, -1)
    a = t[ii] - t[jj + 1]
    b = t[ii] - t[jj]
    hj = h[jj]
    near = a < _NEAR_CELLS * hj

    # near the diagonal: exact differences of running integrals
    an, bn, hn = a[near], b[near], hj[near]
    lo = float(np.min(h))
    big_l, big_l2 = _fast(pair.L, lo, float(t[-1])), _fast(pair.L2, lo, float(t[-1]))
    la, lb = big_l(an), big_l(bn)
    cell[ii[near], jj[near]] = lb - la
    moment = big_l2(bn) - big_l2(an) - hn * la
    slope[ii[near], jj[near]] = moment / hn

    far = ~near
    if np.any(far):
        # Simpson on far cells; endpoint values are shared between cells
        kernel = _fast_kernel(pair, float(a[far].min()), float(t[-1]))
        fi, fj = ii[far], jj[far]
        ends = np.zeros((n + 1, n + 1))
        need = np.zeros((n + 1, n + 1), dtype=bool)
        need[fi, fj] = True
        need[fi, fj + 1] = True
        need &= np.tri(n + 1, k=-1, dtype=bool)
        ends[need] = kernel((t[:, None] - t[None, :])[need])
        hf = hj[far]
        at_left = ends[fi, fj]        # tau = b
        at_right = ends[fi, fj + 1]   # tau = a
        at_mid = kernel(0.5 * (a[far] + b[far]))
        cell[fi, fj] = hf * (at_right + 4.0 * at_mid + at_left) / 6.0
        # weight (s - t_j)/h is 0 at s = t_j, 1/2 at the midpoint, 1 at s = t_{j+1}
        slope[fi, fj] = hf * (at_right + 2.0 * at_mid) / 6.0

    matrix = np.zeros((n + 1, n + 1))
    matrix[:, :n] += cell - slope
    matrix[:, 1:] += slope
    for arr in (cell, slope, matrix):
        arr.setflags(write=False)
    return ProductWeights(cell=cell, slope=slope, matrix=matrix)


@lru_cache(maxsize=4)
def _cached_ratio_matrix(pair: SoninePair, grid: TimeGrid) -> np.ndarray:
    return _build_ratio_matrix(pair, grid, _cached_weights(pair, grid))


def ratio_matrix(pair: SoninePair, grid: TimeGrid) -> np.ndarray:
    """Matrix ``A`` with ``(l*(l q))(t_i) = l(t_i) (A q)_i`` for piecewise linear ``q``."""
    with _weights_lock:
        return _cached_ratio_matrix(pair, grid)


def _build_ratio_matrix(pair: SoninePair, grid: TimeGrid, weights: ProductWeights) -> np.ndarray:
    # The resolvent is written r = l q with q smooth and q(0) = 1.  On each
    # cell the factor whose singularity is closer is integrated exactly and
    # the other one is interpolated; cells close to both singular points are
    # integrated numerically.
    t = grid.nodes
    h = grid.steps
    n = grid.N
    lt = np.empty(n + 1)
    lt[0] = np.nan
    lt[1:] = pair.l(t[1:])
    big_l, big_l2 = pair.L(t), pair.L2(t)
    mass = np.diff(big_l)
    tilt = (h * big_l[1:] - np.diff(big_l2)) / h

    ii, jj = np.tril_indices(n + 1, -1)
    a = t[ii] - t[jj + 1]
    b = t[ii] - t[jj]
    hj = h[jj]
    near = a < _NEAR_CELLS * hj
    smooth = t[jj] >= _SMOOTH_CELLS * hj
    # l(s) is only interpolated linearly next to the diagonal far from the origin
    graded = near
    left = np.zeros(ii.size)
    right = np.zeros(ii.size)

    sel = near & ~graded
    ci, cj = ii[sel], jj[sel]
    left[sel] = (weights.cell[ci, cj] - weights.slope[ci, cj]) * lt[cj]
    right[sel] = weights.slope[ci, cj] * lt[cj + 1]

    far = ~near
    if np.any(far):
        kernel = _fast_kernel(pair, float(a[far].min()), float(t[-1]))
        at_a, at_b = kernel(a[far]), kernel(b[far])
        fj = jj[far]
        sub = smooth[far]
        # l(s) singular on the cell: exact moments of l(s), l(t_i - s) linear
        lf = np.where(sub, 0.0, (mass[fj] - tilt[fj]) * at_b)
        rf = np.where(sub, 0.0, tilt[fj] * at_a)
        # both factors smooth: Simpson on the product
        fs = far.nonzero()[0][sub]
        js = jj[fs]
        mid_s = pair.l(0.5 * (t[:-1] + t[1:]))[js]
        mid_i = kernel(0.5 * (a[fs] + b[fs]))
        centre = 2.0 * mid_i * mid_s
        lf[sub] = h[js] * (at_b[sub] * lt[js] + centre) / 6.0
        rf[sub] = h[js] * (centre + at_a[sub] * lt[js + 1]) / 6.0
        left[far], right[far] = lf, rf

    if np.any(graded):
        tiny = float(np.min(np.diff(t[: 2])) * 2.0 ** -(_DYADIC_LEVELS + 2))
        kernel = _fast_kernel(pair, tiny, float(t[-1]))
        left[graded], right[graded] = _dyadic_cells(kernel, pair.L, t, ii[graded], jj[graded])

    matrix = np.zeros((n + 1, n + 1))
    np.add.at(matrix, (ii, jj), left)
    np.add.at(matrix, (ii, jj + 1), right)
    matrix[1:] /= lt[1:, None]
    matrix.setflags(write=False)
    return matrix


def _dyadic_cells(kernel, cumulative, t, ii, jj):
    """``int l(t_i - s) l(s) {1 - theta, theta} ds`` over cell j by graded Gauss panels.

    Each half of the cell is cut into panels that halve towards its end until
    the panel width drops below the distance to the nearest singular point;
    a singular end keeps ``_DYADIC_LEVELS`` panels and its last sliver is
    integrated with the singular factor exact and the other one frozen.
    """
    x, w = np.polynomial.legendre.leggauss(_PANEL_NODES)
    lo, hi = t[jj], t[jj + 1]
    half = 0.5 * (hi - lo)
    ti = t[ii]
    gap = ti - hi
    with np.errstate(divide="ignore"):
        need_lo = np.where(lo > 0, np.ceil(np.log2(np.maximum(half / np.maximum(lo, 1e-300), 1.0))) + 1, _DYADIC_LEVELS)
        need_hi = np.where(gap > 0, np.ceil(np.log2(np.maximum(half / np.maximum(gap, 1e-300), 1.0))) + 1, _DYADIC_LEVELS)
    need_lo = np.minimum(need_lo, _DYADIC_LEVELS).astype(int)
    need_hi = np.minimum(need_hi, _DYADIC_LEVELS).astype(int)
    out_left = np.zeros(ii.size)
    out_right = np.zeros(ii.size)
    for side, need in ((0, need_lo), (1, need_hi)):
        for depth in np.unique(need):
            pick = np.nonzero(need == depth)[0]
            hp = half[pick][:, None, None]
            levels = 2.0 ** -np.arange(depth)
            offset = hp * (0.5 * levels[None, :, None]) * (1.0 + 0.5 * (x[None, None, :] + 1.0))
            weight = hp * (0.25 * levels[None, :, None]) * w[None, None, :]
            last = hp[:, :, 0] * 2.0 ** -depth
            singular = (lo[pick] == 0) if side == 0 else (gap[pick] == 0)
            # closing panel [0, last] from the end, Gauss unless the end is singular
            close_off = last[:, :, None] * 0.5 * (x[None, None, :] + 1.0)
            close_w = np.where(singular[:, None, None], 0.0, last[:, :, None] * 0.5 * w[None, None, :])
            offset = np.concatenate([offset, close_off], axis=1)
            weight = np.concatenate([weight, close_w], axis=1)
            theta = offset / (2.0 * hp)
            if side == 0:
                s = lo[pick][:, None, None] + offset
            else:
                s = hi[pick][:, None, None] - offset
                theta = 1.0 - theta
            arg_i = np.maximum(ti[pick][:, None, None] - s, 1e-300)
            arg_s = np.maximum(s, 1e-300)
            values = kernel(arg_i) * kernel(arg_s) * weight
            out_left[pick] += np.sum(values * (1.0 - theta), axis=(1, 2))
            out_right[pick] += np.sum(values * theta, axis=(1, 2))
            if np.any(singular):
                sp = pick[singular]
                sliver = last[singular, 0, 0] if last.ndim == 3 else last[singular, 0]
                if side == 0:
                    out_left[sp] += cumulative(sliver) * kernel(ti[sp])
                else:
                    out_right[sp] += cumulative(sliver) * kernel(hi[sp])
    return out_left, out_right


def _march(matrix: np.ndarray, forcing: np.ndarray, mus: np.ndarray) -> np.ndarray:
    """Solve ``u + mu * (matrix @ u) = forcing`` row by row for every mu."""
    n = matrix.shape[0]
    out = np.empty((n, mus.size))
    f = forcing if forcing.ndim == 2 else forcing[:, None]
    f = np.broadcast_to(f, (n, mus.size))
    diag = np.diag(matrix)
    out[0] = f[0] / (1.0 + mus * diag[0])
    for i in range(1, n):
        history = matrix[i, :i] @ out[:i]
        out[i] = (f[i] - mus * history) / (1.0 + mus * diag[i])
    return out


def _residual(matrix, values, forcing, mus) -> np.ndarray:
    f = forcing if forcing.ndim == 2 else forcing[:, None]
    res = values + mus[None, :] * (matrix @ values) - f
    scale = np.maximum(1.0, np.abs(f))
    return np.max(np.abs(res) / scale, axis=0)


def _check_mus(mu) -> np.ndarray:
    mus = np.atleast_1d(np.asarray(mu, dtype=float))
    if mus.ndim != 1 or np.any(~np.isfinite(mus)):
        raise ValidationError("spectral values must be a finite scalar or 1-d sequence")
    if np.any(mus < 0):
        raise DomainError(f"spectral value must be nonnegative, got {mus[mus < 0][0]}")
    return mus


# ---------------------------------------------------------------- solutions


@dataclass(frozen=True, eq=False)
class RelaxationSolution:
    grid: TimeGrid
    mu: float
    values: np.ndarray
    kind: str
    pair: SoninePair = field(repr=False)
    residual: float = 0.0
    error_estimate: float | None = None

    @property
    def times(self) -> np.ndarray:
        return self.grid.nodes

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Two-sided envelope at the nodes.

        relaxation: ``1/(1 + mu/k(t)) <= s <= 1/(1 + mu L(t))``;
        resolvent: ``0 <= r <= l(t)/(1 + mu L(t))``.
        """
        t = self.grid.nodes
        upper = 1.0 / (1.0 + self.mu * self.pair.L(t))
        lower = np.zeros_like(t)
        if self.kind == "resolvent":
            with np.errstate(divide="ignore"):
                upper = upper * np.concatenate([[np.inf], self.pair.l(t[1:])])
            return lower, upper
        if self.pair.k_eval is not None:
            lower[0] = 1.0
            lower[1:] = 1.0 / (1.0 + self.mu / self.pair.k(t[1:]))
        return lower, upper

    def sandwich_violation(self, tol: float | None = None) -> float:
        """Largest excursion outside :meth:`bounds` beyond ``tol`` (0 if none).

        For the resolvent ``tol`` is relative to the upper bound, since ``r``
        is unbounded at the origin.
        """
        tol = self.default_tolerance() if tol is None else tol
        lower, upper = self.bounds()
        v = self.values
        finite = np.isfinite(v) & np.isfinite(upper)
        slack = np.where(finite, tol * upper, 0.0) if self.kind == "resolvent" else tol
        with np.errstate(invalid="ignore"):
            over = np.where(finite, v - upper - slack, 0.0)
            under = np.where(finite, lower - slack - v, 0.0)
        return float(max(0.0, np.max(over), np.max(under)))

    def default_tolerance(self) -> float:
        base = self.error_estimate if self.error_estimate is not None else 0.0
        return 2.0 * base + 1e-12

    def to_csv(self, path) -> Path:
        lower, upper = self.bounds()
        path = Path(path)
        with path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t", "value", "lower_bound", "upper_bound"])
            for row in zip(self.grid.nodes, self.values, lower, upper):
                writer.writerow([_fmt(x) for x in row])
        return path


def _fmt(x: float) -> str:
    return format(float(x), ".15g")


def relaxation_values(pair: SoninePair, mus, grid: TimeGrid) -> tuple[np.ndarray, np.ndarray]:
    """Nodal ``s_mu`` for many ``mu`` at once; returns (values, residuals)."""
    mus = _check_mus(mus)
    weights = product_weights(pair, grid)
    forcing = np.ones(grid.N + 1)
    values = _march(weights.matrix, forcing, mus)
    return values, _residual(weights.matrix, values, forcing, mus)


def forced_values(pair: SoninePair, mus, grid: TimeGrid, forcing: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Solve ``w + mu (l*w) = F`` column by column; ``forcing`` has shape (N+1, len(mus))."""
    mus = _check_mus(mus)
    forcing = np.asarray(forcing, dtype=float)
    if forcing.shape != (grid.N + 1, mus.size):
        raise ValidationError(f"forcing must have shape {(grid.N + 1, mus.size)}, got {forcing.shape}")
    weights = product_weights(pair, grid)
    values = _march(weights.matrix, forcing, mus)
    return values, _residual(weights.matrix, values, forcing, mus)


def resolvent_values(pair: SoninePair, mus, grid: TimeGrid) -> tuple[np.ndarray, np.ndarray]:
    """Nodal ``r_mu`` for many ``mu``; returns (values, residuals of the ratio equation)."""
    mus = _check_mus(mus)
    matrix = ratio_matrix(pair, grid)
    forcing = np.ones(grid.N + 1)
    ratio = _march(matrix, forcing, mus)
    residual = _residual(matrix, ratio, forcing, mus)
    values = np.empty_like(ratio)
    values[0] = _l_at_origin(pair)
    values[1:] = pair.l(grid.nodes[1:])[:, None] * ratio[1:]
    return values, residual


def _l_at_origin(pair: SoninePair) -> float:
    if pair.singularity_exponent > 0 or pair.family == "distributed_order":
        return np.inf
    return float(pair.l(np.array([np.finfo(float).tiny]))[0])


def _solve(kind, pair, mu, grid, estimate_error):
    if grid is None:
        grid = TimeGrid.for_pair(pair)
    mus = _check_mus(mu)
    if kind == "relaxation":
        values, residual = relaxation_values(pair, mus, grid)
    else:
        values, residual = resolvent_values(pair, mus, grid)
    errors = [None] * mus.size
    if estimate_error:
        coarse = grid.coarsen()
        if kind == "relaxation":
            cvals, _ = relaxation_values(pair, mus, coarse)
        else:
            cvals, _ = resolvent_values(pair, mus, coarse)
        diff = np.abs(values[2::2] - cvals[1:])
        if kind == "resolvent":
            diff = diff / np.abs(values[2::2])
        errors = [float(np.max(d)) for d in diff.T]
    out = [
        RelaxationSolution(grid=grid, mu=float(m), values=values[:, j].copy(), kind=kind, pair=pair,
                           residual=float(residual[j]), error_estimate=errors[j])
        for j, m in enumerate(mus)
    ]
    return out[0] if np.ndim(mu) == 0 else out


def solve_relaxation(pair: SoninePair, mu, grid: TimeGrid | None = None, *,
                     estimate_error: bool = True):
    """Relaxation function ``s_mu`` on ``grid``.

    ``mu`` may be a scalar (one solution) or a sequence (a list).  The error
    estimate is the largest nodal change against the half-resolution grid.
    """
    return _solve("relaxation", pair, mu, grid, estimate_error)


def solve_resolvent(pair: SoninePair, mu, grid: TimeGrid | None = None, *,
                    estimate_error: bool = True):
    """Resolvent ``r_mu``; the value at ``t = 0`` is ``l(0+)`` (infinite when ``l`` is singular).

    The error estimate is relative, against the half-resolution grid.
    """
    return _solve("resolvent", pair, mu, grid, estimate_error)


def richardson(fine: np.ndarray, coarse: np.ndarray) -> np.ndarray:
    """Second-order extrapolation onto the coarse nodes from grids N and N/2."""
    return (4.0 * fine[::2] - coarse) / 3.0


def resolvent_identity_defect(pair: SoninePair, mus, grid: TimeGrid | None = None) -> np.ndarray:
    """``max_t |s_mu - 1 + mu (1*r_mu)|`` for each ``mu``.

    ``s`` and ``r`` come from their own equations; ``1*r`` is accumulated
    by :func:`running_integral`.  Both sides are extrapolated from the grid
    and its coarsening, which removes the common ``N**-2`` error term.
    """
    if grid is None:
        grid = TimeGrid.for_pair(pair)
    mus = _check_mus(mus)
    sides = []
    for g in (grid, grid.coarsen()):
        s, _ = relaxation_values(pair, mus, g)
        r, _ = resolvent_values(pair, mus, g)
        cumulative = np.stack([running_integral(pair, g, r[:, j]) for j in range(mus.size)], axis=1)
        sides.append((s, cumulative))
    (s_fine, c_fine), (s_coarse, c_coarse) = sides
    s = richardson(s_fine, s_coarse)
    c = richardson(c_fine, c_coarse)
    return np.max(np.abs(s - 1.0 + mus[None, :] * c), axis=0)


def kernel_convolution(pair: SoninePair, grid: TimeGrid, samples: np.ndarray) -> np.ndarray:
    """``(l*f)(t_i)`` for ``f`` piecewise linear through ``samples`` (first axis = nodes)."""
    weights = product_weights(pair, grid)
    samples = np.asarray(samples)
    if samples.shape[0] != grid.N + 1:
        raise ValidationError("samples must have one row per grid node")
    return np.tensordot(weights.matrix, samples, axes=(1, 0))


def running_integral(pair: SoninePair, grid: TimeGrid, values: np.ndarray) -> np.ndarray:
    """``(1*r)(t_i)`` for a kernel-like ``r`` by product trapezoid weighted with ``l``.

    ``r/l`` is interpolated linearly (it tends to 1 at the origin), so the
    ``t**-eta`` blow-up of ``r`` is integrated exactly.
    """
    t = grid.nodes
    h = grid.steps
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.empty_like(values, dtype=float)
        ratio[1:] = values[1:] / pair.l(t[1:])
    ratio[0] = 1.0
    big_l = pair.L(t)
    big_l2 = pair.L2(t)
    mass = np.diff(big_l)
    # int_{t_j}^{t_{j+1}} l(s) (s - t_j) ds / h_j
    tilt = (h * big_l[1:] - np.diff(big_l2)) / h
    cells = ratio[:-1] * (mass - tilt) + ratio[1:] * tilt
    return np.concatenate([[0.0], np.cumsum(cells)])


# ---------------------------------------------------------- Sonine inversion


@dataclass(frozen=True)
class SonineInversion:
    """Cell averages of ``l`` recovered from ``k``, plus the residual trace at the nodes."""

    grid: TimeGrid
    averages: np.ndarray
    midpoints: np.ndarray
    residual: np.ndarray
    window: tuple[int, int]

    @property
    def max_residual(self) -> float:
        lo, hi = self.window
        return float(np.max(np.abs(self.residual[lo:hi])))

    def at(self, times) -> np.ndarray:
        """``l`` at ``times`` by linear interpolation between cell midpoints."""
        times = np.asarray(times, dtype=float)
        if np.any(times < self.midpoints[0]) or np.any(times > self.midpoints[-1]):
            raise ValidationError("times must lie between the first and last cell midpoints")
        return np.interp(times, self.midpoints, self.averages)


def invert_sonine(k_eval, singularity_exponent: float, grid: TimeGrid, *,
                  cumulative_k=None, tol: float = 1e-4) -> SonineInversion:
    """Solve ``(k*l)(t) = 1`` for a piecewise-constant ``l``.

    Collocation at cell midpoints with exact cell integrals of ``k``.
    ``singularity_exponent`` is that of ``k``; it is only used when
    ``cumulative_k`` is not given and ``K = 1*k`` must be built by
    quadrature.  The residual of the convolution identity is measured at
    the grid nodes, away from the collocation points; if it exceeds ``tol``
    on the interior two thirds of the grid an :class:`AccuracyError`
    carries the trace.
    """
    if isinstance(k_eval, SoninePair):
        pair = k_eval
        if pair.k_eval is None:
            raise ValidationError("pair has no k evaluator to invert")
        k_eval, cumulative_k = pair.k_eval, pair.cumulative_k
        singularity_exponent = pair.k_singularity_exponent
    if not 0.0 <= singularity_exponent < 1.0:
        raise ValidationError("singularity exponent of k must lie in [0, 1)")
    t = grid.nodes
    n = grid.N
    if cumulative_k is None:
        integrals, _ = _jacobi_running_integrals(
            lambda s: np.asarray(k_eval(s), dtype=float), singularity_exponent)
        # every argument below is at least half the smallest step
        cumulative_k = _fast(integrals, 0.25 * float(grid.steps.min()), grid.T)

    def cell_matrix(points):
        # int over cell j, truncated at the point, of k(point - s) ds
        start = t[None, :-1]
        stop = np.minimum(t[None, 1:], points[:, None])
        width = points[:, None] - start
        inside = width > 0
        upper = np.where(inside, width, 0.0)
        lower = np.where(inside, points[:, None] - stop, 0.0)
        out = np.zeros(upper.shape)
        pos = upper > 0
        out[pos] = cumulative_k(upper[pos])
        rest = pos & (lower > 0)
        out[rest] -= cumulative_k(lower[rest])
        return out

    mids = 0.5 * (t[:-1] + t[1:])
    system = cell_matrix(mids)
    if np.any(np.diag(system) <= 0):
        raise AccuracyError("singular collocation system: k integrates to zero on a cell")
    averages = solve_triangular(system, np.ones(n), lower=True)
    residual = cell_matrix(t[1:]) @ averages - 1.0
    window = (n // 6, n - n // 6)
    result = SonineInversion(grid=grid, averages=averages, midpoints=mids,
                             residual=residual, window=window)
    if result.max_residual > tol:
        raise AccuracyError(
            f"Sonine inversion residual {result.max_residual:.3e} exceeds {tol:.1e}",
            residual=residual, window=window,
        )
    return result
