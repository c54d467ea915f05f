"""Sonine kernel pairs ``(k, l)`` with ``k * l = 1``.

A :class:`SoninePair` bundles vectorised evaluators for

* ``k`` and ``l``,
* their running integrals ``K = 1*k`` and ``L = 1*l``,
* the second running integral ``L2 = 1*1*l``, used by the product
  integration weights in :mod:`sonine.volterra`,

together with the exponents of the ``t**-eta`` blow-up of ``l`` and ``k`` at
the origin.  All built-in families have closed forms for every one of these
functions; for the ``custom`` family the missing running integrals are
obtained by Gauss-Jacobi quadrature against the declared exponent.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import special

from .errors import IntegrityError, ValidationError
from .specfun import (
    EULER_GAMMA,
    ein,
    exp_integral_e1,
    mittag_leffler,
    mv_mittag_leffler,
    power_kernel,
)

FAMILIES = ("fractional", "two_term", "distributed_order", "multi_term", "tempered", "custom")

Evaluator = Callable[[np.ndarray], np.ndarray]

_GL_ORDER_ALPHA = 64
_GJ_NODES = 40
_VERIFY_PANELS = 50
_VERIFY_GL = 16


def reference_grid(num: int = 25) -> np.ndarray:
    """Log-spaced nodes on ``[0.1, 10]`` used as the default check grid."""
    return np.logspace(-1.0, 1.0, num)


@dataclass(frozen=True, eq=False)
class SoninePair:
    """Evaluators for one kernel pair.

    Instances compare and hash by identity so they can key solver caches.
    ``k_eval`` is ``None`` only for a custom pair whose partner ``k`` is not
    a function (``l = 1`` pairs with the Dirac mass).
    """

    family: str
    params: dict
    k_eval: Evaluator | None
    l_eval: Evaluator
    cumulative_l: Evaluator
    double_cumulative_l: Evaluator
    cumulative_k: Evaluator | None
    singularity_exponent: float
    k_singularity_exponent: float = 0.0
    label: str = field(default="")

    def k(self, t):
        if self.k_eval is None:
            raise ValidationError(f"pair {self.describe()} has no pointwise k")
        return _apply(self.k_eval, t)

    def l(self, t):
        return _apply(self.l_eval, t)

    def L(self, t):
        """``(1*l)(t)``; zero at ``t = 0``."""
        return _apply_with_zero(self.cumulative_l, t)

    def L2(self, t):
        """``(1*1*l)(t)``; zero at ``t = 0``."""
        return _apply_with_zero(self.double_cumulative_l, t)

    def K(self, t):
        if self.cumulative_k is None:
            raise ValidationError(f"pair {self.describe()} has no pointwise k")
        return _apply_with_zero(self.cumulative_k, t)

    def describe(self) -> str:
        if self.label:
            return self.label
        inner = ", ".join(f"{k}={v}" for k, v in self.params.items())
        return f"{self.family}({inner})"


def _apply(fn, t):
    ta = np.asarray(t, dtype=float)
    out = np.asarray(fn(np.atleast_1d(ta).ravel()), dtype=float).reshape(ta.shape)
    return float(out) if out.ndim == 0 else out


def _apply_with_zero(fn, t):
    ta = np.asarray(t, dtype=float)
    flat = np.atleast_1d(ta).ravel()
    if np.any(flat < 0):
        raise ValidationError("running integrals need t >= 0")
    out = np.zeros_like(flat)
    pos = flat > 0
    if np.any(pos):
        out[pos] = fn(flat[pos])
    out = out.reshape(ta.shape)
    return float(out) if out.ndim == 0 else out


def cumulative_l(pair: SoninePair, t):
    """``(1*l)(t)`` for ``t >= 0``; nondecreasing in ``t``."""
    return pair.L(t)


# ---------------------------------------------------------------- families


def _fractional(alpha: float) -> SoninePair:
    if not 0.0 < alpha < 1.0:
        raise ValidationError(f"fractional pair needs 0 < alpha < 1, got {alpha}")
    return SoninePair(
        family="fractional",
        params={"alpha": alpha},
        k_eval=lambda t: power_kernel(t, 1.0 - alpha),
        l_eval=lambda t: power_kernel(t, alpha),
        cumulative_l=lambda t: power_kernel(t, alpha + 1.0),
        double_cumulative_l=lambda t: power_kernel(t, alpha + 2.0),
        cumulative_k=lambda t: power_kernel(t, 2.0 - alpha),
        singularity_exponent=1.0 - alpha,
        k_singularity_exponent=alpha,
    )


def _two_term(alpha: float, beta: float) -> SoninePair:
    if not 0.0 < alpha < beta < 1.0:
        raise ValidationError(f"two_term pair needs 0 < alpha < beta < 1, got ({alpha}, {beta})")

    def ml_times_power(shift):
        # t**(beta-1+shift) * E_{alpha, beta+shift}(-t**alpha)
        return lambda t: t ** (beta - 1.0 + shift) * mittag_leffler(-(t**alpha), alpha, beta + shift)

    return SoninePair(
        family="two_term",
        params={"alpha": alpha, "beta": beta},
        k_eval=lambda t: power_kernel(t, 1.0 - beta + alpha) + power_kernel(t, 1.0 - beta),
        l_eval=ml_times_power(0),
        cumulative_l=ml_times_power(1),
        double_cumulative_l=ml_times_power(2),
        cumulative_k=lambda t: power_kernel(t, 2.0 - beta + alpha) + power_kernel(t, 2.0 - beta),
        singularity_exponent=1.0 - beta,
        k_singularity_exponent=beta,
    )


def _multi_term(alphas, weights=None, truncation: int = 80) -> SoninePair:
    a = np.asarray(alphas, dtype=float).ravel()
    if a.size < 1:
        raise ValidationError("multi_term pair needs at least one order")
    if not (np.all(a > 0) and np.all(a < 1) and np.all(np.diff(a) < 0)):
        raise ValidationError(f"multi_term orders must satisfy 1 > a_1 > ... > a_m > 0, got {a.tolist()}")
    w = np.ones_like(a) if weights is None else np.asarray(weights, dtype=float).ravel()
    if w.shape != a.shape or np.any(w <= 0):
        raise ValidationError("multi_term weights must be positive, one per order")
    lead, rest = a[0], a[1:]
    gaps = lead - rest
    ratios = w[1:] / w[0]

    def series(shift):
        # t**(a_1-1+shift)/w_1 * E_{(a_1-a_j), a_1+shift}(-(w_j/w_1) t**(a_1-a_j))
        def fn(t):
            pref = t ** (lead - 1.0 + shift) / w[0]
            if gaps.size == 0:
                return pref * special.rgamma(lead + shift)
            if gaps.size == 1:
                return pref * mittag_leffler(-ratios[0] * t ** gaps[0], gaps[0], lead + shift)
            z = -ratios[None, :] * t[:, None] ** gaps[None, :]
            return pref * mv_mittag_leffler(z, tuple(gaps), lead + shift, truncation=truncation)

        return fn

    params = {"alphas": tuple(a.tolist())}
    if weights is not None:
        params["weights"] = tuple(w.tolist())
    return SoninePair(
        family="multi_term",
        params=params,
        k_eval=lambda t: sum(wj * power_kernel(t, 1.0 - aj) for aj, wj in zip(a, w)),
        l_eval=series(0),
        cumulative_l=series(1),
        double_cumulative_l=series(2),
        cumulative_k=lambda t: sum(wj * power_kernel(t, 2.0 - aj) for aj, wj in zip(a, w)),
        singularity_exponent=1.0 - lead,
        k_singularity_exponent=lead,
    )


def _tempered(alpha: float, gamma: float) -> SoninePair:
    if not 0.0 < alpha < 1.0:
        raise ValidationError(f"tempered pair needs 0 < alpha < 1, got {alpha}")
    if not gamma > 0.0:
        raise ValidationError(f"tempered pair needs gamma > 0, got {gamma}")

    def moment(t, n):
        # int_0^t s**n g_alpha(s) exp(-gamma s) ds
        scale = np.exp(special.gammaln(alpha + n) - special.gammaln(alpha) - (alpha + n) * np.log(gamma))
        return scale * special.gammainc(alpha + n, gamma * t)

    def l_fn(t):
        return power_kernel(t, alpha) * np.exp(-gamma * t) + gamma * moment(t, 0)

    def big_l(t):
        m0, m1 = moment(t, 0), moment(t, 1)
        return m0 + gamma * (t * m0 - m1)

    def big_l2(t):
        m0, m1, m2 = moment(t, 0), moment(t, 1), moment(t, 2)
        return (t * m0 - m1) + 0.5 * gamma * (t * t * m0 - 2.0 * t * m1 + m2)

    def big_k(t):
        return gamma ** (alpha - 1.0) * special.gammainc(1.0 - alpha, gamma * t)

    return SoninePair(
        family="tempered",
        params={"alpha": alpha, "gamma": gamma},
        k_eval=lambda t: power_kernel(t, 1.0 - alpha) * np.exp(-gamma * t),
        l_eval=l_fn,
        cumulative_l=big_l,
        double_cumulative_l=big_l2,
        cumulative_k=big_k,
        singularity_exponent=1.0 - alpha,
        k_singularity_exponent=alpha,
    )


_GL_A_NODES, _GL_A_WEIGHTS = np.polynomial.legendre.leggauss(_GL_ORDER_ALPHA)
_ORDER_NODES = 0.5 * (_GL_A_NODES + 1.0)
_ORDER_WEIGHTS = 0.5 * _GL_A_WEIGHTS


def _distributed_k(t):
    # int_0^1 t**(a-1)/Gamma(a) da; rgamma vanishes at a=0 so the integrand is smooth
    a = _ORDER_NODES[None, :]
    logt = np.log(t)[:, None]
    vals = np.exp((a - 1.0) * logt) * special.rgamma(a)
    return vals @ _ORDER_WEIGHTS


def _distributed_big_k(t):
    a = _ORDER_NODES[None, :]
    logt = np.log(t)[:, None]
    vals = np.exp(a * logt) * special.rgamma(a + 1.0)
    return vals @ _ORDER_WEIGHTS


def _exp_ein_coefficients(n: int) -> np.ndarray:
    # Taylor coefficients of exp(h) * Ein(h)
    k = np.arange(n)
    ein_c = np.zeros(n)
    ein_c[1:] = (-1.0) ** (k[1:] + 1) / (k[1:] * special.factorial(k[1:]))
    exp_c = 1.0 / special.factorial(k)
    return np.convolve(exp_c, ein_c)[:n]


_SMALL_T_TERMS = 32
_EXP_EIN = _exp_ein_coefficients(_SMALL_T_TERMS)


def _distributed_big_l(t):
    out = np.empty_like(t)
    small = t <= 1.0
    ts = t[small]
    # exp(t)E1(t) + ln t + gamma without the log cancellation
    out[small] = np.exp(ts) * ein(ts) - np.expm1(ts) * (EULER_GAMMA + np.log(ts))
    tl = t[~small]
    out[~small] = exp_integral_e1(tl, scaled=True) + np.log(tl) + EULER_GAMMA
    return out


def _distributed_big_l2(t):
    out = np.empty_like(t)
    small = t <= 1.0
    ts = t[small]
    if ts.size:
        n = np.arange(_SMALL_T_TERMS)
        logt = np.log(ts)[:, None]
        p = ts[:, None] ** (n[None, :] + 1)
        first = p @ (_EXP_EIN / (n + 1.0))
        m = n[1:]
        second = (p[:, 1:] / (m + 1.0)) * (EULER_GAMMA + logt - 1.0 / (m + 1.0))
        second = second @ (1.0 / special.factorial(m))
        out[small] = first - second
    tl = t[~small]
    out[~small] = _distributed_big_l(tl) + tl * (np.log(tl) - 1.0 + EULER_GAMMA)
    return out


def _distributed_order() -> SoninePair:
    return SoninePair(
        family="distributed_order",
        params={},
        k_eval=_distributed_k,
        l_eval=lambda t: exp_integral_e1(t, scaled=True),
        cumulative_l=_distributed_big_l,
        double_cumulative_l=_distributed_big_l2,
        cumulative_k=_distributed_big_k,
        # logarithmic blow-up of l: any positive exponent bounds it
        singularity_exponent=0.0,
        k_singularity_exponent=1.0,
    )


def _jacobi_running_integrals(fn: Evaluator, eta: float):
    """Running integrals of a kernel behaving like ``t**-eta`` at the origin.

    The innermost dyadic panel uses Gauss-Jacobi nodes for the weight
    ``s**-eta``; the remaining panels use Gauss-Legendre.
    """
    xj, wj = special.roots_jacobi(_GJ_NODES, 0.0, -eta)
    xl, wl = np.polynomial.legendre.leggauss(_VERIFY_GL)
    depth = 60

    def integrals(t):
        first = np.zeros_like(t)
        second = np.zeros_like(t)
        edges = t[:, None] * 0.5 ** np.arange(depth + 1)[None, :]
        for j in range(depth):
            hi, lo = edges[:, j], edges[:, j + 1]
            half = 0.5 * (hi - lo)
            s = lo[:, None] + half[:, None] * (xl[None, :] + 1.0)
            vals = fn(s.ravel()).reshape(s.shape) * (half[:, None] * wl[None, :])
            first += vals.sum(axis=1)
            second += (vals * (t[:, None] - s)).sum(axis=1)
        inner = edges[:, depth]
        s = 0.5 * inner[:, None] * (xj[None, :] + 1.0)
        # weight (1+x)**-eta absorbs s**-eta up to the scale factor
        scale = (0.5 * inner) ** (1.0 - eta)
        reg = fn(s.ravel()).reshape(s.shape) * s**eta
        vals = reg * wj[None, :] * scale[:, None]
        first += vals.sum(axis=1)
        second += (vals * (t[:, None] - s)).sum(axis=1)
        return first, second

    return (lambda t: integrals(t)[0]), (lambda t: integrals(t)[1])


def _custom(k_eval, l_eval, singularity_exponent=0.0, k_singularity_exponent=0.0,
            cumulative_l=None, double_cumulative_l=None, cumulative_k=None,
            label="custom", verify_grid=None, tol=1e-6) -> SoninePair:
    if l_eval is None:
        raise ValidationError("custom pair needs an l evaluator")
    for name, eta in (("singularity_exponent", singularity_exponent),
                      ("k_singularity_exponent", k_singularity_exponent)):
        if not 0.0 <= eta < 1.0:
            raise ValidationError(f"{name} must lie in [0, 1), got {eta}")

    def vectorised(fn):
        return lambda t: np.broadcast_to(np.asarray(fn(t), dtype=float), np.shape(t)).copy()

    l_fn = vectorised(l_eval)
    k_fn = vectorised(k_eval) if k_eval is not None else None
    if cumulative_l is None or double_cumulative_l is None:
        big_l, big_l2 = _jacobi_running_integrals(l_fn, singularity_exponent)
        cumulative_l = cumulative_l or big_l
        double_cumulative_l = double_cumulative_l or big_l2
    if k_fn is not None and cumulative_k is None:
        cumulative_k, _ = _jacobi_running_integrals(k_fn, k_singularity_exponent)
    pair = SoninePair(
        family="custom",
        params={},
        k_eval=k_fn,
        l_eval=l_fn,
        cumulative_l=vectorised(cumulative_l),
        double_cumulative_l=vectorised(double_cumulative_l),
        cumulative_k=vectorised(cumulative_k) if cumulative_k is not None else None,
        singularity_exponent=float(singularity_exponent),
        k_singularity_exponent=float(k_singularity_exponent),
        label=label,
    )
    if k_fn is not None:
        # the identity cannot be inferred from user code, so it is checked here
        report = verify_sonine(pair, reference_grid() if verify_grid is None else verify_grid, tol)
        if not report.passed:
            raise IntegrityError(
                f"custom pair {label!r} fails the Sonine identity: "
                f"max deviation {report.max_abs_deviation:.3e} > {tol:.1e}"
            )
    return pair


def make_pair(family: str, **params) -> SoninePair:
    """Build a kernel pair.

    ============== =====================================================
    family         parameters
    ============== =====================================================
    fractional     ``alpha`` in (0, 1)
    two_term       ``alpha``, ``beta`` with 0 < alpha < beta < 1
    distributed_order  none
    multi_term     ``alphas`` decreasing in (0, 1), optional ``weights``
    tempered       ``alpha`` in (0, 1), ``gamma`` > 0
    custom         ``k_eval``, ``l_eval``, exponents, optional integrals
    ============== =====================================================
    """
    try:
        if family == "fractional":
            return _fractional(float(params.pop("alpha")))
        if family == "two_term":
            return _two_term(float(params.pop("alpha")), float(params.pop("beta")))
        if family == "distributed_order":
            return _distributed_order()
        if family == "multi_term":
            return _multi_term(params.pop("alphas"), params.pop("weights", None),
                               int(params.pop("truncation", 80)))
        if family == "tempered":
            return _tempered(float(params.pop("alpha")), float(params.pop("gamma")))
        if family == "custom":
            return _custom(params.pop("k_eval", None), params.pop("l_eval", None), **params)
    except KeyError as exc:
        raise ValidationError(f"{family} pair is missing parameter {exc.args[0]!r}") from None
    raise ValidationError(f"unknown kernel family {family!r}; expected one of {FAMILIES}")


# ------------------------------------------------------------ verification


@dataclass(frozen=True)
class SonineReport:
    grid: np.ndarray
    deviations: np.ndarray
    tol: float

    @property
    def max_abs_deviation(self) -> float:
        return float(np.max(np.abs(self.deviations)))

    @property
    def passed(self) -> bool:
        return self.max_abs_deviation <= self.tol

    def to_dict(self) -> dict:
        return {
            "grid": self.grid.tolist(),
            "deviations": self.deviations.tolist(),
            "max_abs_deviation": self.max_abs_deviation,
            "tol": self.tol,
            "passed": self.passed,
        }


def _checked(pair: SoninePair, which: str, s: np.ndarray) -> np.ndarray:
    vals = pair.k(s) if which == "k" else pair.l(s)
    vals = np.asarray(vals, dtype=float)
    bad = ~np.isfinite(vals) | (vals < 0)
    if np.any(bad):
        i = np.flatnonzero(bad.ravel())[0]
        raise IntegrityError(
            f"kernel {which} of {pair.describe()} returned {vals.ravel()[i]!r} at t={s.ravel()[i]!r}"
        )
    return vals


def _half_convolution(pair, t, near: str, far: str) -> np.ndarray:
    """``int_0^{t/2} far(t - s) near(s) ds`` with ``near`` singular at 0."""
    xl, wl = np.polynomial.legendre.leggauss(_VERIFY_GL)
    edges = 0.5 * t[:, None] * 0.5 ** np.arange(_VERIFY_PANELS + 1)[None, :]
    lo, hi = edges[:, 1:], edges[:, :-1]
    half = 0.5 * (hi - lo)
    s = lo[..., None] + half[..., None] * (xl + 1.0)
    f_near = _checked(pair, near, s)
    f_far = _checked(pair, far, t[:, None, None] - s)
    body = (f_near * f_far * half[..., None] * wl).sum(axis=(1, 2))
    # innermost panel: far factor frozen at t, near factor integrated exactly
    delta = edges[:, -1]
    running = pair.K(delta) if near == "k" else pair.L(delta)
    return body + _checked(pair, far, t) * running


def verify_sonine(pair: SoninePair, grid=None, tol: float = 1e-6) -> SonineReport:
    """Check ``(k*l)(t) = 1`` on ``grid`` by singularity-aware quadrature.

    The convolution is split at ``t/2`` so each half has only one singular
    endpoint; each half is covered by dyadic panels refined toward it.
    """
    if pair.k_eval is None:
        raise ValidationError(f"pair {pair.describe()} has no pointwise k to verify")
    g = reference_grid() if grid is None else np.asarray(grid, dtype=float).ravel()
    if g.size == 0 or np.any(g <= 0) or np.any(np.diff(g) <= 0):
        raise ValidationError("verification grid must be positive and strictly increasing")
    conv = _half_convolution(pair, g, "l", "k") + _half_convolution(pair, g, "k", "l")
    return SonineReport(grid=g, deviations=conv - 1.0, tol=float(tol))
