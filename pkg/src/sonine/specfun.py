"""Special functions used by the kernel families.

Everything here is a pure function of its arguments and accepts either
scalars or NumPy arrays (scalars in, floats out).

The two-parameter Mittag-Leffler function uses the standard convention
``E_{a,b}(z) = sum_k z**k / Gamma(a*k + b)``.  On the negative real axis each
point is routed by an a-priori accuracy estimate:

* the double precision power series, while its cancellation ratio is small;
* the algebraic asymptotic expansion (``0 < a < 1`` only), optimally
  truncated, once its smallest term is below the target;
* a Laplace inversion along a parabolic contour (``0 < a <= 1``), when the
  value is large enough for its ~1e-14 absolute error to be negligible;
* otherwise the power series in extended precision, with guard digits
  raised until the result clears the rounding floor.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import lru_cache

import mpmath
import numpy as np
from scipy import special

from .errors import AccuracyError, DomainError, SpecialFunctionOverflow, ValidationError

EULER_GAMMA = float(np.euler_gamma)

_EPS = np.finfo(float).eps
# series is used only while sum(|terms|)/|sum| stays below this
_SERIES_COND_LIMIT = 1.0e3
# beyond this |z|**(1/a) the cancellation ratio always exceeds the limit
_SERIES_REACH = 12.0
# target relative size of the smallest asymptotic term
_ASYMPTOTIC_RTOL = 1.0e-14
_ASYMPTOTIC_MAX_TERMS = 400
_CONTOUR_NODES = 20
# contour results are trusted only above this size (absolute error ~1e-14)
_CONTOUR_FLOOR = 1.0e-3
_MAX_EXTENDED_DIGITS = 400
_LOG_MAX = np.log(np.finfo(float).max)


@dataclass(frozen=True)
class MLOrder:
    """Orders ``(alpha, beta)`` of the two-parameter Mittag-Leffler function."""

    alpha: float
    beta: float = 1.0

    def __post_init__(self):
        if not (self.alpha > 0 and self.beta > 0):
            raise ValidationError(
                f"Mittag-Leffler orders must be positive, got alpha={self.alpha}, beta={self.beta}"
            )


@dataclass(frozen=True)
class MVMLOrder:
    """Orders of the multivariate Mittag-Leffler function."""

    alphas: tuple[float, ...]
    beta: float

    def __post_init__(self):
        object.__setattr__(self, "alphas", tuple(float(a) for a in self.alphas))
        if len(self.alphas) < 1:
            raise ValidationError("multivariate Mittag-Leffler needs at least one order")
        if any(a <= 0 for a in self.alphas) or not self.beta > 0:
            raise ValidationError(f"orders must be positive, got {self.alphas}, beta={self.beta}")

    @property
    def m(self) -> int:
        return len(self.alphas)


def _scalar_or_array(values, like):
    return float(np.asarray(values).item()) if np.ndim(like) == 0 else values


# gamma

def gamma_fn(x):
    """Euler gamma function for positive arguments."""
    xa = np.asarray(x, dtype=float)
    if np.any(~(xa > 0)):
        raise DomainError(f"gamma_fn is defined here only for x > 0, got {x!r}")
    return _scalar_or_array(special.gamma(xa), x)


def power_kernel(t, mu: float):
    """``g_mu(t) = t**(mu - 1) / Gamma(mu)`` for ``t > 0``."""
    t = np.asarray(t, dtype=float)
    with np.errstate(divide="ignore"):
        return t ** (mu - 1.0) * special.rgamma(mu)



# exponential integral

def _e1_series(x):
    # E1(x) = -gamma - ln x + Ein(x)
    return -EULER_GAMMA - np.log(x) + ein(x)


def _e1_scaled_cf(x):
    # e^x E1(x) = 1/(x+1- 1/(x+3- 4/(x+5- ...))), evaluated bottom-up
    depth = 80
    acc = np.zeros_like(x)
    for n in range(depth, 0, -1):
        acc = n * n / (x + 2 * n + 1 - acc)
    return 1.0 / (x + 1.0 - acc)


def ein(x):
    """Entire exponential integral ``sum_{k>=1} (-1)**(k+1) x**k / (k k!)``.

    Accurate for ``|x| <= 2``; used where ``E1(x) + ln x + gamma`` would
    cancel.
    """
    xa = np.asarray(x, dtype=float)
    term = xa.copy()
    total = xa.copy()
    for k in range(2, 40):
        term = -term * xa / k
        total = total + term / k
    return _scalar_or_array(total, x)


def exp_integral_e1(x, scaled: bool = False):
    """Exponential integral ``E1(x) = int_1^inf exp(-x t) / t dt`` for ``x > 0``.

    With ``scaled=True`` returns ``exp(x) * E1(x)``, which stays finite for
    large ``x``.
    """
    xa = np.atleast_1d(np.asarray(x, dtype=float))
    if np.any(~(xa > 0)):
        raise DomainError(f"E1 is defined here only for x > 0, got {x!r}")
    out = np.empty_like(xa)
    small = xa <= 1.0
    if np.any(small):
        v = _e1_series(xa[small])
        out[small] = v * np.exp(xa[small]) if scaled else v
    big = ~small
    if np.any(big):
        v = _e1_scaled_cf(xa[big])
        out[big] = v if scaled else v * np.exp(-xa[big])
    return _scalar_or_array(out.reshape(np.shape(x)), x)



# Mittag-Leffler branches

def _series_length(zmax: float, alpha: float, beta: float) -> int:
    # index past the peak where terms fall 46 e-folds below the largest one
    if zmax == 0:
        return 1
    lz = np.log(zmax)
    reach = zmax ** (1.0 / alpha)
    k = np.arange(0, int(2.0 * (reach + 60.0) / alpha) + 100)
    logt = k * lz - special.gammaln(alpha * k + beta)
    peak = int(np.argmax(logt))
    below = np.nonzero(logt[peak:] < logt[peak] - 46.0)[0]
    if below.size == 0:
        raise AccuracyError("Mittag-Leffler series did not converge", zmax=zmax, alpha=alpha, beta=beta)
    return peak + int(below[0]) + 1


def _ml_series(z, alpha, beta):
    """Double precision series; returns (sum, sum of |terms|)."""
    z = np.asarray(z, dtype=float)
    if z.size == 0:
        return z.copy(), z.copy()
    zmax = float(np.max(np.abs(z)))
    n = _series_length(zmax, alpha, beta)
    coef = special.rgamma(alpha * np.arange(n) + beta)
    if zmax == 0 or n * np.log(max(zmax, 1.0)) < 600.0:
        # plain recursion is safe: powers stay far from overflow
        total = np.full_like(z, coef[0])
        absum = np.full_like(z, abs(coef[0]))
        power = np.ones_like(z)
        for k in range(1, n):
            power *= z
            term = power * coef[k]
            total += term
            absum += np.abs(term)
        return total, absum
    total = np.zeros_like(z)
    absum = np.zeros_like(z)
    lz = np.log(np.abs(z), where=z != 0, out=np.full_like(z, -np.inf))
    sgn = np.sign(z)
    for k in range(n):
        if k == 0:
            term = np.full_like(z, coef[0])
        else:
            logmag = k * lz - special.gammaln(alpha * k + beta)
            term = np.exp(logmag) * (sgn**k)
            term = np.where(z == 0, 0.0, term)
        total += term
        absum += np.abs(term)
    return total, absum


def _ml_series_extended(z: float, alpha: float, beta: float, absum: float | None = None) -> float:
    """Series summed with enough guard digits to absorb its cancellation.

    The digit count is raised until the result sits at least 15 digits above
    the rounding floor ``absum * 10**-digits``.
    """
    if absum is None:
        absum = float(_ml_series(np.array([abs(z)]), alpha, beta)[1][0])
    if np.isfinite(absum):
        log_absum = np.log10(max(absum, 1e-300))
    else:
        log_absum = abs(z) ** (1.0 / alpha) / np.log(10.0)
    # first guess assumes algebraic decay of the value
    guess = max(2.0 * np.log10(max(abs(z), 1.0)) + 3.0, 0.0)
    digits = int(20 + max(log_absum, 0.0) + guess)
    while True:
        if digits > _MAX_EXTENDED_DIGITS:
            raise AccuracyError(
                "Mittag-Leffler series needs more than the extended-precision budget",
                z=z, alpha=alpha, beta=beta, digits=digits,
            )
        value = _ml_series_mp(z, alpha, beta, digits)
        floor = log_absum - digits
        if value != 0 and np.log10(abs(value)) - floor >= 15.0:
            return value
        needed = 20 + log_absum - (np.log10(abs(value)) if value != 0 else floor)
        digits = int(max(needed, digits + 20))


def _ml_series_mp(z: float, alpha: float, beta: float, digits: int) -> float:
    ctx = mpmath.MPContext()
    ctx.dps = digits
    zz = ctx.mpf(z)
    a = ctx.mpf(alpha)
    b = ctx.mpf(beta)
    total = ctx.mpf(0)
    power = ctx.mpf(1)
    peak = ctx.mpf(0)
    k = 0
    cutoff = ctx.mpf(10) ** (-digits)
    reach = abs(z) ** (1.0 / alpha)
    while True:
        term = power * ctx.rgamma(a * k + b)
        total += term
        mag = abs(term)
        peak = max(peak, mag)
        if k > 2 and mag < cutoff * peak and k * alpha > reach:
            break
        power *= zz
        k += 1
        if k > 500000:
            raise AccuracyError("extended Mittag-Leffler series did not converge", z=z)
    return float(total)


def _ml_asymptotic(x, alpha, beta):
    """Optimally truncated expansion of ``E_{a,b}(-x)`` for ``x > 0``, ``0 < a < 1``.

    Returns (value, estimated absolute error).  Truncation is decided on the
    envelope ``x**-k * Gamma(1 + a*k - b) / pi``, which bounds ``|1/Gamma(b - a*k)|``
    whenever ``b - a*k < 1``; individual terms near a pole of ``Gamma`` are
    tiny and would fake an early minimum.
    """
    x = np.asarray(x, dtype=float)
    logx = np.log(x)
    total = np.zeros_like(x)
    kept = np.zeros_like(x)
    best = np.full_like(x, np.inf)
    active = np.ones(x.shape, dtype=bool)
    for k in range(1, _ASYMPTOTIC_MAX_TERMS + 1):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        arg = beta - alpha * k
        if arg >= 1.0:
            log_env = -special.gammaln(arg)
        else:
            log_env = special.gammaln(1.0 - arg) - np.log(np.pi)
        env = np.exp(-k * logx[idx] + log_env)
        smaller = env < best[idx]
        kept[idx[smaller]] = total[idx[smaller]]
        best[idx[smaller]] = env[smaller]
        if special.rgamma(arg) != 0.0:
            term = special.gammasgn(arg) * np.exp(-k * logx[idx] - special.gammaln(arg))
            total[idx] += (-1.0) ** (k + 1) * term
        # past the minimum the envelope only grows
        done = (env > 1e3 * best[idx]) | (env < 1e-18 * np.abs(total[idx]))
        active[idx[done]] = False
    return kept, best


def _ml_contour(x, alpha, beta, nodes: int = _CONTOUR_NODES):
    """Laplace inversion of ``s**(a-b) / (s**a + x)`` at ``t = 1``.

    Trapezoid rule on the parabola ``s = mu (1 + i u)**2``; valid for
    ``a <= 1``, where every singularity lies on the negative real axis.
    Roundoff grows like ``exp(mu)``, so the absolute error stays near 1e-14.
    """
    x = np.asarray(x, dtype=float)[:, None]
    h = 3.0 / nodes
    u = np.arange(-nodes, nodes + 1) * h
    mu = np.pi * nodes / 12.0
    s = mu * (1.0 + 1j * u) ** 2
    ds = 2j * mu * (1.0 + 1j * u)
    transform = s ** (alpha - beta) / (s**alpha + x)
    return ((np.exp(s) * transform * ds).sum(axis=1) * h / (2j * np.pi)).real


def _ml_positive(z, alpha, beta):
    # leading exponential growth exp(z**(1/alpha)); refuse before summing
    zmax = float(np.max(z))
    growth = zmax ** (1.0 / alpha) + (1.0 - beta) / alpha * np.log(zmax) - np.log(alpha)
    if growth > _LOG_MAX - 1.0:
        raise SpecialFunctionOverflow(
            f"E_{{{alpha},{beta}}}({zmax}) exceeds the double precision range"
        )
    value, _ = _ml_series(z, alpha, beta)
    if not np.all(np.isfinite(value)):
        raise SpecialFunctionOverflow(f"E_{{{alpha},{beta}}} overflowed at z={zmax}")
    return value


def mittag_leffler(z, alpha: float, beta: float = 1.0, *, branch: str = "auto"):
    """Two-parameter Mittag-Leffler function ``E_{alpha,beta}(z)`` for real ``z``.

    Parameters
    ----------
    z : float or array_like
        Real argument(s).  The negative half-line is the primary use.
    alpha, beta : float
        Positive orders; ``alpha`` may also be an :class:`MLOrder`.
    branch : {"auto", "series", "asymptotic", "inversion"}
        Force one evaluation branch (intended for diagnostics).  ``"series"``
        adds guard digits automatically when the double-precision sum would
        cancel.

    Raises
    ------
    SpecialFunctionOverflow
        For large positive arguments whose value exceeds the float range.
    AccuracyError
        When no branch can reach the accuracy target.
    """
    order = alpha if isinstance(alpha, MLOrder) else MLOrder(alpha, beta)
    a, b = order.alpha, order.beta
    za = np.atleast_1d(np.asarray(z, dtype=float))
    flat = za.ravel()
    out = np.empty_like(flat)
    done = np.zeros(flat.shape, dtype=bool)

    zero = flat == 0
    out[zero] = special.rgamma(b)
    done |= zero

    pos = flat > 0
    if np.any(pos):
        out[pos] = _ml_positive(flat[pos], a, b)
        done |= pos

    neg = ~done
    if branch == "asymptotic":
        if a >= 1:
            raise AccuracyError("asymptotic branch requires alpha < 1", alpha=a)
        out[neg], _ = _ml_asymptotic(-flat[neg], a, b)
        return _scalar_or_array(out.reshape(za.shape), z)
    if branch == "inversion":
        if a > 1:
            raise AccuracyError("Laplace inversion branch requires alpha <= 1", alpha=a)
        out[neg] = _ml_contour(-flat[neg], a, b)
        return _scalar_or_array(out.reshape(za.shape), z)
    if branch not in ("auto", "series"):
        raise ValidationError(f"unknown branch {branch!r}")

    if a == 1.0 and b == 1.0 and branch == "auto":
        out[neg] = np.exp(flat[neg])
        neg = np.zeros_like(neg)
    idx = np.nonzero(neg)[0]
    if idx.size:
        # try the series where the cancellation ratio is tolerable
        small = idx[np.abs(flat[idx]) ** (1.0 / a) < _SERIES_REACH] if branch == "auto" else idx
        if small.size:
            val, absum = _ml_series(flat[small], a, b)
            cond = absum / np.maximum(np.abs(val), np.finfo(float).tiny)
            good = cond <= _SERIES_COND_LIMIT
            out[small[good]] = val[good]
            done[small[good]] = True
            if branch == "series":
                for i, s_abs in zip(small[~good], absum[~good]):
                    out[i] = _ml_series_extended(flat[i], a, b, s_abs)
                    done[i] = True
        rest = np.nonzero(~done)[0]
        if rest.size and a < 1:
            x = -flat[rest]
            val, err = _ml_asymptotic(x, a, b)
            good = err <= _ASYMPTOTIC_RTOL * np.abs(val)
            out[rest[good]] = val[good]
            done[rest[good]] = True
        rest = np.nonzero(~done)[0]
        if rest.size and a <= 1:
            val = _ml_contour(-flat[rest], a, b)
            good = np.abs(val) >= _CONTOUR_FLOOR * min(1.0, special.rgamma(b))
            out[rest[good]] = val[good]
            done[rest[good]] = True
        rest = np.nonzero(~done)[0]
        for i in rest:
            out[i] = _ml_series_extended(flat[i], a, b)
    return _scalar_or_array(out.reshape(za.shape), z)


def seam_point(alpha: float, beta: float = 1.0, rtol: float = _ASYMPTOTIC_RTOL) -> float:
    """Smallest ``x`` where the asymptotic expansion of ``E(-x)`` meets ``rtol``.

    This is where ``mittag_leffler`` hands the negative axis over to the
    asymptotic branch (``0 < alpha < 1``).
    """
    MLOrder(alpha, beta)
    if not alpha < 1:
        raise DomainError("the asymptotic branch exists only for alpha < 1")

    def ok(x):
        val, err = _ml_asymptotic(np.array([x]), alpha, beta)
        return err[0] <= rtol * abs(val[0])

    lo, hi = 1e-3, 1.0
    while not ok(hi):
        lo, hi = hi, hi * 2.0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        lo, hi = (lo, mid) if ok(mid) else (mid, hi)
    return hi



# multivariate Mittag-Leffler

@lru_cache(maxsize=512)
def _shell(k: int, m: int):
    combos = []
    # stars and bars: choose m-1 bar positions among k+m-1 slots
    for bars in itertools.combinations(range(k + m - 1), m - 1):
        prev = -1
        parts = []
        for b in bars:
            parts.append(b - prev - 1)
            prev = b
        parts.append(k + m - 1 - prev - 1)
        combos.append(parts)
    exps = np.array(combos, dtype=int).reshape(-1, m)
    logc = special.gammaln(k + 1) - special.gammaln(exps + 1).sum(axis=1)
    exps.setflags(write=False)
    coef = np.exp(logc)
    coef.setflags(write=False)
    return exps, coef


def multinomial_shell(k: int, m: int):
    """Exponent tuples ``l`` with ``|l| = k`` and their multinomial coefficients."""
    if k < 0 or m < 1:
        raise ValidationError("need k >= 0 and m >= 1")
    exps, coef = _shell(int(k), int(m))
    return exps.copy(), coef.copy()


def mv_mittag_leffler(z, alphas, beta: float | None = None, *, truncation: int = 80,
                      rtol: float = 1e-10, full_output: bool = False):
    """Multivariate Mittag-Leffler function by shell-ordered summation.

    ``z`` has shape ``(..., m)``; the trailing axis indexes the variables.
    The series is summed degree by degree; the tail beyond the last shell is
    estimated from the geometric decay of consecutive shell magnitudes.

    ``alphas`` may be an :class:`MVMLOrder`, in which case ``beta`` is taken
    from it.  With ``full_output=True`` returns ``(value, tail_bound, degree)``.
    """
    if isinstance(alphas, MVMLOrder):
        order = alphas
    elif beta is None:
        raise ValidationError("beta is required unless alphas is an MVMLOrder")
    else:
        order = MVMLOrder(tuple(np.atleast_1d(alphas)), beta)
    zz = np.asarray(z, dtype=float)
    if zz.ndim == 0 or zz.shape[-1] != order.m:
        raise ValidationError(f"z must have trailing dimension {order.m}, got shape {zz.shape}")
    if order.m == 1:
        value = mittag_leffler(zz[..., 0], order.alphas[0], order.beta)
        if full_output:
            return value, np.zeros_like(np.asarray(value)), 0
        return value

    pts = zz.reshape(-1, order.m)
    a = np.array(order.alphas)
    total = np.zeros(len(pts))
    absum = np.zeros(len(pts))
    shells = []
    tail = np.full(len(pts), np.inf)
    degree = 0
    for k in range(truncation + 1):
        exps, coef = _shell(k, order.m)
        powers = np.prod(pts[:, None, :] ** exps[None, :, :], axis=2)
        terms = coef[None, :] * powers * special.rgamma(order.beta + exps @ a)[None, :]
        total += terms.sum(axis=1)
        mag = np.abs(terms).sum(axis=1)
        absum += mag
        shells.append(mag)
        degree = k
        if k >= 3:
            prev = np.maximum(np.maximum(shells[-2], shells[-3]), np.finfo(float).tiny)
            ratio = mag / prev
            tail = np.where(ratio < 1, mag * ratio / (1 - ratio), np.inf)
            scale = np.maximum(np.abs(total), np.finfo(float).tiny)
            if np.all(tail <= rtol * scale * 1e-2):
                break
    scale = np.maximum(np.abs(total), np.finfo(float).tiny)
    roundoff = 8 * _EPS * absum
    bound = tail + roundoff
    if np.any(bound > rtol * scale):
        worst = int(np.argmax(bound / scale))
        raise AccuracyError(
            "multivariate Mittag-Leffler series did not reach the requested accuracy",
            truncation=truncation, tail=float(tail[worst]), roundoff=float(roundoff[worst]),
            z=pts[worst].tolist(),
        )
    value = total.reshape(zz.shape[:-1])
    bound = bound.reshape(zz.shape[:-1])
    if zz.ndim == 1:
        value, bound = float(value), float(bound)
    if full_output:
        return value, bound, degree
    return value
