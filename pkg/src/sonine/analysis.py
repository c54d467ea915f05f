"""Norms, decay envelopes and exponent fits.

Every envelope is expressed through ``L(t) = (1*l)(t)`` rather than ``t``,
so the same harness serves all kernel families.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import minimize_scalar

from .errors import AccuracyError, DataError, DomainError, ValidationError
from .kernels import SoninePair
from .spectral import FieldState, GroupMetadata, OperatorSymbol

_SUP_GRID = 10_000
_SUP_DECADES = 8.0
_SUP_RTOL = 1e-6
_MIN_FIT_SAMPLES = 8


def lp_norm(state: FieldState, p: float) -> float:
    """Rectangle-rule ``L^p`` norm; ``p = inf`` gives the max modulus."""
    p = float(p)
    if math.isnan(p) or p < 1:
        raise ValidationError(f"p must be >= 1 or inf, got {p}")
    mod = np.abs(state.values)
    if math.isinf(p):
        return float(mod.max())
    # scale by the peak first so high powers do not underflow
    peak = float(mod.max())
    if peak == 0.0:
        return 0.0
    return peak * float(np.sum((mod / peak) ** p) * state.grid.cell_volume) ** (1.0 / p)


def sobolev_norm(state: FieldState, s: float, symbol: OperatorSymbol) -> float:
    """Homogeneous Sobolev norm of order ``s``; the zero mode is dropped."""
    sigma = state.grid.symbol_values(symbol)
    coef = state.coefficients()
    nonzero = sigma > 0
    weight = sigma[nonzero] ** (2.0 * float(s) / symbol.nu)
    total = np.sum(weight * np.abs(coef[nonzero]) ** 2) * state.grid.volume
    return float(math.sqrt(total))


# ----------------------------------------------------------------- sup bound


def _sup_objective(x, rho):
    return x**rho / (1.0 + x)


def sup_bound_at(lam: float, r: float, big_l: float) -> tuple[float, float]:
    """``sup_v v**(lam/r) / (1 + v big_l)`` and the maximizing ``v``.

    For ``r == lam`` the supremum ``1/big_l`` is approached as ``v -> inf``,
    reported as maximizer ``inf``.
    """
    lam, r, big_l = float(lam), float(r), float(big_l)
    if not (lam > 0 and r > 0):
        raise ValidationError(f"lambda and r must be positive, got {lam}, {r}")
    if not big_l > 0 or math.isinf(big_l):
        raise ValidationError(f"L(t) must be positive and finite, got {big_l}")
    if r < lam:
        raise DomainError(f"need r >= lambda (nu/Q >= 1/p - 1/q), got r={r} < lambda={lam}")
    if r == lam:
        return 1.0 / big_l, math.inf
    v_star = lam / ((r - lam) * big_l)
    return v_star ** (lam / r) / (1.0 + v_star * big_l), v_star


def numeric_sup(lam: float, r: float, big_l: float) -> tuple[float, float]:
    """Supremum over a log grid in ``v``, polished by a bounded scalar search.

    The grid covers ``v big_l`` in ``[1e-8, 1e8]`` and never uses the
    closed-form maximizer.
    """
    rho = float(lam) / float(r)
    log_x = np.linspace(-_SUP_DECADES, _SUP_DECADES, _SUP_GRID) * math.log(10.0)
    vals = _sup_objective(np.exp(log_x), rho)
    i = int(np.argmax(vals))
    if i in (0, _SUP_GRID - 1):
        # monotone on the grid, as for rho = 1
        return float(vals[i]) * big_l**-rho, math.exp(log_x[i]) / big_l
    lo, hi = log_x[i - 1], log_x[i + 1]
    res = minimize_scalar(lambda u: -_sup_objective(math.exp(u), rho), bounds=(lo, hi),
                          method="bounded", options={"xatol": 1e-12})
    best, arg = max((float(vals[i]), log_x[i]), (-float(res.fun), float(res.x)))
    return best * big_l**-rho, math.exp(arg) / big_l


def decay_sup_bound(lam: float, r: float, pair: SoninePair, t: float) -> tuple[float, float]:
    """Closed-form ``(value, maximizer)`` at ``L(t)``, cross-checked numerically."""
    if not t > 0:
        raise ValidationError(f"t must be positive, got {t}")
    big_l = float(pair.L(float(t)))
    value, v_star = sup_bound_at(lam, r, big_l)
    if r > lam:
        check, _ = numeric_sup(lam, r, big_l)
        if abs(check - value) > _SUP_RTOL * value:
            raise AccuracyError("closed-form supremum disagrees with numeric search",
                                closed_form=value, numeric=check, L=big_l)
    return value, v_star


# ---------------------------------------------------------------- prediction


@dataclass(frozen=True)
class DecayPrediction:
    """Envelope ``L(t)**exponent``; ``t_power`` is set when it reduces to a pure power of ``t``."""

    exponent: float
    pair: SoninePair = field(repr=False, compare=False)
    t_power: float | None = None
    p: float | None = None
    q: float | None = None
    Q: float | None = None
    nu: float | None = None

    def __call__(self, t):
        return np.asarray(self.pair.L(t), dtype=float) ** self.exponent

    def to_dict(self) -> dict:
        return {"exponent": self.exponent, "t_power": self.t_power, "p": self.p, "q": self.q,
                "Q": self.Q, "nu": self.nu, "pair": self.pair.describe()}


def predict_decay_rate(p: float, q: float, Q, nu: float, pair: SoninePair) -> DecayPrediction:
    """Predicted ``L^p -> L^q`` envelope; ``Q`` may be a number or :class:`GroupMetadata`."""
    if isinstance(Q, GroupMetadata):
        if not Q.admits(nu):
            raise DomainError(f"{Q.name} admits only even homogeneous orders, got nu={nu}")
        Q = Q.Q
    p, q, Q, nu = float(p), float(q), float(Q), float(nu)
    if not Q > 0 or not nu > 0:
        raise ValidationError(f"Q and nu must be positive, got Q={Q}, nu={nu}")
    if not 1.0 < p:
        raise DomainError(f"need 1 < p, got p={p}")
    if not p <= 2.0:
        raise DomainError(f"need p <= 2, got p={p}")
    if not 2.0 <= q:
        raise DomainError(f"need 2 <= q, got q={q}")
    if not q < math.inf:
        raise DomainError("need q < inf")
    gap = 1.0 / p - 1.0 / q
    if nu / Q < gap - 1e-15:
        raise DomainError(f"need nu/Q >= 1/p - 1/q, got {nu / Q} < {gap}")
    exponent = -(Q / nu) * gap
    t_power = None
    if pair.family == "fractional":
        t_power = pair.params["alpha"] * exponent
    return DecayPrediction(exponent + 0.0, pair, None if t_power is None else t_power + 0.0, p, q, Q, nu)


# ---------------------------------------------------------------------- fits


@dataclass(frozen=True, eq=False)
class DecayReport:
    """Fitted against predicted slope of ``log norm`` versus ``log L(t)``."""

    predicted_exponent: float | None
    fitted_exponent: float
    prefactor: float
    residual: float
    window: tuple[float, float]
    norm: dict
    tolerance: float | None
    verdict: str | None
    times: np.ndarray = field(repr=False)
    cumulative: np.ndarray = field(repr=False)
    norms: np.ndarray = field(repr=False)

    @property
    def passed(self) -> bool:
        return self.verdict == "pass"

    def envelope(self) -> np.ndarray:
        """Predicted envelope, or the fitted power law when no prediction was given."""
        if self.predicted_exponent is None:
            return self.prefactor * self.cumulative**self.fitted_exponent
        return self.cumulative**self.predicted_exponent

    def to_dict(self) -> dict:
        return {
            "predicted_exponent": self.predicted_exponent,
            "fitted_exponent": self.fitted_exponent,
            "prefactor": self.prefactor,
            "residual": self.residual,
            "window": list(self.window),
            "norm": self.norm,
            "tolerance": self.tolerance,
            "verdict": self.verdict,
            "samples": int(self.times.size),
        }

    def to_json(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path

    def to_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t", "L", "norm", "envelope"])
            for row in zip(self.times, self.cumulative, self.norms, self.envelope()):
                writer.writerow([format(float(x), ".15g") for x in row])
        return path


def fit_decay_exponent(times, norms, pair: SoninePair, window, *, predicted=None,
                       rel_tol: float | None = None, abs_tol: float = 0.0, norm: dict | None = None) -> DecayReport:
    """Least-squares slope of ``log norms`` against ``log L(times)`` inside ``window``.

    ``predicted`` is an exponent or a :class:`DecayPrediction`; the verdict
    passes when the slopes differ by at most ``max(abs_tol, rel_tol*|predicted|)``;
    ``rel_tol`` defaults to 0.15 unless ``abs_tol`` is given.
    """
    if rel_tol is None:
        rel_tol = 0.15 if abs_tol == 0 else 0.0
    t = np.asarray(times, dtype=float).ravel()
    y = np.asarray(norms, dtype=float).ravel()
    if t.shape != y.shape:
        raise ValidationError(f"times and norms differ in length ({t.size} vs {y.size})")
    lo, hi = (float(w) for w in window)
    if not 0 < lo < hi:
        raise ValidationError(f"window must satisfy 0 < start < end, got ({lo}, {hi})")
    inside = (t >= lo) & (t <= hi)
    if np.count_nonzero(inside) < _MIN_FIT_SAMPLES:
        raise DataError(f"need at least {_MIN_FIT_SAMPLES} samples in the window, got {np.count_nonzero(inside)}")
    t, y = t[inside], y[inside]
    if np.any(~np.isfinite(y)) or np.any(y <= 0):
        raise DataError("norms must be positive and finite inside the window")
    big_l = np.asarray(pair.L(t), dtype=float)
    x, z = np.log(big_l), np.log(y)
    slope, intercept = np.polyfit(x, z, 1)
    resid = float(np.sqrt(np.mean((z - (slope * x + intercept)) ** 2)))
    if isinstance(predicted, DecayPrediction):
        norm = norm or {"p": predicted.p, "q": predicted.q}
        predicted = predicted.exponent
    tolerance = verdict = None
    if predicted is not None:
        predicted = float(predicted)
        tolerance = max(float(abs_tol), float(rel_tol) * abs(predicted))
        verdict = "pass" if abs(slope - predicted) <= tolerance else "fail"
    return DecayReport(predicted, float(slope), float(math.exp(intercept)), resid, (lo, hi),
                       dict(norm or {}), tolerance, verdict, t, big_l, y)
