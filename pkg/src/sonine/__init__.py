"""Integro-differential diffusion with general Sonine kernels."""

from .analysis import (
    DecayPrediction,
    DecayReport,
    decay_sup_bound,
    fit_decay_exponent,
    lp_norm,
    predict_decay_rate,
    sobolev_norm,
)
from .errors import (
    AccuracyError,
    DataError,
    DomainError,
    IntegrityError,
    SonineError,
    SpecialFunctionOverflow,
    ValidationError,
)
from .kernels import SoninePair, cumulative_l, make_pair, verify_sonine
from .specfun import MLOrder, MVMLOrder, exp_integral_e1, gamma_fn, mittag_leffler, mv_mittag_leffler
from .spectral import (
    FieldState,
    GroupMetadata,
    OperatorSymbol,
    PeriodicGrid,
    evolve_homogeneous,
    evolve_inhomogeneous,
    fit_counting_exponent,
    make_symbol,
    spectral_counting,
)
from .volterra import (
    RelaxationSolution,
    TimeGrid,
    invert_sonine,
    resolvent_identity_defect,
    solve_relaxation,
    solve_resolvent,
)

__all__ = [
    "AccuracyError", "DataError", "DecayPrediction", "DecayReport", "DomainError", "FieldState",
    "GroupMetadata", "IntegrityError", "MLOrder", "MVMLOrder", "OperatorSymbol", "PeriodicGrid",
    "RelaxationSolution", "SonineError", "SoninePair", "SpecialFunctionOverflow", "TimeGrid",
    "ValidationError", "cumulative_l", "decay_sup_bound", "evolve_homogeneous", "evolve_inhomogeneous",
    "exp_integral_e1", "fit_counting_exponent", "fit_decay_exponent", "gamma_fn", "invert_sonine",
    "lp_norm", "make_pair", "make_symbol", "mittag_leffler", "mv_mittag_leffler", "predict_decay_rate",
    "resolvent_identity_defect", "sobolev_norm", "solve_relaxation", "solve_resolvent",
    "spectral_counting", "verify_sonine",
]
