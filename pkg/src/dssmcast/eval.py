"""Alias of :mod:`dssmcast.evaluation` (kept so ``dssmcast.eval`` also resolves)."""

from .evaluation import *  # noqa: F401,F403
from .evaluation import (  # noqa: F401
    ArOnlyModel,
    EvalResult,
    MetricError,
    ar_only_baseline,
    corr,
    evaluate,
    evaluate_arrays,
    mae,
    persistence_baseline,
    rmse,
)
