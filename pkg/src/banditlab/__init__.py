"""Adaptively weighted M-estimation for data collected by bandit algorithms."""

__version__ = "0.1.0"

from .env import EnvConfig, get_family
from .estimators import (
    AdaptiveGLM,
    AdaptiveLeastSquares,
    SelfNormalizedRidge,
    WDecorrelatedLeastSquares,
)
from .evalpolicy import EvalPolicy
from .harness import ExperimentSpec, McSummary, PolicySpec, run_experiment, summarize
from .policies import make_policy
from .regions import Ellipsoid, NormBall

__all__ = [
    "__version__",
    "EnvConfig",
    "get_family",
    "AdaptiveLeastSquares",
    "AdaptiveGLM",
    "WDecorrelatedLeastSquares",
    "SelfNormalizedRidge",
    "EvalPolicy",
    "ExperimentSpec",
    "PolicySpec",
    "McSummary",
    "run_experiment",
    "summarize",
    "make_policy",
    "Ellipsoid",
    "NormBall",
]
