"""Stability workbench for nonlinear sampled-data systems with varying sampling periods."""

__version__ = "0.1.0"

from .comparison import ComparisonFn, ExprFn, ExprKL, KLFn, Kind, TableFn, comparison_fn, eval_k, invert_k  # noqa: E402
from .models import ClosedLoopModel, parse_model  # noqa: E402
from .trajectory import Ensemble, Trajectory, simulate, simulate_batch  # noqa: E402

__all__ = [
    "ClosedLoopModel", "ComparisonFn", "Ensemble", "ExprFn", "ExprKL", "KLFn", "Kind", "TableFn", "Trajectory",
    "comparison_fn", "eval_k", "invert_k", "parse_model", "simulate", "simulate_batch",
]
