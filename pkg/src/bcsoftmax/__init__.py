"""Exact box-constrained softmax and a post-hoc calibration toolkit."""

from .core import (
    EPS_EQ,
    EPS_FEAS,
    EPS_OBJ,
    EPS_SIMPLEX,
    ActiveSet,
    bcsoftmax,
    bcsoftmax_quadratic,
    lbsoftmax,
    objective_value,
    scalar_bounds_to_clip,
    softmax,
    ubsoftmax_select,
    ubsoftmax_sorted,
)

__version__ = "0.1.0"

__all__ = [
    "ActiveSet",
    "softmax",
    "ubsoftmax_sorted",
    "ubsoftmax_select",
    "lbsoftmax",
    "bcsoftmax",
    "bcsoftmax_quadratic",
    "scalar_bounds_to_clip",
    "objective_value",
    "EPS_SIMPLEX",
    "EPS_FEAS",
    "EPS_EQ",
    "EPS_OBJ",
    "__version__",
]
