from .linop import LinOp, adjoint_error, check_adjoint, estimate_operator_norm
from .prox import ProxFn, project_linf_ball, prox_l1, prox_l2_squared_dual, prox_translated_linf_indicator
from .solvers import DualBlock, NumericalFailure, PdhgParams, pdhg, spdhg

__all__ = [
    "DualBlock",
    "LinOp",
    "NumericalFailure",
    "PdhgParams",
    "ProxFn",
    "adjoint_error",
    "check_adjoint",
    "estimate_operator_norm",
    "pdhg",
    "project_linf_ball",
    "prox_l1",
    "prox_l2_squared_dual",
    "prox_translated_linf_indicator",
    "spdhg",
]
