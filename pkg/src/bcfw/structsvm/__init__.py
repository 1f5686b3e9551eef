"""Structural SVM training with Frank-Wolfe solvers and subgradient baselines."""

from .baselines import SSGState, batch_subgradient_train, ssg_step_size, ssg_train
from .constants import ProblemConstants, curvature_bounds
from .kernel import (
    DualSparseState,
    KernelSpec,
    kernel_chain_scores,
    kernelized_bcfw_train,
    labeling_key,
    parse_labeling_key,
)
from .objectives import (
    DEFAULT_DECODER,
    PrimalState,
    block_line_search,
    check_lambda,
    dual_objective,
    example_support,
    primal_objective,
    psi,
    svm_duality_gap,
)
from .primal import ChainOracle, batch_fw_train, bcfw_problem, bcfw_train

__all__ = [
    "ChainOracle",
    "DEFAULT_DECODER",
    "DualSparseState",
    "KernelSpec",
    "PrimalState",
    "ProblemConstants",
    "SSGState",
    "batch_fw_train",
    "batch_subgradient_train",
    "bcfw_problem",
    "bcfw_train",
    "block_line_search",
    "check_lambda",
    "curvature_bounds",
    "dual_objective",
    "example_support",
    "kernel_chain_scores",
    "kernelized_bcfw_train",
    "labeling_key",
    "parse_labeling_key",
    "primal_objective",
    "psi",
    "ssg_step_size",
    "ssg_train",
    "svm_duality_gap",
]
