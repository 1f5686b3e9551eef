"""Block-coordinate Frank-Wolfe optimization and structural SVMs for
linear-chain sequence labeling."""

from .fw_core import (
    BlockProblem,
    Corner,
    GapCertificate,
    SolverConfig,
    bcfw_solve,
    duality_gap,
    fw_solve,
)
from .trace import ConvergenceTrace, TraceRecord

__version__ = "0.1.0"

__all__ = [
    "BlockProblem",
    "ConvergenceTrace",
    "Corner",
    "GapCertificate",
    "SolverConfig",
    "TraceRecord",
    "bcfw_solve",
    "duality_gap",
    "fw_solve",
]
