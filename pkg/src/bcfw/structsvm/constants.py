"""Problem constants governing the convergence rates: feature radius,
maximal loss, curvature bounds and the initial gap."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..decoders import (
    BRUTE_FORCE_CAP,
    NORMALIZED_HAMMING,
    LossSpec,
    SequenceDataset,
    all_labelings,
    joint_feature_map,
    joint_feature_matrix,
)
from .objectives import check_lambda


@dataclass(frozen=True)
class ProblemConstants:
    R: float
    L_max: float
    n: int
    d: int
    lam: float
    Cf_bound: float
    Cprod_bound: float
    h0: float
    R_exact: bool

    @classmethod
    def from_radius(cls, R: float, lam: float, n: int, d: int = 0, L_max: float = 1.0,
                    h0: float = 1.0, R_exact: bool = False) -> "ProblemConstants":
        """``Cf <= 4 R^2 / lam`` and ``Cprod = Cf / n``."""
        lam = check_lambda(lam)
        if n < 1:
            raise ValueError("n must be positive")
        cf = 4.0 * R * R / lam
        return cls(R=float(R), L_max=float(L_max), n=n, d=d, lam=lam, Cf_bound=cf,
                   Cprod_bound=cf / n, h0=float(h0), R_exact=R_exact)

    @property
    def block_curvature_bound(self) -> float:
        """Per-block bound ``4 R^2 / (lam n^2)``."""
        return self.Cprod_bound / self.n

    @property
    def loss_dominated(self) -> bool:
        """True when ``L_max <= 4 R^2 / (lam n)``."""
        return self.L_max <= self.Cprod_bound


def _psi_norm_bound(example) -> float:
    # Each position contributes a difference of two one-hot emission blocks,
    # each transition and the start/stop a difference of two indicators.
    T = len(example)
    return math.sqrt(2.0) * (float(np.linalg.norm(example.x, axis=1).sum()) + T + 1)


def _psi_norm_exact(model, example, cap) -> float:
    Y = all_labelings(model.n_labels, len(example), cap)
    gold = joint_feature_map(model, example.x, example.y)
    diffs = gold[None, :] - joint_feature_matrix(model, example.x, Y)
    return float(np.sqrt(np.max(np.einsum("ij,ij->i", diffs, diffs))))


def curvature_bounds(
    dataset: SequenceDataset,
    lam: float,
    spec: LossSpec = NORMALIZED_HAMMING,
    exact_cap: int = BRUTE_FORCE_CAP,
) -> ProblemConstants:
    """Radius ``R >= max_{i,y} ||psi_i(y)||`` and the derived curvature bounds.

    ``R`` is exact when every example has at most ``exact_cap`` labelings,
    otherwise it is the per-position overapproximation
    ``sqrt(2) (sum_t ||x_t|| + T + 1)`` maximized over examples.  ``h0`` is
    the gap at the start, the mean over examples of the largest loss.
    """
    lam = check_lambda(lam)
    model = dataset.model
    n = len(dataset)
    if n < 1:
        raise ValueError("empty dataset")
    q = model.n_labels
    exact = all(q ** len(ex) <= exact_cap for ex in dataset)
    if exact:
        R = max(_psi_norm_exact(model, ex, exact_cap) for ex in dataset)
    else:
        R = max(_psi_norm_bound(ex) for ex in dataset)
    losses = [spec.max_loss(len(ex), q) for ex in dataset]
    h0 = 0.0
    for v in losses:
        h0 += v
    return ProblemConstants.from_radius(R, lam, n, model.dim, max(losses), h0 / n, exact)
