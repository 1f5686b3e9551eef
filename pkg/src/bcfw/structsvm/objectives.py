"""Structural SVM objectives written in terms of the primal pair
``w = A alpha`` and ``ell = b^T alpha``.

Columns of ``A`` are ``psi_i(y) / (lam n)`` and entries of ``b`` are
``Delta_i(y) / n``, so that the dual is ``f = lam/2 ||w||^2 - ell``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np

from ..decoders import (
    NORMALIZED_HAMMING,
    LossSpec,
    SequenceDataset,
    joint_feature_map,
    loss,
    viterbi_loss_augmented_decode,
)
from ..fw_core import OracleCounter, clipped_quadratic_step

Decoder = Callable  # (model, w, example, spec) -> (y, H)
DEFAULT_DECODER = viterbi_loss_augmented_decode


def check_lambda(lam: float) -> float:
    lam = float(lam)
    if not (lam > 0 and math.isfinite(lam)):
        raise ValueError(f"regularization lambda must be a positive finite number, got {lam}")
    return lam


def psi(model, example, y) -> np.ndarray:
    """``phi(x_i, y_i) - phi(x_i, y)``."""
    y = np.asarray(y, dtype=np.intp)
    gold = example.y
    T = len(gold)
    q = model.n_labels
    if y.shape != (T,):
        raise ValueError(f"labeling of length {len(y)} for a sequence of length {T}")
    if y.min() < 0 or y.max() >= q:
        raise ValueError("label out of range")
    ar = np.arange(T)
    diff = np.zeros((T, q))
    diff[ar, gold] += 1.0
    diff[ar, y] -= 1.0
    out = np.empty(model.dim)
    out[: model.transition_offset] = (diff.T @ example.x).ravel()
    out[model.transition_offset : model.start_offset] = np.bincount(
        gold[:-1] * q + gold[1:], minlength=q * q
    ) - np.bincount(y[:-1] * q + y[1:], minlength=q * q)
    tail = np.zeros(2 * q)
    tail[gold[0]] += 1.0
    tail[y[0]] -= 1.0
    tail[q + gold[-1]] += 1.0
    tail[q + y[-1]] -= 1.0
    out[model.start_offset :] = tail
    return out


def example_support(model, example) -> np.ndarray:
    """Coordinates where ``psi_i(y)`` can be nonzero for some ``y``: emission
    weights of the features active in the example plus all structure
    weights."""
    active = np.flatnonzero(np.any(example.x != 0, axis=0))
    q, p = model.n_labels, model.n_features
    emit = (np.arange(q)[:, None] * p + active[None, :]).ravel()
    return np.concatenate([np.sort(emit), np.arange(model.transition_offset, model.dim)]).astype(np.intp)


@dataclass
class PrimalState:
    """Iterate of the primal-dual solvers.

    ``w_blocks[i]`` holds ``A_i alpha_i`` restricted to ``supports[i]``; ``w``
    and ``ell`` are maintained incrementally as the block sums.
    """

    w: np.ndarray
    ell: float
    w_blocks: List[np.ndarray]
    ell_blocks: np.ndarray
    supports: List[np.ndarray]
    k: int = 0
    w_avg: Optional[np.ndarray] = None
    ell_avg: Optional[float] = None

    @classmethod
    def zeros(cls, dataset: SequenceDataset) -> "PrimalState":
        supports = [example_support(dataset.model, ex) for ex in dataset]
        return cls(
            w=np.zeros(dataset.model.dim),
            ell=0.0,
            w_blocks=[np.zeros(len(s)) for s in supports],
            ell_blocks=np.zeros(len(dataset)),
            supports=supports,
        )

    @property
    def n_blocks(self) -> int:
        return len(self.supports)

    def block_dense(self, i: int) -> np.ndarray:
        out = np.zeros_like(self.w)
        out[self.supports[i]] = self.w_blocks[i]
        return out

    def block_sums(self):
        """``(sum_i w_i, sum_i ell_i)`` recomputed from the block copies."""
        total = np.zeros_like(self.w)
        for sup, wi in zip(self.supports, self.w_blocks):
            total[sup] += wi
        ell = 0.0
        for li in self.ell_blocks:
            ell += float(li)
        return total, ell

    def drift(self):
        """Sup-norm and absolute drift of ``(w, ell)`` from the block sums."""
        total, ell = self.block_sums()
        return float(np.max(np.abs(self.w - total), initial=0.0)), abs(self.ell - ell)

    def check_invariants(self, tol: float = 1e-9) -> None:
        dw, dl = self.drift()
        if dw > tol * (1 + np.max(np.abs(self.w), initial=0.0)) or dl > tol * (1 + abs(self.ell)):
            raise AssertionError(f"block bookkeeping drifted: |dw|={dw:.3g}, |dl|={dl:.3g}")

    def copy(self) -> "PrimalState":
        return PrimalState(
            w=self.w.copy(),
            ell=self.ell,
            w_blocks=[b.copy() for b in self.w_blocks],
            ell_blocks=self.ell_blocks.copy(),
            supports=self.supports,
            k=self.k,
            w_avg=None if self.w_avg is None else self.w_avg.copy(),
            ell_avg=self.ell_avg,
        )


def dual_objective(w, ell: float, lam: float) -> float:
    """``lam/2 ||w||^2 - ell``."""
    w = np.asarray(w, dtype=float)
    return 0.5 * lam * float(np.dot(w, w)) - float(ell)


def _decode_all(dataset, w, decoder, spec, counter, executor=None):
    model = dataset.model
    if executor is None:
        out = [decoder(model, w, ex, spec) for ex in dataset]
    else:
        out = list(executor.map(lambda ex: decoder(model, w, ex, spec), dataset.examples))
    if counter is not None:
        counter.add(len(dataset))
    return out


def mean_in_order(values) -> float:
    total = 0.0
    for v in values:
        total += float(v)
    return total / len(values)


def primal_objective(
    w,
    dataset: SequenceDataset,
    lam: float,
    decoder: Decoder = DEFAULT_DECODER,
    spec: LossSpec = NORMALIZED_HAMMING,
    counter: Optional[OracleCounter] = None,
    executor=None,
) -> float:
    """``lam/2 ||w||^2 + (1/n) sum_i max_y H_i(y; w)``; costs ``n`` decodes."""
    lam = check_lambda(lam)
    w = np.asarray(w, dtype=float)
    decodes = _decode_all(dataset, w, decoder, spec, counter, executor)
    return 0.5 * lam * float(np.dot(w, w)) + mean_in_order([h for _, h in decodes])


def corner_from_decodes(dataset, decodes, lam, spec):
    """``(w_s, ell_s)`` of the corner given by one labeling per example."""
    n = len(dataset)
    w_s = np.zeros(dataset.model.dim)
    ell_s = 0.0
    for ex, (y, _) in zip(dataset, decodes):
        w_s += psi(dataset.model, ex, y)
        ell_s += loss(spec, ex.y, y)
    return w_s / (lam * n), ell_s / n


def svm_duality_gap(
    state,
    dataset: SequenceDataset,
    lam: float,
    decoder: Decoder = DEFAULT_DECODER,
    spec: LossSpec = NORMALIZED_HAMMING,
    counter: Optional[OracleCounter] = None,
    executor=None,
):
    """Duality gap of the pair ``(state.w, state.ell)``.

    Returns ``(gap, w_s, ell_s)`` with ``gap = lam w^T (w - w_s) - ell + ell_s``.
    """
    lam = check_lambda(lam)
    w = np.asarray(state.w, dtype=float)
    decodes = _decode_all(dataset, w, decoder, spec, counter, executor)
    w_s, ell_s = corner_from_decodes(dataset, decodes, lam, spec)
    gap = lam * float(np.dot(w, w - w_s)) - float(state.ell) + ell_s
    return gap, w_s, ell_s


def block_line_search(w, w_i, ell_i, w_s, ell_s, lam: float) -> float:
    """Optimal step towards the block corner ``(w_s, ell_s)``, clipped to [0, 1]."""
    diff = np.asarray(w_i, dtype=float) - np.asarray(w_s, dtype=float)
    num = lam * float(np.dot(diff, w)) - ell_i + ell_s
    den = lam * float(np.dot(diff, diff))
    return clipped_quadratic_step(num, den)
