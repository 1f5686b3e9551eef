"""Subgradient baselines: stochastic subgradient (Pegasos step sizes) and
batch subgradient descent on the primal."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from ..decoders import NORMALIZED_HAMMING, LossSpec, SequenceDataset
from ..fw_core import OracleCounter, SolverConfig, update_weighted_average, AveragingState
from ..trace import ConvergenceTrace, TraceRecord
from .objectives import DEFAULT_DECODER, check_lambda, corner_from_decodes, primal_objective, psi
from .primal import _errors


def ssg_step_size(k: int, lam: float) -> float:
    """``1 / (lam (k + 1))``."""
    return 1.0 / (lam * (k + 1))


@dataclass
class SSGState:
    w: np.ndarray
    w_avg: np.ndarray
    k: int = 0
    checkpoints: List[np.ndarray] = field(default_factory=list)


def ssg_train(
    dataset: SequenceDataset,
    lam: float,
    config: Optional[SolverConfig] = None,
    decoder=DEFAULT_DECODER,
    spec: LossSpec = NORMALIZED_HAMMING,
    test: Optional[SequenceDataset] = None,
    report: str = "iterate",
    track_errors: bool = True,
):
    """Stochastic subgradient descent with one uniformly drawn example per step.

    ``w <- w - gamma_k (lam w - psi_i(y*))`` with ``gamma_k = 1/(lam (k+1))``;
    the weighted average is maintained alongside.  There is no certificate,
    so the run lasts exactly ``config.max_iterations`` steps (a nonzero
    ``config.gap_tolerance`` is rejected).  The trace records the primal
    objective of the iterate (``report="iterate"``) or of the average
    (``"weighted"``) every ``config.gap_check_every`` passes; those
    evaluations are counted as oracle calls.

    Returns ``(SSGState, ConvergenceTrace)``; ``SSGState.checkpoints`` holds
    the reported weight vector of every trace record.
    """
    config = config or SolverConfig()
    lam = check_lambda(lam)
    if config.gap_tolerance > 0:
        raise ValueError("stochastic subgradient has no duality gap; stop by iteration budget")
    if report not in ("iterate", "weighted"):
        raise ValueError("report must be 'iterate' or 'weighted'")
    model = dataset.model
    n = len(dataset)
    rng = np.random.default_rng(config.seed)
    counter = OracleCounter(n)
    trace = ConvergenceTrace()
    t0 = time.perf_counter()

    w = np.zeros(model.dim)
    avg = AveragingState.start(w)
    state = SSGState(w=w, w_avg=avg.weighted)

    def record(k):
        v = state.w if report == "iterate" else state.w_avg
        rec = TraceRecord(effective_passes=0.0, k=k)
        rec.primal = primal_objective(v, dataset, lam, decoder, spec, counter)
        for key, value in _errors(dataset, v, spec, test, track_errors).items():
            setattr(rec, key, value)
        rec.effective_passes = counter.passes
        if config.record_time:
            rec.wall_seconds = time.perf_counter() - t0
        trace.append(rec)
        state.checkpoints.append(v.copy())

    next_check = 0
    for k in range(config.max_iterations + 1):
        if k == next_check or k == config.max_iterations:
            record(k)
            next_check = k + config.gap_check_every * n
            if k == config.max_iterations:
                break
        i = int(rng.integers(n))
        ex = dataset[i]
        y, _ = decoder(model, state.w, ex, spec)
        counter.add()
        gamma = ssg_step_size(k, lam)
        state.w = state.w - gamma * (lam * state.w - psi(model, ex, y))
        update_weighted_average(avg, state.w, k)
        state.w_avg = avg.weighted
        state.k = k + 1
    return state, trace


def batch_subgradient_train(
    dataset: SequenceDataset,
    lam: float,
    betas: Sequence[float],
    decoder=DEFAULT_DECODER,
    spec: LossSpec = NORMALIZED_HAMMING,
) -> List[np.ndarray]:
    """Batch subgradient descent ``w <- (1 - beta lam) w + beta lam w_s``.

    ``w_s`` is the scaled sum of ``psi_i(y_i*)`` over all examples at the
    current ``w``.  Returns the iterates ``[w^(0), ..., w^(K)]``.
    """
    lam = check_lambda(lam)
    w = np.zeros(dataset.model.dim)
    out = [w.copy()]
    for beta in betas:
        if not 0.0 <= beta <= 1.0 / lam * (1 + 1e-12):
            raise ValueError(f"step {beta} outside [0, 1/lambda]")
        decodes = [decoder(dataset.model, w, ex, spec) for ex in dataset]
        w_s, _ = corner_from_decodes(dataset, decodes, lam, spec)
        c = beta * lam
        w = (1.0 - c) * w + c * w_s
        out.append(w.copy())
    return out
