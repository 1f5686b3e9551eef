"""Batch and block-coordinate primal-dual Frank-Wolfe for structural SVMs."""

from __future__ import annotations

from typing import Callable, Optional

import numpy as np

from ..decoders import (
    NORMALIZED_HAMMING,
    LossSpec,
    SequenceDataset,
    chain_scores,
    enumerate_scores,
    loss,
    path_score,
    test_error,
)
from ..fw_core import (
    BlockProblem,
    Corner,
    SolverConfig,
    bcfw_solve,
    clipped_quadratic_step,
    fw_solve,
    wrap_oracle_approximate,
)
from .objectives import (
    DEFAULT_DECODER,
    PrimalState,
    check_lambda,
    corner_from_decodes,
    dual_objective,
    mean_in_order,
    psi,
)

REPORTS = ("iterate", "weighted", "suffix")


def structure_counts(y, q: int) -> np.ndarray:
    """Transition counts followed by start and stop indicators of ``y``."""
    y = np.asarray(y, dtype=np.intp)
    idx = np.concatenate([y[:-1] * q + y[1:], [q * q + y[0], q * q + q + y[-1]]])
    return np.bincount(idx, minlength=q * q + 2 * q).astype(float)


class ChainOracle:
    """Loss-augmented decoding for one dataset, packaged as block corners.

    A corner of block ``i`` is the vertex ``e_y`` of the simplex over
    labelings of example ``i``; its data holds ``w_s = psi_i(y) / (lam n)``
    restricted to the block support, ``ell_s = Delta_i(y) / n``, the labeling
    and its H value.
    """

    def __init__(self, dataset: SequenceDataset, lam: float, decoder=DEFAULT_DECODER,
                 spec: LossSpec = NORMALIZED_HAMMING, supports=None):
        self.dataset = dataset
        self.model = dataset.model
        self.lam = check_lambda(lam)
        self.decoder = decoder
        self.spec = spec
        self.n = len(dataset)
        self.supports = supports if supports is not None else PrimalState.zeros(dataset).supports
        # Per-example pieces of psi_i restricted to the support: the inputs of
        # the active features, the gold one-hot labels and structure counts.
        q = self.model.n_labels
        self._active_x = []
        self._gold_onehot = []
        self._gold_struct = []
        for ex in dataset:
            active = np.flatnonzero(np.any(ex.x != 0, axis=0))
            self._active_x.append(np.ascontiguousarray(ex.x[:, active]))
            onehot = np.zeros((len(ex), q))
            onehot[np.arange(len(ex)), ex.y] = 1.0
            self._gold_onehot.append(onehot)
            self._gold_struct.append(structure_counts(ex.y, q))

    def corner(self, i: int, y, h: float) -> Corner:
        ex = self.dataset[i]
        y = np.asarray(y, dtype=np.intp)
        q = self.model.n_labels
        diff = self._gold_onehot[i].copy()
        diff[np.arange(len(y)), y] -= 1.0
        scale = 1.0 / (self.lam * self.n)
        w_s = np.concatenate([(diff.T @ self._active_x[i]).ravel(),
                              self._gold_struct[i] - structure_counts(y, q)]) * scale
        ell_s = loss(self.spec, ex.y, y) / self.n
        return Corner(i, y, {"w_s": w_s, "ell_s": ell_s, "H": float(h)})

    def lmo(self, decoder=None) -> Callable:
        decoder = decoder or self.decoder

        def block_lmo(x, grad, i, k):
            y, h = decoder(self.model, x.w, self.dataset[i], self.spec)
            return self.corner(i, y, h)

        return block_lmo

    def block_value(self, x, i) -> float:
        """``<alpha_i, grad_i f> = lam w_i^T w - ell_i``."""
        return self.lam * float(np.dot(x.w_blocks[i], x.w[self.supports[i]])) - float(x.ell_blocks[i])

    def enumerate_block(self, x, grad, i):
        ex = self.dataset[i]
        scores = chain_scores(self.model, x.w, ex)
        Y, aug = enumerate_scores(scores, ex.y, self.spec)
        h = aug - path_score(scores.unary(), scores.transition, ex.y)
        values = -h / self.n
        return values, self.block_value(x, i), lambda j: self.corner(i, Y[j].copy(), h[j])

    def block_gap(self, x, grad, i, s) -> float:
        w_sup = x.w[self.supports[i]]
        diff = x.w_blocks[i] - s.data["w_s"]
        return self.lam * float(np.dot(diff, w_sup)) - float(x.ell_blocks[i]) + s.data["ell_s"]

    def line_search(self, x, i, s) -> float:
        w_sup = x.w[self.supports[i]]
        diff = x.w_blocks[i] - s.data["w_s"]
        num = self.lam * float(np.dot(diff, w_sup)) - float(x.ell_blocks[i]) + s.data["ell_s"]
        den = self.lam * float(np.dot(diff, diff))
        return clipped_quadratic_step(num, den)

    def apply_step(self, x, i, s, gamma):
        sup = self.supports[i]
        old = x.w_blocks[i]
        new = (1.0 - gamma) * old + gamma * s.data["w_s"]
        x.w[sup] += new - old
        x.w_blocks[i] = new
        old_l = float(x.ell_blocks[i])
        new_l = (1.0 - gamma) * old_l + gamma * s.data["ell_s"]
        x.ell += new_l - old_l
        x.ell_blocks[i] = new_l
        x.k += 1
        return x

    def decode_all(self, w, counter=None):
        out = [self.decoder(self.model, w, ex, self.spec) for ex in self.dataset]
        if counter is not None:
            counter.add(self.n)
        return out


def _errors(dataset, w, spec, test, enabled=True):
    if not enabled:
        return {}
    rec = {"train_error": test_error(dataset.model, w, dataset, spec)}
    if test is not None and len(test):
        rec["test_error"] = test_error(dataset.model, w, test, spec)
    return rec


def _certificate_from_decodes(oracle, w, ell, decodes):
    """Primal value and gap of the pair ``(w, ell)`` from one decode per example."""
    lam = oracle.lam
    primal = 0.5 * lam * float(np.dot(w, w)) + mean_in_order([h for _, h in decodes])
    w_s, ell_s = corner_from_decodes(oracle.dataset, decodes, lam, oracle.spec)
    gap = lam * float(np.dot(w, w - w_s)) - ell + ell_s
    return primal, gap


def bcfw_problem(oracle: ChainOracle) -> BlockProblem:
    return BlockProblem(
        n_blocks=oracle.n,
        initial_iterate=lambda: PrimalState.zeros(oracle.dataset),
        objective_value=lambda x: dual_objective(x.w, x.ell, oracle.lam),
        block_gradient=lambda x, i: None,
        block_lmo=oracle.lmo(),
        block_gap=oracle.block_gap,
        apply_step=oracle.apply_step,
        exact_line_search=oracle.line_search,
        average_view=lambda x: np.append(x.w, x.ell),
    )


def _block_curvature_bound(dataset, lam, spec):
    from .constants import curvature_bounds

    c = curvature_bounds(dataset, lam, spec)
    return c.Cprod_bound / len(dataset)


def bcfw_train(
    dataset: SequenceDataset,
    lam: float,
    config: Optional[SolverConfig] = None,
    decoder=DEFAULT_DECODER,
    spec: LossSpec = NORMALIZED_HAMMING,
    step_decoder=None,
    test: Optional[SequenceDataset] = None,
    report: str = "iterate",
    callback=None,
    step_callback=None,
    track_errors: bool = True,
):
    """Block-coordinate Frank-Wolfe on the structural SVM dual.

    ``decoder`` must be exact; it certifies the gap at every checkpoint.
    Steps use ``step_decoder`` if given (e.g. a beam), and are further
    degraded to the accuracy ``config.oracle_accuracy`` by worst-case
    selection over all labelings when ``nu < 1`` or ``delta > 0``.

    ``report`` chooses what the trace's primal, dual and gap columns
    describe: the iterate, or its weighted / suffix average (one extra
    decoding pass per checkpoint, counted).  Stopping always uses the gap of
    the iterate.  ``track_errors`` adds train (and test, if given) errors of
    the reported weights to every record; those predictions are not counted
    as oracle calls.

    Returns ``(PrimalState, AveragingState or None, ConvergenceTrace)``.
    """
    config = config or SolverConfig()
    if report not in REPORTS:
        raise ValueError(f"report must be one of {REPORTS}")
    if report != "iterate" and config.averaging == "none":
        raise ValueError("reporting an average needs config.averaging != 'none'")
    oracle = ChainOracle(dataset, lam, decoder, spec)
    problem = bcfw_problem(oracle)

    step_oracle = None
    if step_decoder is not None:
        step_oracle = oracle.lmo(step_decoder)
    if config.nu < 1.0 or config.delta > 0.0:
        curv = _block_curvature_bound(dataset, lam, spec) if config.delta > 0 else 0.0
        step_oracle = wrap_oracle_approximate(
            step_oracle or problem.block_lmo, config.nu, config.delta, curv, oracle.enumerate_block, oracle.n
        )

    def monitor(x, cert, counter, avg):
        if report == "iterate" or avg is None:
            w = x.w
            h = mean_in_order([s.data["H"] for s in cert.corners])
            out = {"primal": 0.5 * oracle.lam * float(np.dot(w, w)) + h}
        else:
            v = avg.weighted if report == "weighted" else avg.suffix
            w, ell = v[:-1], float(v[-1])
            primal, gap = _certificate_from_decodes(oracle, w, ell, oracle.decode_all(w, counter))
            out = {"primal": primal, "gap": gap, "dual": dual_objective(w, ell, oracle.lam)}
        out.update(_errors(dataset, w, spec, test, track_errors))
        return out

    x, avg, trace = bcfw_solve(problem, config, step_oracle, monitor, callback, step_callback)
    if avg is not None:
        x.w_avg = avg.weighted[:-1].copy()
        x.ell_avg = float(avg.weighted[-1])
    return x, avg, trace


def batch_fw_train(
    dataset: SequenceDataset,
    lam: float,
    config: Optional[SolverConfig] = None,
    decoder=DEFAULT_DECODER,
    spec: LossSpec = NORMALIZED_HAMMING,
    test: Optional[SequenceDataset] = None,
    callback=None,
    track_errors: bool = True,
):
    """Batch primal-dual Frank-Wolfe: every iteration decodes all examples.

    The whole product of simplices is one block, so one oracle call of the
    generic solver is one effective pass.  Returns ``(PrimalState, trace)``.
    """
    config = config or SolverConfig()
    oracle = ChainOracle(dataset, lam, decoder, spec)
    n = oracle.n

    def lmo(x, grad, _i, k):
        decodes = [decoder(oracle.model, x.w, ex, spec) for ex in dataset]
        corners = [oracle.corner(i, y, h) for i, (y, h) in enumerate(decodes)]
        w_s, ell_s = corner_from_decodes(dataset, decodes, oracle.lam, spec)
        return Corner(0, [c.point for c in corners], {"w_s": w_s, "ell_s": ell_s, "blocks": corners,
                                                     "H": [h for _, h in decodes]})

    def gap(x, grad, _i, s):
        return oracle.lam * float(np.dot(x.w, x.w - s.data["w_s"])) - x.ell + s.data["ell_s"]

    def line_search(x, _i, s):
        diff = x.w - s.data["w_s"]
        return clipped_quadratic_step(gap(x, None, 0, s), oracle.lam * float(np.dot(diff, diff)))

    def apply_step(x, _i, s, gamma):
        x.w = (1.0 - gamma) * x.w + gamma * s.data["w_s"]
        x.ell = (1.0 - gamma) * x.ell + gamma * s.data["ell_s"]
        for i, c in enumerate(s.data["blocks"]):
            x.w_blocks[i] = (1.0 - gamma) * x.w_blocks[i] + gamma * c.data["w_s"]
            x.ell_blocks[i] = (1.0 - gamma) * x.ell_blocks[i] + gamma * c.data["ell_s"]
        x.k += 1
        return x

    def monitor(x, cert, counter, avg):
        s = cert.corners[0]
        out = {"primal": 0.5 * oracle.lam * float(np.dot(x.w, x.w)) + mean_in_order(s.data["H"])}
        out.update(_errors(dataset, x.w, spec, test, track_errors))
        return out

    problem = BlockProblem(
        n_blocks=1,
        initial_iterate=lambda: PrimalState.zeros(dataset),
        objective_value=lambda x: dual_objective(x.w, x.ell, oracle.lam),
        block_gradient=lambda x, i: None,
        block_lmo=lmo,
        block_gap=gap,
        apply_step=apply_step,
        exact_line_search=line_search,
    )
    if n < 1:
        raise ValueError("empty dataset")
    return fw_solve(problem, config, monitor, callback)
