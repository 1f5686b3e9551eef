"""Kernelized block-coordinate Frank-Wolfe with explicit sparse dual variables.

The joint kernel of two labeled chains is

    k((x, y), (x', y')) = sum_{t, t'} kx(x_t, x'_t') [y_t == y'_t']
                          + <structure counts of y, structure counts of y'>

where the structure counts are the transition, start and stop indicators.
With ``kx`` the dot product this is exactly ``<phi(x, y), phi(x', y')>``.

Only the emission part goes through ``kx``.  The weight vector ``w = A alpha``
is represented by per-position label coefficients ``C`` (one row per
position of the training set) and the explicit structure part ``tau``;
emission scores of all training positions, ``M = Kx @ C``, are updated
incrementally after each block step.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np

from ..decoders import (
    NORMALIZED_HAMMING,
    ChainScores,
    LossSpec,
    SequenceDataset,
    decode_chain_scores,
    joint_feature_map,
    loss,
)
from ..fw_core import BlockProblem, Corner, SolverConfig, bcfw_solve, clipped_quadratic_step
from .objectives import check_lambda, mean_in_order


def labeling_key(y) -> str:
    """Canonical key ``"T:y_0,...,y_{T-1}"`` of a labeling."""
    y = [int(v) for v in y]
    return f"{len(y)}:" + ",".join(map(str, y))


def parse_labeling_key(key: str) -> np.ndarray:
    length, _, body = key.partition(":")
    y = np.array([int(v) for v in body.split(",")] if body else [], dtype=np.intp)
    if len(y) != int(length):
        raise ValueError(f"malformed labeling key {key!r}")
    return y


@dataclass(frozen=True)
class KernelSpec:
    """Kernel on input feature vectors of single positions.

    ``kind`` is ``"linear"``, ``"rbf"`` (``exp(-gamma ||a - b||^2)``) or
    ``"custom"`` with ``function(A, B) -> Gram matrix``.
    """

    kind: str = "linear"
    gamma: float = 1.0
    function: Optional[Callable] = field(default=None, compare=False)

    def __post_init__(self):
        if self.kind not in ("linear", "rbf", "custom"):
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        if self.kind == "custom" and self.function is None:
            raise ValueError("a custom kernel needs a function")
        if self.kind == "rbf" and not self.gamma > 0:
            raise ValueError("rbf gamma must be positive")

    @classmethod
    def linear(cls) -> "KernelSpec":
        return cls("linear")

    @classmethod
    def rbf(cls, gamma: float) -> "KernelSpec":
        return cls("rbf", gamma=gamma)

    def gram(self, A, B) -> np.ndarray:
        A = np.atleast_2d(np.asarray(A, dtype=float))
        B = np.atleast_2d(np.asarray(B, dtype=float))
        if self.kind == "linear":
            K = A @ B.T
        elif self.kind == "rbf":
            sq = (A * A).sum(1)[:, None] + (B * B).sum(1)[None, :] - 2.0 * A @ B.T
            K = np.exp(-self.gamma * np.maximum(sq, 0.0))
        else:
            K = np.asarray(self.function(A, B), dtype=float)
        if not np.all(np.isfinite(K)):
            raise FloatingPointError("non-finite kernel value")
        return K

    def joint(self, model, x, y, x2, y2) -> float:
        """Joint kernel of two labeled chains."""
        y = np.asarray(y)
        y2 = np.asarray(y2)
        K = self.gram(x, x2)
        emit = float((K * (y[:, None] == y2[None, :])).sum())
        s1 = _structure(model, x, y)
        s2 = _structure(model, x2, y2)
        return emit + float(np.dot(s1, s2))


def _structure(model, x, y) -> np.ndarray:
    return joint_feature_map(model, x, y)[model.transition_offset :]


@dataclass
class DualSparseState:
    """Sparse dual variables and the implicit weight representation.

    ``alpha[i]`` maps labeling keys to positive weights summing to one.
    ``coef`` (``(N_pos, q)``) and ``tau`` (``(q^2 + 2q,)``) represent
    ``w = A alpha``; ``rows[i]`` are the rows of example ``i``.
    """

    alpha: List[Dict[str, float]]
    coef: np.ndarray
    tau: np.ndarray
    ell: float
    rows: List[np.ndarray]
    scores: np.ndarray = field(repr=False, default=None)
    tau_blocks: np.ndarray = field(repr=False, default=None)
    ell_blocks: np.ndarray = field(repr=False, default=None)
    k: int = 0

    @property
    def n_support(self) -> int:
        return sum(len(a) for a in self.alpha)

    def simplex_violation(self) -> float:
        worst = 0.0
        for a in self.alpha:
            vals = np.array(list(a.values()))
            worst = max(worst, abs(vals.sum() - 1.0), float(max(0.0, -vals.min())))
        return worst

    def primal_weights(self, model, positions: np.ndarray) -> np.ndarray:
        """Explicit ``w`` for the linear kernel; ``positions`` stacks the
        training inputs in the same row order as ``coef``."""
        emit = self.coef.T @ positions
        return np.concatenate([emit.ravel(), self.tau])


class _KernelOracle:
    def __init__(self, dataset, lam, kernel, score_decoder, spec):
        self.dataset = dataset
        self.model = dataset.model
        self.lam = check_lambda(lam)
        self.n = len(dataset)
        self.kernel = kernel
        self.decode = score_decoder
        self.spec = spec
        lengths = [len(ex) for ex in dataset]
        starts = np.concatenate([[0], np.cumsum(lengths)])
        self.rows = [np.arange(starts[i], starts[i + 1]) for i in range(self.n)]
        self.X = np.vstack([ex.x for ex in dataset])
        self.Kx = kernel.gram(self.X, self.X)
        self.Kii = [self.Kx[np.ix_(r, r)] for r in self.rows]
        self.gold_struct = [_structure(self.model, ex.x, ex.y) for ex in dataset]
        q = self.model.n_labels
        self.q = q
        self.split = (q * q, q * q + q)

    def initial(self) -> DualSparseState:
        q = self.q
        n_struct = q * q + 2 * q
        return DualSparseState(
            alpha=[{labeling_key(ex.y): 1.0} for ex in self.dataset],
            coef=np.zeros((len(self.X), q)),
            tau=np.zeros(n_struct),
            ell=0.0,
            rows=self.rows,
            scores=np.zeros((len(self.X), q)),
            tau_blocks=np.zeros((self.n, n_struct)),
            ell_blocks=np.zeros(self.n),
        )

    def chain_scores(self, x: DualSparseState, i: int) -> ChainScores:
        q = self.q
        trans = x.tau[: q * q].reshape(q, q)
        start = x.tau[self.split[0] : self.split[1]]
        stop = x.tau[self.split[1] :]
        return ChainScores(x.scores[self.rows[i]], trans, start, stop)

    def objective(self, x: DualSparseState) -> float:
        sq = float(np.sum(x.coef * x.scores)) + float(np.dot(x.tau, x.tau))
        return 0.5 * self.lam * sq - x.ell

    def lmo(self, x, grad, i, k) -> Corner:
        ex = self.dataset[i]
        y, h = self.decode(self.chain_scores(x, i), ex.y, self.spec)
        scale = self.lam * self.n
        onehot = np.zeros((len(ex), self.q))
        onehot[np.arange(len(ex)), ex.y] += 1.0
        onehot[np.arange(len(ex)), y] -= 1.0
        E = onehot / scale
        tau_s = (self.gold_struct[i] - _structure(self.model, ex.x, y)) / scale
        ell_s = loss(self.spec, ex.y, y) / self.n
        return Corner(i, np.asarray(y), {"E": E, "tau_s": tau_s, "ell_s": ell_s, "H": float(h)})

    def _terms(self, x, i, s):
        r = self.rows[i]
        D = x.coef[r] - s.data["E"]
        Dt = x.tau_blocks[i] - s.data["tau_s"]
        num = self.lam * (float(np.sum(D * x.scores[r])) + float(np.dot(Dt, x.tau)))
        num += -float(x.ell_blocks[i]) + s.data["ell_s"]
        return D, Dt, num

    def block_gap(self, x, grad, i, s) -> float:
        return self._terms(x, i, s)[2]

    def line_search(self, x, i, s) -> float:
        D, Dt, num = self._terms(x, i, s)
        den = self.lam * (float(np.sum(D * (self.Kii[i] @ D))) + float(np.dot(Dt, Dt)))
        return clipped_quadratic_step(num, den)

    def apply_step(self, x, i, s, gamma):
        r = self.rows[i]
        D = x.coef[r] - s.data["E"]
        Dt = x.tau_blocks[i] - s.data["tau_s"]
        x.coef[r] = x.coef[r] - gamma * D
        x.scores -= self.Kx[:, r] @ (gamma * D)
        x.tau = x.tau - gamma * Dt
        x.tau_blocks[i] = x.tau_blocks[i] - gamma * Dt
        old_l = float(x.ell_blocks[i])
        new_l = (1.0 - gamma) * old_l + gamma * s.data["ell_s"]
        x.ell += new_l - old_l
        x.ell_blocks[i] = new_l
        _mix(x.alpha[i], labeling_key(s.point), gamma)
        x.k += 1
        return x


def _mix(alpha: Dict[str, float], key: str, gamma: float) -> None:
    """``alpha <- (1 - gamma) alpha + gamma e_key``, dropping zero weights."""
    if gamma == 0.0:
        return
    for k in list(alpha):
        v = (1.0 - gamma) * alpha[k]
        if v > 0.0:
            alpha[k] = v
        else:
            del alpha[k]
    alpha[key] = alpha.get(key, 0.0) + gamma


def kernelized_bcfw_train(
    dataset: SequenceDataset,
    lam: float,
    config: Optional[SolverConfig] = None,
    kernel: KernelSpec = KernelSpec.linear(),
    score_decoder=decode_chain_scores,
    spec: LossSpec = NORMALIZED_HAMMING,
    callback=None,
    step_callback=None,
):
    """Block-coordinate Frank-Wolfe on the dual with an implicit feature map.

    ``score_decoder(scores, y_true, spec) -> (y, H)`` decodes from chain
    potentials computed through the kernel expansion.  Blocks are sampled
    exactly as in :func:`bcfw_train` for the same seed.  Averaging is not
    supported.  Returns ``(DualSparseState, ConvergenceTrace)``.
    """
    config = config or SolverConfig()
    if config.averaging != "none":
        raise ValueError("averaging is not supported by the kernelized solver")
    if config.nu < 1.0 or config.delta > 0.0:
        raise ValueError("approximate oracles are not supported by the kernelized solver")
    oracle = _KernelOracle(dataset, lam, kernel, score_decoder, spec)
    problem = BlockProblem(
        n_blocks=oracle.n,
        initial_iterate=oracle.initial,
        objective_value=oracle.objective,
        block_gradient=lambda x, i: None,
        block_lmo=oracle.lmo,
        block_gap=oracle.block_gap,
        apply_step=oracle.apply_step,
        exact_line_search=oracle.line_search,
    )

    def monitor(x, cert, counter, avg):
        # ||w||^2 from the expansion; H values come with the gap sweep.
        sq = float(np.sum(x.coef * x.scores)) + float(np.dot(x.tau, x.tau))
        return {"primal": 0.5 * oracle.lam * sq + mean_in_order([s.data["H"] for s in cert.corners])}

    x, _, trace = bcfw_solve(problem, config, None, monitor, callback, step_callback)
    return x, trace


def kernel_chain_scores(state: DualSparseState, kernel: KernelSpec, train: SequenceDataset, example) -> ChainScores:
    """Chain potentials of a new input under the kernel expansion."""
    X = np.vstack([ex.x for ex in train])
    q = train.model.n_labels
    emission = kernel.gram(example.x, X) @ state.coef
    return ChainScores(
        emission,
        state.tau[: q * q].reshape(q, q),
        state.tau[q * q : q * q + q],
        state.tau[q * q + q :],
    )
