"""Linear-chain sequence labeling: feature map, Hamming losses and the
loss-augmented decoders used as maximization oracles.

Weight layout for ``q`` labels and ``p`` input features (``d = pq + q^2 +
2q``): emission weight of feature ``f`` for label ``a`` at ``a*p + f``,
transition ``(a, b)`` at ``pq + a*q + b``, then ``q`` start and ``q`` stop
weights.

All decoders break ties the same way: at every backpointer the smaller
label wins, which makes the chosen labeling the maximizer that comes first
when labelings are enumerated with the *last* position varying slowest (see
:func:`all_labelings`).
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property, lru_cache
from itertools import product
from typing import Optional, Sequence, Tuple

import numpy as np

BRUTE_FORCE_CAP = 4096


@dataclass(frozen=True)
class ChainModel:
    n_labels: int
    n_features: int

    def __post_init__(self):
        if self.n_labels < 1 or self.n_features < 1:
            raise ValueError("a chain model needs at least one label and one feature")

    @cached_property
    def transition_offset(self) -> int:
        return self.n_labels * self.n_features

    @cached_property
    def start_offset(self) -> int:
        return self.transition_offset + self.n_labels**2

    @cached_property
    def stop_offset(self) -> int:
        return self.start_offset + self.n_labels

    @cached_property
    def dim(self) -> int:
        return self.stop_offset + self.n_labels

    def emission_index(self, feature: int, label: int) -> int:
        return label * self.n_features + feature

    def transition_index(self, a: int, b: int) -> int:
        return self.transition_offset + a * self.n_labels + b

    def split(self, w: np.ndarray):
        """Views ``(emission (q, p), transition (q, q), start (q,), stop (q,))``."""
        w = np.asarray(w, dtype=float)
        if w.shape != (self.dim,):
            raise ValueError(f"weight vector has shape {w.shape}, expected ({self.dim},)")
        q, p = self.n_labels, self.n_features
        return (
            w[: self.transition_offset].reshape(q, p),
            w[self.transition_offset : self.start_offset].reshape(q, q),
            w[self.start_offset : self.stop_offset],
            w[self.stop_offset :],
        )


@dataclass(frozen=True, eq=False)
class SequenceExample:
    """``x`` is a dense ``(T, p)`` array of input features, ``y`` the gold labels."""

    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        y = np.asarray(self.y, dtype=np.intp)
        if x.ndim != 2 or y.ndim != 1 or len(x) != len(y):
            raise ValueError("x must be (T, p) and y of length T")
        if len(y) < 1:
            raise ValueError("a sequence needs at least one position")
        if not np.all(np.isfinite(x)):
            raise ValueError("non-finite input features")
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    def __len__(self) -> int:
        return len(self.y)

    def validate(self, model: ChainModel) -> None:
        if self.x.shape[1] != model.n_features:
            raise ValueError(f"example has {self.x.shape[1]} features, model has {model.n_features}")
        if self.y.min() < 0 or self.y.max() >= model.n_labels:
            raise ValueError("label out of range")


@dataclass(frozen=True, eq=False)
class SequenceDataset:
    model: ChainModel
    examples: Tuple[SequenceExample, ...]

    def __post_init__(self):
        object.__setattr__(self, "examples", tuple(self.examples))
        for ex in self.examples:
            ex.validate(self.model)

    def __len__(self) -> int:
        return len(self.examples)

    def __iter__(self):
        return iter(self.examples)

    def __getitem__(self, i):
        return self.examples[i]


@dataclass(frozen=True)
class LossSpec:
    kind: str = "normalized_hamming"

    def __post_init__(self):
        if self.kind not in ("normalized_hamming", "hamming"):
            raise ValueError(f"unknown loss kind {self.kind!r}")

    def position_bonus(self, length: int) -> float:
        """Loss incurred by one wrong position."""
        return 1.0 / length if self.kind == "normalized_hamming" else 1.0

    def max_loss(self, length: int, n_labels: int) -> float:
        if n_labels < 2:
            return 0.0
        return 1.0 if self.kind == "normalized_hamming" else float(length)


NORMALIZED_HAMMING = LossSpec("normalized_hamming")
HAMMING = LossSpec("hamming")


def loss(spec: LossSpec, y_true, y) -> float:
    y_true = np.asarray(y_true)
    y = np.asarray(y)
    if y_true.shape != y.shape:
        raise ValueError(f"length mismatch: {y_true.shape} vs {y.shape}")
    wrong = int(np.count_nonzero(y_true != y))
    return wrong / len(y) if spec.kind == "normalized_hamming" else float(wrong)


def joint_feature_map(model: ChainModel, x, y) -> np.ndarray:
    """Dense ``phi(x, y)``: emission sums, transition counts, start/stop."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=np.intp)
    if x.ndim != 2 or x.shape != (len(y), model.n_features):
        raise ValueError(f"input of shape {x.shape} does not match {len(y)} x {model.n_features}")
    if len(y) and (y.min() < 0 or y.max() >= model.n_labels):
        raise ValueError("label out of range")
    phi = np.zeros(model.dim)
    emit, trans, start, stop = _split_mutable(model, phi)
    np.add.at(emit, y, x)
    np.add.at(trans, (y[:-1], y[1:]), 1.0)
    start[y[0]] += 1.0
    stop[y[-1]] += 1.0
    return phi


def joint_feature_matrix(model: ChainModel, x, Y) -> np.ndarray:
    """Rows ``phi(x, Y[j])`` for a batch of labelings ``Y`` of shape ``(N, T)``."""
    x = np.asarray(x, dtype=float)
    Y = np.asarray(Y, dtype=np.intp)
    N, T = Y.shape
    q = model.n_labels
    onehot = np.zeros((N, T, q))
    np.put_along_axis(onehot, Y[:, :, None], 1.0, axis=2)
    out = np.zeros((N, model.dim))
    out[:, : model.transition_offset] = np.einsum("ntq,tp->nqp", onehot, x).reshape(N, -1)
    rows = np.repeat(np.arange(N), T - 1)
    cols = model.transition_offset + (Y[:, :-1] * q + Y[:, 1:]).ravel()
    np.add.at(out, (rows, cols), 1.0)
    out[np.arange(N), model.start_offset + Y[:, 0]] += 1.0
    out[np.arange(N), model.stop_offset + Y[:, -1]] += 1.0
    return out


def _split_mutable(model, phi):
    q, p = model.n_labels, model.n_features
    return (
        phi[: model.transition_offset].reshape(q, p),
        phi[model.transition_offset : model.start_offset].reshape(q, q),
        phi[model.start_offset : model.stop_offset],
        phi[model.stop_offset :],
    )


# -- scores ----------------------------------------------------------------------


@dataclass
class ChainScores:
    """Potentials of a chain: ``emission`` is ``(T, q)``."""

    emission: np.ndarray
    transition: np.ndarray
    start: np.ndarray
    stop: np.ndarray

    def unary(self, y_true=None, spec: Optional[LossSpec] = None) -> np.ndarray:
        """Per-position scores with start/stop folded in and, if ``spec`` is
        given, the loss of a wrong label added as a per-position bonus."""
        u = np.array(self.emission, dtype=float, copy=True)
        u[0] = u[0] + self.start
        u[-1] = u[-1] + self.stop
        if spec is not None:
            wrong = np.arange(u.shape[1])[None, :] != np.asarray(y_true)[:, None]
            u = u + spec.position_bonus(len(u)) * wrong
        return u


def chain_scores(model: ChainModel, w, example: SequenceExample) -> ChainScores:
    emit, trans, start, stop = model.split(w)
    if not np.isfinite(w).all():
        raise FloatingPointError("non-finite weights")
    return ChainScores(example.x @ emit.T, trans, start, stop)


def path_score(unary: np.ndarray, transition: np.ndarray, y) -> float:
    """Score of one labeling, accumulated in position order exactly as the
    dynamic programs do."""
    s = unary[0, y[0]]
    for t in range(1, len(y)):
        s = s + transition[y[t - 1], y[t]]
        s = s + unary[t, y[t]]
    return float(s)


def _viterbi(unary: np.ndarray, transition: np.ndarray, width: Optional[int] = None):
    T, q = unary.shape
    delta = unary[0].copy()
    if width is not None:
        delta = _prune(delta, width)
    back = np.zeros((T, q), dtype=np.intp)
    cols = np.arange(q)
    for t in range(1, T):
        cand = delta[:, None] + transition
        bt = cand.argmax(axis=0)
        back[t] = bt
        delta = cand[bt, cols] + unary[t]
        if width is not None:
            delta = _prune(delta, width)
    y = np.empty(T, dtype=np.intp)
    y[-1] = int(delta.argmax())
    for t in range(T - 1, 0, -1):
        y[t - 1] = back[t, y[t]]
    return y, float(delta[y[-1]])


def _prune(delta: np.ndarray, width: int) -> np.ndarray:
    if width >= len(delta):
        return delta
    order = np.lexsort((np.arange(len(delta)), -delta))
    out = np.full_like(delta, -np.inf)
    keep = order[:width]
    out[keep] = delta[keep]
    return out


def _check_finite(scores: ChainScores):
    total = scores.emission.sum() + scores.transition.sum() + scores.start.sum() + scores.stop.sum()
    if not np.isfinite(total):
        raise FloatingPointError("non-finite chain scores")


def decode_chain_scores(
    scores: ChainScores, y_true, spec: LossSpec, width: Optional[int] = None
) -> Tuple[np.ndarray, float]:
    """Loss-augmented decoding from precomputed potentials.

    Returns ``(y*, H)`` with ``H = Delta(y*) - <w, psi(y*)>``.  ``width``
    switches to a beam that keeps the best ``width`` end labels per position.
    """
    _check_finite(scores)
    y_true = np.asarray(y_true)
    u_aug = scores.unary(y_true, spec)
    gold = path_score(scores.unary(), scores.transition, y_true)
    y, best = _viterbi(u_aug, scores.transition, width)
    return y, best - gold


def viterbi_loss_augmented_decode(model, w, example, spec: LossSpec = NORMALIZED_HAMMING):
    """Exact ``argmax_y Delta(y_i, y) - <w, psi_i(y)>`` in ``O(T q^2)``."""
    return decode_chain_scores(chain_scores(model, w, example), example.y, spec)


def beam_decode(model, w, example, spec: LossSpec = NORMALIZED_HAMMING, width: int = 1):
    """Beam search over positions with recombination on the last label.

    The returned value never exceeds the exact maximum; with ``width >= q``
    no hypothesis is ever pruned and the result equals Viterbi.  A wider
    beam is not guaranteed to score higher on every input.
    """
    if width < 1:
        raise ValueError("beam width must be at least 1")
    return decode_chain_scores(chain_scores(model, w, example), example.y, spec, width)


def predict(model, w, example) -> np.ndarray:
    """``argmax_y <w, phi(x, y)>``."""
    scores = chain_scores(model, w, example)
    _check_finite(scores)
    return _viterbi(scores.unary(), scores.transition)[0]


def test_error(model, w, dataset: Sequence[SequenceExample], spec: LossSpec = NORMALIZED_HAMMING) -> float:
    """Mean loss of the predictions of ``w`` over ``dataset``."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    return float(np.mean([loss(spec, ex.y, predict(model, w, ex)) for ex in dataset]))


test_error.__test__ = False  # not a pytest test


# -- enumeration -----------------------------------------------------------------


@lru_cache(maxsize=64)
def _labelings(q: int, T: int) -> np.ndarray:
    grid = np.array(list(product(range(q), repeat=T)), dtype=np.intp)[:, ::-1]
    grid = np.ascontiguousarray(grid)
    grid.setflags(write=False)
    return grid


def all_labelings(q: int, T: int, cap: int = BRUTE_FORCE_CAP) -> np.ndarray:
    """Every labeling as rows of a ``(q^T, T)`` array, position 0 varying
    fastest.  Refuses more than ``cap`` rows."""
    if q**T > cap:
        raise ValueError(f"{q}^{T} labelings exceed the enumeration cap {cap}")
    return _labelings(q, T)


def enumerate_scores(scores: ChainScores, y_true, spec: Optional[LossSpec], cap: int = BRUTE_FORCE_CAP):
    """``(Y, values)`` where ``values[j]`` is the (loss-augmented if ``spec``)
    path score of labeling ``Y[j]``, accumulated like the DP."""
    u = scores.unary(y_true, spec) if spec is not None else scores.unary()
    T, q = u.shape
    Y = all_labelings(q, T, cap)
    # Axis order (y_t, y_{t-1}, ..., y_0), so C-order flattening lets y_0
    # vary fastest, matching the rows of Y.
    s = u[0]
    step = scores.transition.T  # step[b, a] = transition[a, b]
    for t in range(1, T):
        shape = (q, q) + (1,) * (t - 1)
        s = s[None, ...] + step.reshape(shape)
        s = s + u[t].reshape((q,) + (1,) * t)
    return Y, np.ascontiguousarray(s).reshape(-1)


def enumerate_losses(Y: np.ndarray, y_true, spec: LossSpec) -> np.ndarray:
    wrong = np.count_nonzero(Y != np.asarray(y_true)[None, :], axis=1)
    return wrong / Y.shape[1] if spec.kind == "normalized_hamming" else wrong.astype(float)


def brute_force_decode(
    model,
    w,
    example,
    spec: LossSpec = NORMALIZED_HAMMING,
    cap: int = BRUTE_FORCE_CAP,
    rescaling: str = "margin",
):
    """Exhaustive loss-augmented decoding (test oracle).

    ``rescaling="slack"`` maximizes ``Delta(y) (1 - <w, psi(y)>)`` instead of
    the margin-rescaled ``Delta(y) - <w, psi(y)>``.
    """
    scores = chain_scores(model, w, example)
    _check_finite(scores)
    gold = path_score(scores.unary(), scores.transition, example.y)
    if rescaling == "margin":
        Y, values = enumerate_scores(scores, example.y, spec, cap)
        H = values - gold
    elif rescaling == "slack":
        Y, plain = enumerate_scores(scores, example.y, None, cap)
        H = enumerate_losses(Y, example.y, spec) * (1.0 - (gold - plain))
    else:
        raise ValueError(f"unknown rescaling {rescaling!r}")
    j = int(np.argmax(H))
    return Y[j].copy(), float(H[j])
