"""Frank-Wolfe and block-coordinate Frank-Wolfe over products of compact
convex blocks.

A problem is described by a :class:`BlockProblem` made of callbacks; the
iterate is opaque to the solvers.  Linear minimization oracles are called as
``lmo(x, grad_i, i, k)`` where ``grad_i`` is whatever ``block_gradient``
returned for block ``i`` and ``k`` is the iteration index (needed by the
additive-accuracy wrapper).
"""

from __future__ import annotations

import math
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, List, Optional, Sequence, Tuple

import numpy as np

from .trace import ConvergenceTrace, TraceRecord

STEP_RULES = ("predefined", "line_search")
AVERAGING = ("none", "weighted", "suffix_half")


@dataclass
class Corner:
    """Extreme point of block ``block`` plus quantities the problem caches."""

    block: int
    point: Any
    data: dict = field(default_factory=dict)


@dataclass
class BlockProblem:
    """Callbacks describing ``min f(x)`` over ``M_1 x ... x M_n``.

    ``apply_step`` may update the iterate in place, but must return it.
    ``block_gap(x, grad_i, i, s)`` returns ``<x_(i) - s_(i), grad_i>``.
    ``average_view`` maps an iterate to the array that averaging schemes
    operate on (defaults to the iterate itself).
    """

    n_blocks: int
    initial_iterate: Callable[[], Any]
    objective_value: Callable[[Any], float]
    block_gradient: Callable[[Any, int], Any]
    block_lmo: Callable[[Any, Any, int, int], Corner]
    block_gap: Callable[[Any, Any, int, Corner], float]
    apply_step: Callable[[Any, int, Corner, float], Any]
    exact_line_search: Optional[Callable[[Any, int, Corner], float]] = None
    average_view: Optional[Callable[[Any], np.ndarray]] = None

    def __post_init__(self):
        if int(self.n_blocks) < 1:
            raise ValueError("n_blocks must be positive")


@dataclass
class SolverConfig:
    max_iterations: int = 1000
    gap_tolerance: float = 0.0
    step_rule: str = "line_search"
    averaging: str = "none"
    seed: int = 0
    gap_check_every: int = 10
    oracle_accuracy: Tuple[float, float] = (1.0, 0.0)
    threads: int = 1
    record_time: bool = True

    def __post_init__(self):
        if self.max_iterations < 0:
            raise ValueError("max_iterations must be nonnegative")
        if not self.gap_tolerance >= 0:
            raise ValueError("gap tolerance must be >= 0")
        if self.step_rule not in STEP_RULES:
            raise ValueError(f"step_rule must be one of {STEP_RULES}")
        if self.averaging not in AVERAGING:
            raise ValueError(f"averaging must be one of {AVERAGING}")
        if self.gap_check_every < 1:
            raise ValueError("gap_check_every must be positive")
        nu, delta = self.oracle_accuracy
        _check_nu(nu)
        if not delta >= 0:
            raise ValueError("delta must be >= 0")

    @property
    def nu(self) -> float:
        return float(self.oracle_accuracy[0])

    @property
    def delta(self) -> float:
        return float(self.oracle_accuracy[1])


@dataclass
class GapCertificate:
    total_gap: float
    block_gaps: np.ndarray
    k: int
    corners: Optional[List[Corner]] = field(default=None, repr=False, compare=False)


class OracleCounter:
    """Thread-safe count of linear-minimization (maximization) oracle calls."""

    def __init__(self, n_blocks: int = 1):
        self.n_blocks = n_blocks
        self.calls = 0
        self._lock = threading.Lock()

    def add(self, count: int = 1) -> None:
        with self._lock:
            self.calls += count

    @property
    def passes(self) -> float:
        return self.calls / self.n_blocks


def _check_nu(nu):
    if not 0.0 < nu <= 1.0:
        raise ValueError(f"multiplicative accuracy nu must lie in (0, 1], got {nu}")


def predefined_step_size(k: int, n: int = 1, nu: float = 1.0) -> float:
    """Default step ``2n / (nu k + 2n)``."""
    _check_nu(nu)
    if n < 1:
        raise ValueError("block count must be positive")
    if k < 0:
        raise ValueError("iteration index must be nonnegative")
    return 2.0 * n / (nu * k + 2.0 * n)


def clipped_quadratic_step(numerator: float, denominator: float) -> float:
    """Minimizer over [0, 1] of ``-numerator g + denominator g^2 / 2``.

    With a zero denominator the function is linear in the step: take the
    full step if it decreases, otherwise stay.
    """
    if denominator <= 0.0:
        return 1.0 if numerator > 0.0 else 0.0
    return min(1.0, max(0.0, numerator / denominator))


# -- averaging ---------------------------------------------------------------


@dataclass
class AveragingState:
    """Weighted average (weight t on iterate t) and doubling-trick suffix
    average; ``k`` counts the updates absorbed so far."""

    weighted: np.ndarray
    suffix_sum: np.ndarray
    suffix_count: int
    suffix_start: int
    k: int = 0

    @classmethod
    def start(cls, x0) -> "AveragingState":
        x0 = np.array(x0, dtype=float, copy=True)
        return cls(weighted=x0.copy(), suffix_sum=x0.copy(), suffix_count=1, suffix_start=0)

    @property
    def suffix(self) -> np.ndarray:
        return self.suffix_sum / self.suffix_count


def _is_power_of_two(t: int) -> bool:
    return t > 0 and t & (t - 1) == 0


def update_weighted_average(state: AveragingState, x_new, k: int) -> AveragingState:
    """Absorb ``x^(k+1)``: ``xbar <- k/(k+2) xbar + 2/(k+2) x^(k+1)``."""
    x_new = np.asarray(x_new, dtype=float)
    state.weighted = (k / (k + 2.0)) * state.weighted + (2.0 / (k + 2.0)) * x_new
    state.k = k + 1
    return state


def update_suffix_average(state: AveragingState, x_new, k: int) -> AveragingState:
    """Absorb ``x^(k+1)`` into the uniform average restarted whenever the
    iterate index ``k+1`` is a power of two."""
    t = k + 1
    x_new = np.asarray(x_new, dtype=float)
    if _is_power_of_two(t):
        state.suffix_sum = x_new.copy()
        state.suffix_count = 1
        state.suffix_start = t
    else:
        state.suffix_sum = state.suffix_sum + x_new
        state.suffix_count += 1
    state.k = t
    return state


# -- gap certificates ----------------------------------------------------------


def _block_answer(problem: BlockProblem, x, i: int, k: int):
    grad = problem.block_gradient(x, i)
    s = problem.block_lmo(x, grad, i, k)
    return s, float(problem.block_gap(x, grad, i, s))


def duality_gap(problem: BlockProblem, x, k: int = 0, executor=None) -> GapCertificate:
    """Full linearization gap ``sum_i <x_(i) - s_(i), grad_(i) f(x)>``.

    With an ``executor`` the blocks are answered concurrently; results are
    always reduced in block order.
    """
    blocks = range(problem.n_blocks)
    if executor is None:
        answers = [_block_answer(problem, x, i, k) for i in blocks]
    else:
        answers = list(executor.map(lambda i: _block_answer(problem, x, i, k), blocks))
    corners = [a[0] for a in answers]
    block_gaps = np.array([a[1] for a in answers], dtype=float)
    total = 0.0
    for g in block_gaps:
        total += g
    return GapCertificate(total_gap=total, block_gaps=block_gaps, k=k, corners=corners)


# -- solvers ---------------------------------------------------------------------


def _objective(problem, x) -> float:
    f = float(problem.objective_value(x))
    if not math.isfinite(f):
        raise FloatingPointError(f"non-finite objective value {f}")
    return f


def _step_size(problem, config, x, i, s, k, n):
    if config.step_rule == "line_search":
        if problem.exact_line_search is None:
            raise ValueError("line_search requested but the problem has no exact_line_search")
        return float(problem.exact_line_search(x, i, s))
    return predefined_step_size(k, n, config.nu)


class _Recorder:
    def __init__(self, problem, config, monitor, counter):
        self.problem = problem
        self.config = config
        self.monitor = monitor
        self.counter = counter
        self.trace = ConvergenceTrace()
        self.t0 = time.perf_counter()

    def record(self, x, cert: GapCertificate, avg=None) -> TraceRecord:
        rec = TraceRecord(
            effective_passes=0.0,
            k=cert.k,
            dual=_objective(self.problem, x),
            gap=cert.total_gap,
        )
        if self.monitor is not None:
            for key, value in (self.monitor(x, cert, self.counter, avg) or {}).items():
                setattr(rec, key, value)
        rec.effective_passes = self.counter.passes
        if self.config.record_time:
            rec.wall_seconds = time.perf_counter() - self.t0
        self.trace.append(rec)
        return rec


def fw_solve(
    problem: BlockProblem,
    config: SolverConfig,
    monitor: Optional[Callable] = None,
    callback: Optional[Callable] = None,
):
    """Frank-Wolfe on a single compact block.

    The gap of every iterate comes with its oracle answer, so it is recorded
    at each iteration; the run stops once it is at most
    ``config.gap_tolerance`` or after ``config.max_iterations`` steps.
    ``callback(k, x, cert)`` is invoked at each recorded iterate.

    Returns ``(x, trace)``.
    """
    if problem.n_blocks != 1:
        raise ValueError("fw_solve needs a single-block problem; use bcfw_solve")
    counter = OracleCounter(1)
    rec = _Recorder(problem, config, monitor, counter)
    x = problem.initial_iterate()
    for k in range(config.max_iterations + 1):
        grad = problem.block_gradient(x, 0)
        s = problem.block_lmo(x, grad, 0, k)
        counter.add()
        gap = float(problem.block_gap(x, grad, 0, s))
        cert = GapCertificate(gap, np.array([gap]), k, corners=[s])
        rec.record(x, cert)
        if callback is not None:
            callback(k, x, cert)
        if gap <= config.gap_tolerance or k == config.max_iterations:
            break
        gamma = _step_size(problem, config, x, 0, s, k, 1)
        x = problem.apply_step(x, 0, s, gamma)
    return x, rec.trace


def bcfw_solve(
    problem: BlockProblem,
    config: SolverConfig,
    step_oracle: Optional[Callable] = None,
    monitor: Optional[Callable] = None,
    callback: Optional[Callable] = None,
    step_callback: Optional[Callable] = None,
):
    """Randomized block-coordinate Frank-Wolfe.

    Blocks are drawn uniformly with replacement from a PRNG seeded with
    ``config.seed``.  Steps use ``step_oracle`` (default: the exact
    ``problem.block_lmo``); the full gap is always computed with the exact
    oracle, at ``k = 0``, every ``config.gap_check_every`` effective passes
    and at the last iterate.  Those oracle calls count towards the effective
    passes.  When the step oracle is exact, the step right after a gap check
    reuses the corner already computed for the sampled block.

    ``callback(k, x, cert)`` runs at gap checks, ``step_callback(k, x)``
    after every step.  ``monitor(x, cert, counter, avg)`` may return a dict
    of :class:`TraceRecord` fields to override; oracle calls it makes should
    be added to ``counter``.  Returns ``(x, averaging_state_or_None, trace)``.
    """
    n = problem.n_blocks
    exact = step_oracle is None
    step_oracle = step_oracle or problem.block_lmo
    view = problem.average_view or (lambda z: z)
    counter = OracleCounter(n)
    rec = _Recorder(problem, config, monitor, counter)
    rng = np.random.default_rng(config.seed)
    executor = ThreadPoolExecutor(config.threads) if config.threads > 1 else None

    x = problem.initial_iterate()
    avg = AveragingState.start(view(x)) if config.averaging != "none" else None
    next_check = 0
    cached = None
    try:
        for k in range(config.max_iterations + 1):
            if k == next_check or k == config.max_iterations:
                cert = duality_gap(problem, x, k, executor)
                counter.add(n)
                rec.record(x, cert, avg)
                if callback is not None:
                    callback(k, x, cert)
                if cert.total_gap <= config.gap_tolerance or k == config.max_iterations:
                    break
                next_check = k + config.gap_check_every * n
                cached = cert.corners if exact else None
            i = int(rng.integers(n))
            if cached is not None:
                s = cached[i]
            else:
                grad = problem.block_gradient(x, i)
                s = step_oracle(x, grad, i, k)
                counter.add()
            cached = None
            gamma = _step_size(problem, config, x, i, s, k, n)
            x = problem.apply_step(x, i, s, gamma)
            if avg is not None:
                v = view(x)
                update_weighted_average(avg, v, k)
                update_suffix_average(avg, v, k)
            if step_callback is not None:
                step_callback(k, x)
    finally:
        if executor is not None:
            executor.shutdown()
    return x, avg, rec.trace


# -- approximate oracles -------------------------------------------------------


def select_multiplicative(gaps: np.ndarray, nu: float) -> int:
    """Index of the smallest gap still ``>= nu * max(gaps)`` (first on ties)."""
    _check_nu(nu)
    gaps = np.asarray(gaps, dtype=float)
    best = gaps.max()
    if best <= 0.0:
        return int(np.argmax(gaps))
    ok = np.flatnonzero(gaps >= nu * best)
    if ok.size == 0:
        raise RuntimeError("no corner satisfies the multiplicative accuracy bound")
    return int(ok[np.argmin(gaps[ok])])


def select_additive(values: np.ndarray, tolerance: float) -> int:
    """Index of the largest linearization value ``<= min(values) + tolerance``."""
    values = np.asarray(values, dtype=float)
    ok = np.flatnonzero(values <= values.min() + tolerance)
    if ok.size == 0:
        raise RuntimeError("no corner satisfies the additive accuracy bound")
    return int(ok[np.argmax(values[ok])])


def _select_combined(gaps, nu, tolerance) -> int:
    best = gaps.max()
    ok = np.flatnonzero(gaps >= nu * max(best, 0.0) - tolerance)
    if ok.size == 0:
        raise RuntimeError("no corner satisfies the accuracy bound")
    return int(ok[np.argmin(gaps[ok])])


def _block_curvature(bounds, i):
    return float(bounds) if np.ndim(bounds) == 0 else float(bounds[i])


def wrap_oracle_multiplicative(lmo: Callable, nu: float, enumerate_block: Callable) -> Callable:
    """Worst-case oracle with multiplicative accuracy ``nu``.

    ``enumerate_block(x, grad_i, i)`` must return ``(values, x_value,
    make_corner)``: the linearization values ``<s, grad_i>`` of every corner
    of block ``i`` in enumeration order, the value ``<x_(i), grad_i>``, and
    a function building the Corner for a given enumeration index.  Among
    corners with block gap at least ``nu`` times the best one, the one with
    the smallest gap is returned.
    """
    _check_nu(nu)
    if nu == 1.0:
        return lmo

    def oracle(x, grad, i, k):
        values, x_value, make_corner = enumerate_block(x, grad, i)
        gaps = x_value - np.asarray(values, dtype=float)
        return make_corner(select_multiplicative(gaps, nu))

    return oracle


def additive_tolerance(delta, curvature, k, n, nu=1.0) -> float:
    """``delta * gamma_k * C_i / 2`` with the default step ``gamma_k``."""
    return 0.5 * delta * predefined_step_size(k, n, nu) * curvature


def wrap_oracle_additive(
    lmo: Callable,
    delta: float,
    block_curvatures,
    enumerate_block: Callable,
    n_blocks: int,
    nu: float = 1.0,
) -> Callable:
    """Worst-case oracle with additive error ``delta gamma_k C_i / 2``.

    ``gamma_k`` is the predefined step whatever step rule the solver uses.
    ``block_curvatures`` is a scalar or a per-block array of curvature
    bounds.  See :func:`wrap_oracle_multiplicative` for ``enumerate_block``.
    """
    if not delta >= 0:
        raise ValueError("delta must be >= 0")
    if delta == 0.0:
        return lmo

    def oracle(x, grad, i, k):
        values, _, make_corner = enumerate_block(x, grad, i)
        tol = additive_tolerance(delta, _block_curvature(block_curvatures, i), k, n_blocks, nu)
        return make_corner(select_additive(values, tol))

    return oracle


def wrap_oracle_approximate(
    lmo, nu, delta, block_curvatures, enumerate_block, n_blocks
) -> Callable:
    """Oracle satisfying both accuracy notions at once:
    ``gap(s) >= nu * max gap - delta gamma_k C_i / 2``."""
    _check_nu(nu)
    if delta == 0.0:
        return wrap_oracle_multiplicative(lmo, nu, enumerate_block)
    if nu == 1.0:
        return wrap_oracle_additive(lmo, delta, block_curvatures, enumerate_block, n_blocks)

    def oracle(x, grad, i, k):
        values, x_value, make_corner = enumerate_block(x, grad, i)
        gaps = x_value - np.asarray(values, dtype=float)
        tol = additive_tolerance(delta, _block_curvature(block_curvatures, i), k, n_blocks, nu)
        return make_corner(_select_combined(gaps, nu, tol))

    return oracle


# -- curvature -------------------------------------------------------------------


def estimate_curvature(
    problem: BlockProblem,
    i: int,
    num_samples: int,
    seed: int,
    sampler: Callable[[np.random.Generator], Tuple[Any, Corner]],
    min_step: float = 0.05,
) -> float:
    """Sampled lower bound on the curvature constant of block ``i``.

    ``sampler(rng)`` returns a fresh feasible iterate and a corner of block
    ``i``.  Steps are drawn uniformly from ``[min_step, 1]``; tiny steps only
    amplify rounding in the second-order remainder.
    """
    rng = np.random.default_rng(seed)
    best = 0.0
    for _ in range(num_samples):
        x, s = sampler(rng)
        gamma = float(rng.uniform(min_step, 1.0))
        fx = _objective(problem, x)
        grad = problem.block_gradient(x, i)
        lin = -gamma * float(problem.block_gap(x, grad, i, s))
        y = problem.apply_step(x, i, s, gamma)
        fy = _objective(problem, y)
        best = max(best, 2.0 / gamma**2 * (fy - fx - lin))
    return best


# -- array problems --------------------------------------------------------------


def box_lmo(lower, upper) -> Callable:
    """Vertex of the box ``[lower, upper]`` minimizing ``<s, g>``."""
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)

    def lmo(g, i):
        return np.where(np.asarray(g) > 0, lower, upper)

    return lmo


def simplex_lmo(g, i=None) -> np.ndarray:
    """Vertex of the probability simplex minimizing ``<s, g>``."""
    g = np.asarray(g, dtype=float)
    s = np.zeros_like(g)
    s[np.argmin(g)] = 1.0
    return s


def array_block_problem(
    x0,
    blocks: Sequence[Sequence[int]],
    objective: Callable[[np.ndarray], float],
    gradient: Callable[[np.ndarray], np.ndarray],
    block_lmo: Callable[[np.ndarray, int], np.ndarray],
    hessian=None,
) -> BlockProblem:
    """BlockProblem for an iterate stored as one flat numpy array.

    ``blocks`` lists the coordinate indices of each block and
    ``block_lmo(grad_i, i)`` returns the minimizing vertex of block ``i``.
    If a constant ``hessian`` is given (quadratic objective), the exact line
    search is available.
    """
    x0 = np.array(x0, dtype=float)
    index = [np.asarray(b, dtype=np.intp) for b in blocks]
    H = None if hessian is None else np.asarray(hessian, dtype=float)

    def block_gradient(x, i):
        return gradient(x)[index[i]]

    def lmo(x, grad, i, k):
        return Corner(i, np.asarray(block_lmo(grad, i), dtype=float))

    def block_gap(x, grad, i, s):
        return float(np.dot(x[index[i]] - s.point, grad))

    def apply_step(x, i, s, gamma):
        y = x.copy()
        y[index[i]] = (1.0 - gamma) * x[index[i]] + gamma * s.point
        return y

    line_search = None
    if H is not None:

        def line_search(x, i, s):
            d = np.zeros_like(x)
            d[index[i]] = s.point - x[index[i]]
            num = -float(np.dot(d, gradient(x)))
            return clipped_quadratic_step(num, float(d @ H @ d))

    return BlockProblem(
        n_blocks=len(index),
        initial_iterate=lambda: x0.copy(),
        objective_value=objective,
        block_gradient=block_gradient,
        block_lmo=lmo,
        block_gap=block_gap,
        apply_step=apply_step,
        exact_line_search=line_search,
    )
