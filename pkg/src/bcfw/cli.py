"""Command-line front end.

Subcommands: ``gen`` (synthetic data), ``train``, ``eval`` (test error of a
saved model), ``gap`` (duality-gap certificate of a saved model) and
``bench`` (multi-seed traces plus a min/median/max summary).

Exit codes: 0 on success, 2 on usage errors, 1 on runtime failures.
"""

from __future__ import annotations

import argparse
import os
import sys
from functools import partial
from typing import List, Optional, Sequence

import numpy as np

from .data_io import (
    DatasetFormatError,
    ModelFormatError,
    generate_synthetic,
    load_model,
    load_sequence_dataset,
    save_model,
    save_sequence_dataset,
    write_trace_csv,
)
from .decoders import (
    BRUTE_FORCE_CAP,
    HAMMING,
    NORMALIZED_HAMMING,
    beam_decode,
    test_error,
    viterbi_loss_augmented_decode,
)
from .fw_core import OracleCounter, SolverConfig
from .structsvm import (
    KernelSpec,
    batch_fw_train,
    bcfw_train,
    check_lambda,
    dual_objective,
    kernelized_bcfw_train,
    primal_objective,
    ssg_train,
    svm_duality_gap,
)
from .structsvm.baselines import batch_subgradient_train
from .trace import ConvergenceTrace, TraceRecord

SOLVERS = ("bcfw", "bcfw-wavg", "bcfw-tavg", "fw", "ssg", "ssg-wavg", "subgrad", "bcfw-kernel")
LOSSES = {"nh": NORMALIZED_HAMMING, "h": HAMMING}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _seeds(text) -> List[int]:
    """``"0-9"`` or ``"1,4,7"``."""
    out = []
    for part in text.split(","):
        if "-" in part.strip()[1:]:
            lo, hi = part.split("-", 1)
            out.extend(range(int(lo), int(hi) + 1))
        else:
            out.append(int(part))
    if not out:
        raise argparse.ArgumentTypeError("empty seed list")
    return out


def _add_training_flags(p):
    p.add_argument("--data", required=True)
    p.add_argument("--test")
    p.add_argument("--solver", choices=SOLVERS, default="bcfw")
    p.add_argument("--lambda", dest="lam", type=float, help="regularization (default 1/n)")
    p.add_argument("--passes", type=float, default=20.0, help="effective-pass budget")
    p.add_argument("--epsilon", type=float, help="stop once the duality gap is below this")
    p.add_argument("--step", choices=("ls", "fixed"), default="ls")
    p.add_argument("--nu", type=float, default=1.0, help="multiplicative oracle accuracy")
    p.add_argument("--delta", type=float, default=0.0, help="additive oracle accuracy")
    p.add_argument("--beam", type=int, default=0, help="beam width for steps (0 = exact)")
    p.add_argument("--gap-every", type=_positive_int, default=10, help="passes between gap checks")
    p.add_argument("--loss", choices=sorted(LOSSES), default="nh")
    p.add_argument("--kernel", choices=("linear", "rbf"), default="linear")
    p.add_argument("--rbf-gamma", type=float, default=1.0)
    p.add_argument("--no-clock", action="store_true", help="write 0 in the seconds column")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="bcfw", description="Frank-Wolfe structural SVM training")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="generate a synthetic chain dataset")
    g.add_argument("--n", type=_positive_int, default=40)
    g.add_argument("--length", type=_positive_int, default=6)
    g.add_argument("--labels", type=_positive_int, default=4)
    g.add_argument("--features", type=int, default=20)
    g.add_argument("--noise", type=float, default=0.1)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--n-test", type=int, default=0)
    g.add_argument("--test-out")

    t = sub.add_parser("train", help="train a model")
    _add_training_flags(t)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--trace")
    t.add_argument("--model")

    b = sub.add_parser("bench", help="run several seeds and summarize")
    _add_training_flags(b)
    b.add_argument("--seeds", type=_seeds, default=list(range(10)))
    b.add_argument("--trace", required=True, help="output prefix")

    e = sub.add_parser("eval", help="test error of a saved model")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--loss", choices=sorted(LOSSES), default="nh")

    c = sub.add_parser("gap", help="duality-gap certificate of a saved model")
    c.add_argument("--model", required=True)
    c.add_argument("--data", required=True)
    c.add_argument("--lambda", dest="lam", type=float)
    c.add_argument("--loss", choices=sorted(LOSSES), default="nh")
    return parser


def _threads() -> int:
    raw = os.environ.get("BCFW_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise UsageError(f"BCFW_THREADS must be an integer, got {raw!r}") from None


def _validate(args, dataset):
    solver = args.solver
    if args.epsilon is not None and solver in ("ssg", "ssg-wavg", "subgrad"):
        raise UsageError(f"--epsilon: solver {solver} has no duality gap; use --passes")
    if args.epsilon is not None and not args.epsilon >= 0:
        raise UsageError("--epsilon must be >= 0")
    if args.passes <= 0:
        raise UsageError("--passes must be positive")
    if not 0.0 < args.nu <= 1.0:
        raise UsageError("--nu must lie in (0, 1]")
    if args.delta < 0:
        raise UsageError("--delta must be >= 0")
    if args.beam < 0:
        raise UsageError("--beam must be >= 0")
    bcfw_family = solver in ("bcfw", "bcfw-wavg", "bcfw-tavg")
    if (args.nu < 1.0 or args.delta > 0.0 or args.beam) and not bcfw_family:
        raise UsageError(f"--nu/--delta/--beam: only supported by the bcfw solvers, not {solver}")
    if args.nu < 1.0 or args.delta > 0.0:
        q = dataset.model.n_labels
        if any(q ** len(ex) > BRUTE_FORCE_CAP for ex in dataset):
            raise UsageError("--nu/--delta: approximate oracles need at most "
                             f"{BRUTE_FORCE_CAP} labelings per sequence")
    if args.kernel == "rbf" and solver != "bcfw-kernel":
        raise UsageError("--kernel rbf: only supported by bcfw-kernel")
    if args.lam is not None:
        try:
            check_lambda(args.lam)
        except ValueError as exc:
            raise UsageError(f"--lambda: {exc}") from None


def _subgrad_run(train, lam, iterations, spec, test, record_time):
    """Batch subgradient with steps ``2 / (lam (k + 2))``: a primal value is
    recorded after every step (one extra pass each, counted)."""
    import time

    n = len(train)
    betas = [2.0 / (lam * (k + 2)) for k in range(iterations)]
    counter = OracleCounter(n)
    trace = ConvergenceTrace()
    t0 = time.perf_counter()
    iterates = batch_subgradient_train(train, lam, betas, spec=spec)
    for k, w in enumerate(iterates):
        if k:
            counter.add(n)
        primal = primal_objective(w, train, lam, spec=spec, counter=counter)
        rec = TraceRecord(counter.passes, k, primal=primal,
                          train_error=test_error(train.model, w, train, spec))
        if test is not None:
            rec.test_error = test_error(train.model, w, test, spec)
        if record_time:
            rec.wall_seconds = time.perf_counter() - t0
        trace.append(rec)
    return iterates[-1], trace


def train_once(args, train, test, seed):
    """Run the requested solver; returns ``(trace, model file kwargs)``."""
    n = len(train)
    lam = args.lam if args.lam is not None else 1.0 / n
    spec = LOSSES[args.loss]
    solver = args.solver
    per_pass = 1 if solver in ("fw", "subgrad") else n
    iterations = max(1, int(round(args.passes * per_pass)))
    averaging = "weighted" if solver in ("bcfw-wavg", "bcfw-tavg") else "none"
    config = SolverConfig(
        max_iterations=iterations,
        gap_tolerance=args.epsilon or 0.0,
        step_rule="line_search" if args.step == "ls" else "predefined",
        averaging="suffix_half" if solver == "bcfw-tavg" else averaging,
        seed=seed,
        gap_check_every=args.gap_every,
        oracle_accuracy=(args.nu, args.delta),
        threads=_threads(),
        record_time=not args.no_clock,
    )
    meta = {"lam": lam, "solver": solver, "loss": args.loss}

    if solver in ("bcfw", "bcfw-wavg", "bcfw-tavg"):
        step_decoder = partial(beam_decode, width=args.beam) if args.beam else None
        report = {"bcfw": "iterate", "bcfw-wavg": "weighted", "bcfw-tavg": "suffix"}[solver]
        state, avg, trace = bcfw_train(train, lam, config, spec=spec, step_decoder=step_decoder,
                                       test=test, report=report)
        meta.update(ell=state.ell)
        w_avg = None
        if avg is not None:
            v = avg.weighted if report == "weighted" else avg.suffix
            w_avg = v[:-1].copy()
            meta.update(ell_avg=float(v[-1]), use_average=True)
        return trace, dict(w=state.w, w_avg=w_avg, **meta)
    if solver == "fw":
        state, trace = batch_fw_train(train, lam, config, spec=spec, test=test)
        return trace, dict(w=state.w, ell=state.ell, **meta)
    if solver in ("ssg", "ssg-wavg"):
        report = "weighted" if solver == "ssg-wavg" else "iterate"
        state, trace = ssg_train(train, lam, config, spec=spec, test=test, report=report)
        if report == "weighted":
            meta.update(use_average=True)
        return trace, dict(w=state.w, w_avg=state.w_avg, **meta)
    if solver == "subgrad":
        w, trace = _subgrad_run(train, lam, iterations, spec, test, config.record_time)
        return trace, dict(w=w, **meta)
    # bcfw-kernel
    kernel = KernelSpec.linear() if args.kernel == "linear" else KernelSpec.rbf(args.rbf_gamma)
    config.averaging = "none"
    dual, trace = kernelized_bcfw_train(train, lam, config, kernel, spec=spec)
    if args.kernel != "linear":
        return trace, None
    X = np.vstack([ex.x for ex in train])
    return trace, dict(w=dual.primal_weights(train.model, X), ell=dual.ell, **meta)


def _load_data(args):
    train = load_sequence_dataset(args.data)
    if len(train) == 0:
        raise UsageError(f"--data: {args.data} contains no sequences")
    test = load_sequence_dataset(args.test) if getattr(args, "test", None) else None
    if test is not None and test.model != train.model:
        raise UsageError("--test: layout differs from the training data")
    return train, test


def _summary_line(trace) -> str:
    last = trace.last
    parts = [f"passes={last.effective_passes:g}", f"k={last.k}"]
    for name in ("primal", "dual", "gap", "train_error", "test_error"):
        v = getattr(last, name)
        if v is not None:
            parts.append(f"{name}={v:.6g}")
    return " ".join(parts)


def cmd_gen(args):
    if not 0.0 <= args.noise <= 1.0:
        raise UsageError("--noise must lie in [0, 1]")
    if args.features < 2:
        raise UsageError("--features must be at least 2")
    if args.n_test and not args.test_out:
        raise UsageError("--n-test requires --test-out")
    data = generate_synthetic(args.n, args.length, args.labels, args.features, args.noise,
                              args.seed, n_test=args.n_test)
    save_sequence_dataset(data.train, args.out)
    if data.test is not None:
        save_sequence_dataset(data.test, args.test_out)
    print(f"wrote {len(data.train)} sequences to {args.out}")
    return 0


def cmd_train(args):
    train, test = _load_data(args)
    _validate(args, train)
    if args.model and args.solver == "bcfw-kernel" and args.kernel != "linear":
        raise UsageError("--model: only linear-kernel models have explicit weights")
    trace, saved = train_once(args, train, test, args.seed)
    if args.trace:
        write_trace_csv(trace, args.trace)
    if args.model:
        saved = dict(saved)
        save_model(args.model, train.model, saved.pop("w"), saved.pop("w_avg", None), **saved)
    print(_summary_line(trace))
    return 0


def _summary_rows(traces: Sequence[ConvergenceTrace]):
    by_k = {}
    for trace in traces:
        for rec in trace:
            by_k.setdefault(rec.k, []).append(rec)
    rows = []
    for k in sorted(by_k):
        recs = by_k[k]
        row = [max(r.effective_passes for r in recs), k, len(recs)]
        for name in ("gap", "primal"):
            vals = [getattr(r, name) for r in recs if getattr(r, name) is not None]
            row += [min(vals), float(np.median(vals)), max(vals)] if vals else [None] * 3
        rows.append(row)
    return rows


SUMMARY_COLUMNS = ("passes", "k", "runs", "gap_min", "gap_median", "gap_max",
                   "primal_min", "primal_median", "primal_max")


def cmd_bench(args):
    from .data_io import _fmt

    train, test = _load_data(args)
    _validate(args, train)
    traces = []
    for seed in args.seeds:
        trace, _ = train_once(args, train, test, seed)
        write_trace_csv(trace, f"{args.trace}_seed{seed}.csv")
        traces.append(trace)
        print(f"seed {seed}: {_summary_line(trace)}")
    with open(f"{args.trace}_summary.csv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(SUMMARY_COLUMNS) + "\n")
        for row in _summary_rows(traces):
            fh.write(",".join(_fmt(v) for v in row) + "\n")
    return 0


def _saved_pair(saved):
    use_avg = saved.meta.get("use_average", False)
    w = saved.w_avg if use_avg and saved.w_avg is not None else saved.w
    ell = saved.meta.get("ell_avg" if use_avg else "ell")
    return w, ell


def cmd_eval(args):
    data = load_sequence_dataset(args.data)
    if len(data) == 0:
        raise UsageError(f"--data: {args.data} contains no sequences")
    saved = load_model(args.model, expected=data.model)
    w, _ = _saved_pair(saved)
    err = test_error(data.model, w, data, LOSSES[args.loss])
    print(f"test_error {err!r}")
    return 0


def cmd_gap(args):
    data = load_sequence_dataset(args.data)
    if len(data) == 0:
        raise UsageError(f"--data: {args.data} contains no sequences")
    saved = load_model(args.model, expected=data.model)
    w, ell = _saved_pair(saved)
    if ell is None:
        raise RuntimeError(f"model trained by {saved.meta.get('solver')} carries no dual certificate")
    lam = args.lam if args.lam is not None else saved.meta.get("lam", 1.0 / len(data))
    try:
        lam = check_lambda(lam)
    except ValueError as exc:
        raise UsageError(f"--lambda: {exc}") from None
    spec = LOSSES[args.loss]

    class _Pair:
        pass

    pair = _Pair()
    pair.w, pair.ell = w, ell
    gap, _, _ = svm_duality_gap(pair, data, lam, viterbi_loss_augmented_decode, spec)
    dual = dual_objective(w, ell, lam)
    print(f"gap {gap!r}")
    print(f"primal {gap - dual!r}")
    print(f"dual {dual!r}")
    return 0


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "bench": cmd_bench, "eval": cmd_eval, "gap": cmd_gap}


def run(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"bcfw: usage error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, RuntimeError, FloatingPointError, DatasetFormatError,
            ModelFormatError) as exc:
        print(f"bcfw: error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
