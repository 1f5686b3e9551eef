"""Datasets, synthetic data, trace CSVs and model files.

Dataset text format::

    #seq p=<features> q=<labels>
    <label> <feature>:<value> <feature>:<value> ...
    <label> ...

    <label> ...

Each non-blank line is one position; blank lines separate sequences.
Feature ids are 0-based.  Values are written with 17 significant digits,
so a write/read round trip is lossless.
"""

from __future__ import annotations

import json
import math
import os
import re
import struct
from typing import NamedTuple, Optional

import numpy as np

from .decoders import ChainModel, SequenceDataset, SequenceExample, predict
from .trace import COLUMNS, ConvergenceTrace, TraceRecord

_HEADER = re.compile(r"^#seq\s+p=(\d+)\s+q=(\d+)\s*$")


class DatasetFormatError(ValueError):
    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class ModelFormatError(ValueError):
    pass


# -- sequence datasets ------------------------------------------------------------


def parse_sequence_dataset(text: str) -> SequenceDataset:
    lines = text.split("\n")
    if not lines or not _HEADER.match(lines[0].rstrip("\r")):
        raise DatasetFormatError("expected header '#seq p=<int> q=<int>'", 1)
    m = _HEADER.match(lines[0].rstrip("\r"))
    p, q = int(m.group(1)), int(m.group(2))
    if p < 1 or q < 1:
        raise DatasetFormatError("p and q must be positive", 1)
    model = ChainModel(q, p)
    examples = []
    rows, labels = [], []

    def flush():
        if labels:
            examples.append(SequenceExample(np.array(rows), np.array(labels)))
            rows.clear()
            labels.clear()

    for lineno, raw in enumerate(lines[1:], start=2):
        line = raw.strip()
        if not line:
            flush()
            continue
        tokens = line.split()
        try:
            label = int(tokens[0])
        except ValueError:
            raise DatasetFormatError(f"label {tokens[0]!r} is not an integer", lineno) from None
        if not 0 <= label < q:
            raise DatasetFormatError(f"label {label} out of range [0, {q})", lineno)
        x = np.zeros(p)
        for tok in tokens[1:]:
            fid, sep, val = tok.partition(":")
            if not sep:
                raise DatasetFormatError(f"malformed feature token {tok!r}", lineno)
            try:
                f, v = int(fid), float(val)
            except ValueError:
                raise DatasetFormatError(f"malformed feature token {tok!r}", lineno) from None
            if not 0 <= f < p:
                raise DatasetFormatError(f"feature id {f} out of range [0, {p})", lineno)
            if not math.isfinite(v):
                raise DatasetFormatError(f"non-finite feature value {val!r}", lineno)
            x[f] = v
        rows.append(x)
        labels.append(label)
    flush()
    return SequenceDataset(model, examples)


def load_sequence_dataset(path) -> SequenceDataset:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        return parse_sequence_dataset(fh.read())


def format_sequence_dataset(dataset: SequenceDataset) -> str:
    m = dataset.model
    out = [f"#seq p={m.n_features} q={m.n_labels}\n"]
    for j, ex in enumerate(dataset):
        if j:
            out.append("\n")
        for x, y in zip(ex.x, ex.y):
            feats = " ".join(f"{f}:{format(float(x[f]), '.17g')}" for f in np.flatnonzero(x))
            out.append(f"{int(y)} {feats}".rstrip() + "\n")
    return "".join(out)


def save_sequence_dataset(dataset: SequenceDataset, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(format_sequence_dataset(dataset))


# -- synthetic data ---------------------------------------------------------------


class SyntheticData(NamedTuple):
    train: SequenceDataset
    w_true: np.ndarray
    test: Optional[SequenceDataset]


def _unit(v):
    norm = np.linalg.norm(v)
    return v / norm if norm > 0 else v


def generate_synthetic(
    n: int,
    T: int,
    q: int,
    p: int,
    noise: float = 0.0,
    seed: int = 0,
    n_test: int = 0,
    active: int = 3,
) -> SyntheticData:
    """Chains labeled by a planted model.

    The planted ``w`` has unit-norm emission, transition, start and stop
    blocks.  Every position has a constant bias feature 0 plus ``active``
    distinct random features, all with value ``1/sqrt(active + 1)`` so that
    each position has unit norm.  Labels are the planted
    prediction with each position replaced, with probability ``noise``, by
    a uniformly drawn different label.  Test sequences follow the same
    process after the training ones.
    """
    if min(n, T, q) < 1 or p < 2 or n_test < 0:
        raise ValueError("need n, T, q >= 1, p >= 2 and n_test >= 0")
    if not 0.0 <= noise <= 1.0:
        raise ValueError("noise must lie in [0, 1]")
    active = min(active, p - 1)
    rng = np.random.default_rng(seed)
    model = ChainModel(q, p)
    w = np.zeros(model.dim)
    emit = w[: model.transition_offset].reshape(q, p)
    emit[:] = _unit(rng.standard_normal((q, p)))
    w[model.transition_offset : model.start_offset] = _unit(rng.standard_normal(q * q))
    w[model.start_offset : model.stop_offset] = _unit(rng.standard_normal(q))
    w[model.stop_offset :] = _unit(rng.standard_normal(q))

    def draw(count):
        examples = []
        for _ in range(count):
            x = np.zeros((T, p))
            x[:, 0] = 1.0
            for t in range(T):
                x[t, 1 + rng.choice(p - 1, size=active, replace=False)] = 1.0
            x /= math.sqrt(active + 1)
            y = predict(model, w, SequenceExample(x, np.zeros(T, dtype=int))).copy()
            if q > 1:
                flips = rng.random(T) < noise
                shift = rng.integers(1, q, size=T)
                y = np.where(flips, (y + shift) % q, y)
            examples.append(SequenceExample(x, y))
        return SequenceDataset(model, examples)

    train = draw(n)
    test = draw(n_test) if n_test else None
    w.setflags(write=False)
    return SyntheticData(train, w, test)


# -- traces -------------------------------------------------------------------------


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    v = float(v)
    if not math.isfinite(v):
        return ""
    return repr(v)


def trace_csv_lines(trace) -> str:
    out = [",".join(COLUMNS) + "\n"]
    for r in trace:
        out.append(",".join(_fmt(v) for v in r.row()) + "\n")
    return "".join(out)


def write_trace_csv(trace: ConvergenceTrace, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(trace_csv_lines(trace))


def read_trace_csv(path) -> ConvergenceTrace:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        text = fh.read()
    lines = text.split("\n")
    if lines[0] != ",".join(COLUMNS):
        raise ValueError(f"unexpected trace header {lines[0]!r}")
    trace = ConvergenceTrace()
    for lineno, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        cells = line.split(",")
        if len(cells) != len(COLUMNS):
            raise ValueError(f"line {lineno}: expected {len(COLUMNS)} fields")
        val = [None if c == "" else float(c) for c in cells]
        trace.append(
            TraceRecord(
                effective_passes=val[0],
                k=int(val[1]),
                primal=val[2],
                dual=val[3],
                gap=val[4],
                train_error=val[5],
                test_error=val[6],
                wall_seconds=val[7] or 0.0,
            )
        )
    return trace


def append_trace_csv(trace: ConvergenceTrace, path) -> None:
    """Append rows to an existing trace file (created if missing), refusing
    records that would make the effective passes decrease."""
    if not os.path.exists(path) or os.path.getsize(path) == 0:
        write_trace_csv(trace, path)
        return
    existing = read_trace_csv(path)
    if len(existing) and len(trace) and trace[0].effective_passes < existing.last.effective_passes:
        raise ValueError("appended records would make effective passes decrease")
    ConvergenceTrace(list(trace))  # validates monotonicity within the new block
    with open(path, "a", encoding="utf-8", newline="\n") as fh:
        fh.write(trace_csv_lines(trace).split("\n", 1)[1])


# -- models -------------------------------------------------------------------------

MAGIC = b"BCFWMDL\x00"
VERSION = 1


class SavedModel(NamedTuple):
    model: ChainModel
    w: np.ndarray
    w_avg: Optional[np.ndarray]
    meta: dict


def model_bytes(model: ChainModel, w, w_avg=None, **meta) -> bytes:
    w = np.ascontiguousarray(w, dtype="<f8")
    if w.shape != (model.dim,):
        raise ValueError(f"w has shape {w.shape}, layout needs ({model.dim},)")
    header = {"d": model.dim, "q": model.n_labels, "p": model.n_features, "has_avg": w_avg is not None}
    for key, value in meta.items():
        if key in header:
            raise ValueError(f"reserved metadata key {key!r}")
        header[key] = value
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    parts = [MAGIC, struct.pack("<II", VERSION, len(blob)), blob, w.tobytes()]
    if w_avg is not None:
        w_avg = np.ascontiguousarray(w_avg, dtype="<f8")
        if w_avg.shape != w.shape:
            raise ValueError("averaged weights must have the same shape as w")
        parts.append(w_avg.tobytes())
    return b"".join(parts)


def save_model(path, model: ChainModel, w, w_avg=None, **meta) -> None:
    """Write ``w`` (and optionally an averaged ``w``) with the layout and
    JSON-serializable metadata such as ``lam`` or ``solver``."""
    with open(path, "wb") as fh:
        fh.write(model_bytes(model, w, w_avg, **meta))


def parse_model_bytes(data: bytes, expected: Optional[ChainModel] = None) -> SavedModel:
    if data[: len(MAGIC)] != MAGIC:
        raise ModelFormatError("not a model file (bad magic)")
    off = len(MAGIC)
    if len(data) < off + 8:
        raise ModelFormatError("truncated model header")
    version, hlen = struct.unpack_from("<II", data, off)
    if version != VERSION:
        raise ModelFormatError(f"unsupported model version {version}")
    off += 8
    try:
        header = json.loads(data[off : off + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"corrupt model header: {exc}") from None
    off += hlen
    model = ChainModel(int(header["q"]), int(header["p"]))
    if model.dim != header["d"]:
        raise ModelFormatError(f"dimension {header['d']} does not match layout q={model.n_labels}, p={model.n_features}")
    if expected is not None and expected != model:
        raise ModelFormatError(
            f"model layout q={model.n_labels}, p={model.n_features} does not match "
            f"expected q={expected.n_labels}, p={expected.n_features}"
        )
    d = model.dim
    n_arrays = 2 if header["has_avg"] else 1
    if len(data) != off + 8 * d * n_arrays:
        raise ModelFormatError("model payload has the wrong size")
    w = np.frombuffer(data, dtype="<f8", count=d, offset=off).astype(float)
    w_avg = None
    if header["has_avg"]:
        w_avg = np.frombuffer(data, dtype="<f8", count=d, offset=off + 8 * d).astype(float)
    meta = {k: v for k, v in header.items() if k not in ("d", "q", "p", "has_avg")}
    return SavedModel(model, w, w_avg, meta)


def load_model(path, expected: Optional[ChainModel] = None) -> SavedModel:
    with open(path, "rb") as fh:
        return parse_model_bytes(fh.read(), expected)
