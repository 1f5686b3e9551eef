"""Shared fixtures and the acceptance summary."""

import numpy as np
import pytest

from bcfw.data_io import generate_synthetic
from bcfw.decoders import NORMALIZED_HAMMING, all_labelings, loss
from bcfw.structsvm import psi

# Default benchmark instance: n=40, T=6, q=4, p=20, noise=0.1, seed 7.
S_ARGS = dict(n=40, T=6, q=4, p=20, noise=0.1, seed=7)


@pytest.fixture(scope="session")
def instance_s():
    return generate_synthetic(**S_ARGS).train


@pytest.fixture(scope="session")
def micro():
    """n=3, T=3, q=2: 8 labelings per example, 512 product corners."""
    return generate_synthetic(n=3, T=3, q=2, p=5, noise=0.3, seed=1).train


@pytest.fixture(scope="session")
def small():
    """Enumerable instance with mixed difficulty."""
    return generate_synthetic(n=8, T=4, q=3, p=6, noise=0.2, seed=3).train


class DenseDual:
    """Explicit ``A``, ``b`` and block index sets of the dual over all
    labelings (tiny instances only)."""

    def __init__(self, dataset, lam, spec=NORMALIZED_HAMMING):
        n = len(dataset)
        q = dataset.model.n_labels
        cols, b, blocks, labelings = [], [], [], []
        for ex in dataset:
            Y = all_labelings(q, len(ex))
            idx = []
            for y in Y:
                idx.append(len(cols))
                cols.append(psi(dataset.model, ex, y) / (lam * n))
                b.append(loss(spec, ex.y, y) / n)
            blocks.append(np.array(idx))
            labelings.append(Y)
        self.A = np.array(cols).T
        self.b = np.array(b)
        self.blocks = blocks
        self.labelings = labelings
        self.lam = lam
        self.dataset = dataset

    def start(self):
        """``alpha_i = e_{y_i}``."""
        alpha = np.zeros(len(self.b))
        for ex, idx, Y in zip(self.dataset, self.blocks, self.labelings):
            alpha[idx[self.position(Y, ex.y)]] = 1.0
        return alpha

    @staticmethod
    def position(Y, y):
        return int(np.flatnonzero((Y == np.asarray(y)).all(axis=1))[0])

    def objective(self, alpha):
        w = self.A @ alpha
        return 0.5 * self.lam * w @ w - self.b @ alpha

    def gradient(self, alpha):
        return self.lam * self.A.T @ (self.A @ alpha) - self.b

    def random_feasible(self, rng):
        alpha = np.zeros(len(self.b))
        for idx in self.blocks:
            alpha[idx] = rng.dirichlet(np.ones(len(idx)) * 0.3)
        return alpha


@pytest.fixture
def dense_dual():
    return DenseDual


# -- acceptance summary ------------------------------------------------------------

_RESULTS = {}
_DETAILS = {}


@pytest.fixture
def criterion_log(request):
    """``log(text)`` attaches a measured value to the criterion summary."""
    marker = request.node.get_closest_marker("criterion")
    number = marker.args[0] if marker else None

    def log(text):
        _DETAILS.setdefault(number, []).append(text)
        print(text)

    return log


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, name = marker.args
    ok = _RESULTS.setdefault(number, [name, True])
    if report.failed or (report.when == "call" and report.skipped):
        ok[1] = False


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        name, ok = _RESULTS[number]
        terminalreporter.write_line(f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {name}")
        for text in _DETAILS.get(number, []):
            terminalreporter.write_line(f"    {text}")
