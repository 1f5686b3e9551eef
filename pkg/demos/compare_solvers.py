# %% [markdown]
# # Solvers on a synthetic chain problem
#
# Batch Frank-Wolfe, block-coordinate Frank-Wolfe (plain and averaged) and
# stochastic subgradient on the default synthetic instance, lambda = 1/n.
# Every solver takes the same number of steps over the data.

# %%
import numpy as np

from bcfw.data_io import generate_synthetic
from bcfw.fw_core import SolverConfig
from bcfw.structsvm import batch_fw_train, bcfw_train, curvature_bounds, ssg_train

data = generate_synthetic(n=40, T=6, q=4, p=20, noise=0.1, seed=7, n_test=40)
train, test = data.train, data.test
n = len(train)
lam = 1.0 / n
passes = 20

# %%
c = curvature_bounds(train, lam)
print(f"R = {c.R:.3f} (exact: {c.R_exact}), Cf <= {c.Cf_bound:.1f}, Cprod <= {c.Cprod_bound:.1f}")

# %% a long run gives a lower bound on the optimum
_, _, ref = bcfw_train(train, lam, SolverConfig(max_iterations=300 * n, gap_check_every=50), track_errors=False)
lower = -min(ref.column("dual"))
print(f"optimal primal >= {lower:.6f}")

# %%
runs = {}
_, runs["fw"] = batch_fw_train(train, lam, SolverConfig(max_iterations=passes), test=test)
_, _, runs["bcfw"] = bcfw_train(train, lam, SolverConfig(max_iterations=passes * n, gap_check_every=2), test=test)
_, _, runs["bcfw-wavg"] = bcfw_train(
    train, lam, SolverConfig(max_iterations=passes * n, gap_check_every=2, averaging="weighted"),
    test=test, report="weighted",
)
_, runs["ssg"] = ssg_train(train, lam, SolverConfig(max_iterations=passes * n, gap_check_every=2), test=test)

# %% the averaged and subgradient runs spend extra passes on their primal checks
print(f"{'solver':>10} {'passes':>7} {'primal - lower':>15} {'gap':>10} {'test error':>11}")
for name, trace in runs.items():
    last = trace.last
    gap = "" if last.gap is None else f"{last.gap:.3e}"
    print(f"{name:>10} {last.effective_passes:7.1f} {last.primal - lower:15.4e} {gap:>10} {last.test_error:11.4f}")

# %% suboptimality along the way for the block-coordinate run
for rec in runs["bcfw"]:
    print(f"passes {rec.effective_passes:5.1f}  primal - lower {rec.primal - lower:.3e}  gap {rec.gap:.3e}")
