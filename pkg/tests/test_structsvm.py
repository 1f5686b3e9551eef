from itertools import product

import numpy as np
import pytest

from bcfw.decoders import (
    NORMALIZED_HAMMING,
    ChainModel,
    SequenceDataset,
    SequenceExample,
    all_labelings,
    joint_feature_map,
    loss,
    viterbi_loss_augmented_decode,
)
from bcfw.fw_core import (
    SolverConfig,
    additive_tolerance,
    estimate_curvature,
    wrap_oracle_additive,
    wrap_oracle_multiplicative,
)
from bcfw.structsvm import (
    ChainOracle,
    PrimalState,
    ProblemConstants,
    batch_fw_train,
    batch_subgradient_train,
    bcfw_problem,
    bcfw_train,
    block_line_search,
    check_lambda,
    curvature_bounds,
    dual_objective,
    primal_objective,
    psi,
    ssg_step_size,
    ssg_train,
    svm_duality_gap,
)


def state_from_alpha(dd, alpha):
    """PrimalState holding ``w = A alpha`` and ``ell = b^T alpha``."""
    x = PrimalState.zeros(dd.dataset)
    for i, idx in enumerate(dd.blocks):
        x.w_blocks[i] = (dd.A[:, idx] @ alpha[idx])[x.supports[i]]
        x.ell_blocks[i] = dd.b[idx] @ alpha[idx]
    x.w = dd.A @ alpha
    x.ell = float(dd.b @ alpha)
    return x


def quiet(**kw):
    kw.setdefault("record_time", False)
    return SolverConfig(**kw)


class TestObjectives:
    def test_dual_examples(self):
        assert dual_objective(np.zeros(3), 0.0, 0.5) == 0.0
        assert dual_objective([1.0, 0.0], 0.5, 2.0) == 0.5
        assert dual_objective(0.0 * np.ones(4), 0.25, 1.0) == -0.25

    def test_check_lambda(self):
        assert check_lambda(0.1) == 0.1
        for bad in (0.0, -1.0, np.inf, np.nan):
            with pytest.raises(ValueError):
                check_lambda(bad)

    def test_psi_at_gold_is_zero(self, small):
        for ex in small:
            assert not psi(small.model, ex, ex.y).any()

    def test_psi_is_feature_difference(self, small):
        rng = np.random.default_rng(0)
        m = small.model
        for ex in small:
            y = rng.integers(m.n_labels, size=len(ex))
            expected = joint_feature_map(m, ex.x, ex.y) - joint_feature_map(m, ex.x, y)
            np.testing.assert_allclose(psi(m, ex, y), expected, atol=1e-15)

    def test_primal_at_zero(self, instance_s):
        assert primal_objective(np.zeros(instance_s.model.dim), instance_s, 0.3) == pytest.approx(1.0, rel=1e-15)

    def test_primal_matches_enumeration(self, small):
        rng = np.random.default_rng(1)
        m = small.model
        lam = 0.2
        for _ in range(5):
            w = rng.standard_normal(m.dim)
            total = 0.0
            for ex in small:
                h = [loss(NORMALIZED_HAMMING, ex.y, y) - w @ psi(m, ex, y) for y in all_labelings(m.n_labels, len(ex))]
                total += max(h)
            expected = 0.5 * lam * w @ w + total / len(small)
            np.testing.assert_allclose(primal_objective(w, small, lam), expected, rtol=1e-12)

    def test_single_alternative(self):
        # one example, two labels, one position: H = max(0, Delta - <w, psi>)
        m = ChainModel(2, 1)
        ex = SequenceExample(np.array([[1.0]]), [0])
        data = SequenceDataset(m, [ex])
        w = np.zeros(m.dim)
        w[m.emission_index(0, 0)] = 0.3
        w[m.emission_index(0, 1)] = -0.2
        # <w, psi(y=1)> = 0.3 + 0.2 = 0.5 from emissions, start/stop add nothing
        np.testing.assert_allclose(primal_objective(w, data, 2.0), 0.5 * 2.0 * w @ w + max(0.0, 1.0 - 0.5), rtol=1e-15)

    def test_counts_oracle_calls(self, small):
        from bcfw.fw_core import OracleCounter

        c = OracleCounter(len(small))
        primal_objective(np.zeros(small.model.dim), small, 1.0, counter=c)
        svm_duality_gap(PrimalState.zeros(small), small, 1.0, counter=c)
        assert c.calls == 2 * len(small) and c.passes == 2.0

    def test_weak_duality(self, small, dense_dual):
        rng = np.random.default_rng(2)
        for lam in (0.05, 1.0):
            dd = dense_dual(small, lam)
            for _ in range(20):
                alpha = dd.random_feasible(rng)
                w = dd.A @ alpha
                assert primal_objective(w, small, lam) >= -dd.objective(alpha) - 1e-9


class TestDualityGap:
    def test_start_gap(self, small, instance_s):
        for data in (small, instance_s):
            gap, w_s, ell_s = svm_duality_gap(PrimalState.zeros(data), data, 0.1)
            assert gap == ell_s == pytest.approx(1.0, rel=1e-15)
            assert curvature_bounds(data, 0.1).h0 == pytest.approx(gap, rel=1e-15)

    def test_identity_on_random_iterates(self, small, dense_dual):
        rng = np.random.default_rng(3)
        for lam in (0.02, 0.5):
            dd = dense_dual(small, lam)
            for _ in range(20):
                alpha = dd.random_feasible(rng)
                x = state_from_alpha(dd, alpha)
                gap, _, _ = svm_duality_gap(x, small, lam)
                primal = primal_objective(x.w, small, lam)
                np.testing.assert_allclose(gap, primal - (x.ell - 0.5 * lam * x.w @ x.w), rtol=1e-9, atol=1e-12)
                # linearization gap over the product of simplices
                g = dd.gradient(alpha)
                s = np.zeros_like(alpha)
                for idx in dd.blocks:
                    s[idx[np.argmin(g[idx])]] = 1.0
                np.testing.assert_allclose(gap, (alpha - s) @ g, rtol=1e-9, atol=1e-12)

    def test_product_domain_lmo(self, micro, dense_dual):
        # 2^3 labelings per example, 512 product corners
        rng = np.random.default_rng(4)
        lam = 1.0 / 3
        dd = dense_dual(micro, lam)
        corners = list(product(*[range(len(idx)) for idx in dd.blocks]))
        assert len(corners) == 512
        for _ in range(10):
            alpha = dd.random_feasible(rng)
            g = dd.gradient(alpha)
            values = [sum(g[idx[j]] for idx, j in zip(dd.blocks, c)) for c in corners]
            best = corners[int(np.argmin(values))]
            w = dd.A @ alpha
            stacked = tuple(dd.position(Y, viterbi_loss_augmented_decode(micro.model, w, ex)[0])
                            for ex, Y in zip(micro, dd.labelings))
            assert stacked == best
            gap, w_s, ell_s = svm_duality_gap(state_from_alpha(dd, alpha), micro, lam)
            s = np.zeros_like(alpha)
            s[[idx[j] for idx, j in zip(dd.blocks, best)]] = 1.0
            np.testing.assert_allclose(w_s, dd.A @ s, atol=1e-14)
            np.testing.assert_allclose(ell_s, dd.b @ s, rtol=1e-14)


class TestBlockLineSearch:
    def test_degenerate(self):
        w, wi = np.array([1.0, 2.0]), np.array([0.5, 0.5])
        assert block_line_search(w, wi, 0.1, wi, 0.2, 1.0) == 1.0
        assert block_line_search(w, wi, 0.2, wi, 0.1, 1.0) == 0.0
        assert block_line_search(w, wi, 0.2, wi, 0.2, 1.0) == 0.0

    def test_direct_formula(self):
        assert block_line_search([1.0, 0.0], [1.0, 0.0], 0.0, [0.0, 0.0], 0.0, 1.0) == 1.0
        # num = 2 * 0.5 - 0 + 0.25, den = 2 * 1 -> 0.625
        assert block_line_search([0.5, 0.0], [1.0, 0.0], 0.0, [0.0, 0.0], 0.25, 2.0) == 0.625

    def test_clipping(self):
        assert block_line_search([3.0], [1.0], 0.0, [0.0], 0.0, 1.0) == 1.0
        assert block_line_search([-3.0], [1.0], 0.0, [0.0], 0.0, 1.0) == 0.0

    def test_grid_optimality(self, small, dense_dual):
        rng = np.random.default_rng(5)
        lam = 0.1
        dd = dense_dual(small, lam)
        grid = np.linspace(0.0, 1.0, 1001)
        for _ in range(30):
            alpha = dd.random_feasible(rng)
            x = state_from_alpha(dd, alpha)
            i = int(rng.integers(len(small)))
            j = int(rng.integers(len(dd.blocks[i])))
            col = dd.blocks[i][j]
            w_i = dd.A[:, dd.blocks[i]] @ alpha[dd.blocks[i]]
            ell_i = dd.b[dd.blocks[i]] @ alpha[dd.blocks[i]]
            gamma = block_line_search(x.w, w_i, ell_i, dd.A[:, col], dd.b[col], lam)
            d = np.zeros_like(alpha)
            d[dd.blocks[i]] = -alpha[dd.blocks[i]]
            d[col] += 1.0
            best = dd.objective(alpha + gamma * d)
            assert all(best <= dd.objective(alpha + g * d) + 1e-10 for g in grid)


class TestBatchFrankWolfe:
    def test_first_step_reaches_corner(self, small):
        lam = 0.1
        x, trace = batch_fw_train(small, lam, quiet(max_iterations=1, step_rule="predefined"))
        _, w_s, ell_s = svm_duality_gap(PrimalState.zeros(small), small, lam)
        np.testing.assert_allclose(x.w, w_s, atol=1e-15)
        assert x.ell == pytest.approx(ell_s, rel=1e-15)
        assert [r.k for r in trace] == [0, 1]

    def test_subgradient_equivalence(self, small):
        lam = 0.05
        K = 30
        iterates = []
        batch_fw_train(small, lam, quiet(max_iterations=K, step_rule="predefined"), track_errors=False,
                       callback=lambda k, x, cert: iterates.append(x.w.copy()))
        betas = [2.0 / (k + 2) / lam for k in range(K)]
        sg = batch_subgradient_train(small, lam, betas)
        assert len(sg) == len(iterates) == K + 1
        for a, b in zip(iterates, sg):
            assert np.max(np.abs(a - b)) <= 1e-12 * (1 + np.max(np.abs(a)))

    def test_gap_identity_along_run(self, small):
        lam = 0.1
        x, trace = batch_fw_train(small, lam, quiet(max_iterations=40))
        for r in trace:
            assert r.gap >= -1e-12
            np.testing.assert_allclose(r.gap, r.primal + r.dual, rtol=1e-9, atol=1e-12)
        x.check_invariants()

    def test_stops_on_tolerance(self, micro):
        x, trace = batch_fw_train(micro, 1.0 / 3, quiet(max_iterations=5000, gap_tolerance=1e-9))
        assert trace[-1].gap <= 1e-9 < trace[-2].gap
        assert trace[-1].effective_passes == len(trace)

    def test_line_search_descends(self, small):
        _, trace = batch_fw_train(small, 0.1, quiet(max_iterations=60))
        duals = trace.column("dual")
        assert np.all(np.diff(duals) <= 1e-12 * (1 + np.abs(duals[:-1])))


class TestBatchSubgradient:
    def test_zero_step(self, small):
        ws = batch_subgradient_train(small, 0.5, [0.0, 0.0])
        for w in ws:
            assert not w.any()

    def test_full_step(self, small):
        lam = 0.5
        ws = batch_subgradient_train(small, lam, [1.0 / lam])
        _, w_s, _ = svm_duality_gap(PrimalState.zeros(small), small, lam)
        np.testing.assert_allclose(ws[1], w_s, atol=1e-15)

    def test_step_range(self, small):
        with pytest.raises(ValueError):
            batch_subgradient_train(small, 0.5, [2.5])
        with pytest.raises(ValueError):
            batch_subgradient_train(small, 0.5, [-0.1])


class TestBlockCoordinate:
    def test_single_example_matches_batch(self, small):
        one = SequenceDataset(small.model, [small[2]])
        for rule in ("line_search", "predefined"):
            lam = 0.3
            a, b = [], []
            batch_fw_train(one, lam, quiet(max_iterations=25, step_rule=rule), track_errors=False,
                           callback=lambda k, x, c: a.append((x.w.copy(), x.ell)))
            bcfw_train(one, lam, quiet(max_iterations=25, step_rule=rule, gap_check_every=1000),
                       track_errors=False, step_callback=lambda k, x: b.append((x.w.copy(), x.ell)))
            for (wa, la), (wb, lb) in zip(a[1:], b):
                np.testing.assert_allclose(wb, wa, rtol=1e-12, atol=1e-15)
                assert lb == pytest.approx(la, rel=1e-12)

    def test_invariants_every_step(self, small):
        def check(k, x):
            x.check_invariants()
            assert -1e-12 <= x.ell <= 1.0 + 1e-12
            assert np.all(x.ell_blocks >= -1e-15)

        x, _, trace = bcfw_train(small, 0.1, quiet(max_iterations=400, gap_check_every=5), step_callback=check)
        assert x.k == 400

    def test_monotone_dual(self, small):
        lam = 0.1
        duals = [0.0]
        bcfw_train(small, lam, quiet(max_iterations=500),
                   step_callback=lambda k, x: duals.append(dual_objective(x.w, x.ell, lam)))
        d = np.array(duals)
        assert np.all(np.diff(d) <= 1e-12 * (1 + np.abs(d[:-1])))

    def test_gap_identity_and_passes(self, small):
        n = len(small)
        _, _, trace = bcfw_train(small, 0.1, quiet(max_iterations=30 * n, gap_check_every=3))
        assert [r.k for r in trace] == list(range(0, 30 * n + 1, 3 * n))
        for r in trace:
            np.testing.assert_allclose(r.gap, r.primal + r.dual, rtol=1e-9, atol=1e-12)
        # each check costs a pass and the step after it reuses its corner
        np.testing.assert_allclose(trace.column("passes"), [1 + (4 - 1 / n) * j for j in range(len(trace))])

    def test_agrees_with_batch_optimum(self, micro):
        lam = 0.01
        _, ref = batch_fw_train(micro, lam, quiet(max_iterations=5000, gap_tolerance=1e-10), track_errors=False)
        assert ref[-1].gap <= 1e-10
        f_star = ref[-1].dual
        x, _, trace = bcfw_train(micro, lam, quiet(max_iterations=30000, gap_check_every=1000), track_errors=False)
        f = dual_objective(x.w, x.ell, lam)
        assert f >= f_star - 1e-10
        assert f - f_star <= 1e-6

    def test_deterministic_and_threaded(self, small):
        runs = [bcfw_train(small, 0.1, quiet(max_iterations=200, gap_check_every=2, seed=5, threads=t))[2]
                for t in (1, 1, 3)]
        for other in runs[1:]:
            assert len(other) == len(runs[0])
            for a, b in zip(runs[0], other):
                assert a.same_values(b)

    def test_seed_changes_path(self, small):
        a = bcfw_train(small, 0.1, quiet(max_iterations=50, seed=1))[0]
        b = bcfw_train(small, 0.1, quiet(max_iterations=50, seed=2))[0]
        assert not np.array_equal(a.w, b.w)

    def test_weighted_average(self, small):
        lam = 0.1
        ws = []
        x, avg, _ = bcfw_train(small, lam, quiet(max_iterations=120, averaging="weighted"),
                               step_callback=lambda k, x: ws.append(x.w.copy()))
        K = len(ws)
        closed = sum((t + 1) * w for t, w in enumerate(ws)) * 2.0 / (K * (K + 1))
        np.testing.assert_allclose(x.w_avg, closed, rtol=1e-9, atol=1e-12)

    def test_averaged_report(self, small):
        lam = 0.1
        n = len(small)
        x, avg, trace = bcfw_train(small, lam, quiet(max_iterations=20 * n, averaging="weighted", gap_check_every=5),
                                   report="weighted")
        last = trace[-1]
        gap, _, _ = svm_duality_gap(type("P", (), {"w": x.w_avg, "ell": x.ell_avg}), small, lam)
        np.testing.assert_allclose(last.gap, gap, rtol=1e-12)
        np.testing.assert_allclose(last.dual, dual_objective(x.w_avg, x.ell_avg, lam), rtol=1e-12)
        # checks on the average cost one extra pass each
        assert last.effective_passes == 20 - (len(trace) - 1) / n + 2 * len(trace)
        with pytest.raises(ValueError):
            bcfw_train(small, lam, quiet(max_iterations=5), report="weighted")

    def test_tolerance_stops(self, micro):
        _, _, trace = bcfw_train(micro, 1.0, quiet(max_iterations=10**5, gap_tolerance=1e-2, gap_check_every=1))
        assert trace[-1].gap <= 1e-2
        assert trace[-1].k < 10**5


class TestApproximateOracle:
    def test_enumeration_values(self, small):
        lam = 0.1
        oracle = ChainOracle(small, lam)
        x, _, _ = bcfw_train(small, lam, quiet(max_iterations=50))
        for i in range(len(small)):
            values, x_value, make = oracle.enumerate_block(x, None, i)
            for j in (0, 5, len(values) - 1):
                s = make(j)
                np.testing.assert_allclose(x_value - values[j], oracle.block_gap(x, None, i, s), atol=1e-14)

    @pytest.mark.parametrize("nu", [0.25, 0.5, 0.9])
    def test_multiplicative_quality(self, small, nu):
        lam = 0.1
        m = small.model
        n = len(small)
        oracle = ChainOracle(small, lam)
        wrapped = wrap_oracle_multiplicative(oracle.lmo(), nu, oracle.enumerate_block)
        rng = np.random.default_rng(int(nu * 100))
        x, _, _ = bcfw_train(small, lam, quiet(max_iterations=40, seed=int(nu * 10)))
        for _ in range(20):
            i = int(rng.integers(n))
            ex = small[i]
            w_i = x.block_dense(i)
            gaps = [lam * (w_i - psi(m, ex, y) / (lam * n)) @ x.w - x.ell_blocks[i] + loss(NORMALIZED_HAMMING, ex.y, y) / n
                    for y in all_labelings(m.n_labels, len(ex))]
            s = wrapped(x, None, i, 0)
            assert oracle.block_gap(x, None, i, s) >= nu * max(gaps) - 1e-15
            x = oracle.apply_step(x, i, s, oracle.line_search(x, i, s))

    def test_approximate_training_certifies_exactly(self, small):
        lam = 0.1
        _, _, trace = bcfw_train(small, lam, quiet(max_iterations=400, oracle_accuracy=(0.5, 0.0), gap_check_every=5))
        for r in trace:
            np.testing.assert_allclose(r.gap, r.primal + r.dual, rtol=1e-9, atol=1e-12)
        assert trace[-1].gap < trace[0].gap

    def test_additive_quality(self, small):
        lam = 0.1
        m = small.model
        n = len(small)
        oracle = ChainOracle(small, lam)
        C = curvature_bounds(small, lam).block_curvature_bound
        wrapped = wrap_oracle_additive(oracle.lmo(), 0.5, C, oracle.enumerate_block, n)
        rng = np.random.default_rng(6)
        x, _, _ = bcfw_train(small, lam, quiet(max_iterations=40))
        for k in (0, 100, 1000, 10**5):
            tol = additive_tolerance(0.5, C, k, n)
            for i in rng.integers(n, size=5):
                ex = small[i]
                gaps = [lam * (x.block_dense(i) - psi(m, ex, y) / (lam * n)) @ x.w - x.ell_blocks[i]
                        + loss(NORMALIZED_HAMMING, ex.y, y) / n for y in all_labelings(m.n_labels, len(ex))]
                s = wrapped(x, None, int(i), k)
                assert oracle.block_gap(x, None, int(i), s) >= max(gaps) - tol - 1e-15

    def test_additive_training(self, small):
        # early tolerances exceed every block gap, so progress starts late
        x, _, trace = bcfw_train(small, 0.1, quiet(max_iterations=4000, oracle_accuracy=(1.0, 0.5)))
        x.check_invariants()
        assert trace[1].gap == trace[0].gap
        assert trace[-1].gap < 0.5 * trace[0].gap


class TestSubgradient:
    def test_step_size(self):
        assert ssg_step_size(0, 0.1) == pytest.approx(10.0, rel=1e-15)
        assert ssg_step_size(9, 0.5) == pytest.approx(0.2, rel=1e-15)

    def test_first_step(self, small):
        lam = 0.1
        state, trace = ssg_train(small, lam, quiet(max_iterations=1, seed=3))
        i = int(np.random.default_rng(3).integers(len(small)))
        y, _ = viterbi_loss_augmented_decode(small.model, np.zeros(small.model.dim), small[i])
        np.testing.assert_allclose(state.w, 10.0 * psi(small.model, small[i], y), rtol=1e-15)
        assert len(state.checkpoints) == 2 and not state.checkpoints[0].any()

    def test_trace_is_primal_only(self, small):
        n = len(small)
        state, trace = ssg_train(small, 0.1, quiet(max_iterations=10 * n, gap_check_every=5))
        assert all(r.dual is None and r.gap is None for r in trace)
        assert [r.k for r in trace] == [0, 5 * n, 10 * n]
        np.testing.assert_allclose(trace.column("passes"), [1, 7, 13])
        for r, w in zip(trace, state.checkpoints):
            np.testing.assert_allclose(r.primal, primal_objective(w, small, 0.1), rtol=1e-15)

    def test_weighted_report_and_average(self, small):
        state, trace = ssg_train(small, 0.1, quiet(max_iterations=50, gap_check_every=100), report="weighted")
        np.testing.assert_array_equal(state.checkpoints[-1], state.w_avg)

    def test_rejects_tolerance(self, small):
        with pytest.raises(ValueError):
            ssg_train(small, 0.1, quiet(max_iterations=5, gap_tolerance=1e-3))

    def test_decreases_primal(self, small):
        n = len(small)
        _, trace = ssg_train(small, 0.1, quiet(max_iterations=50 * n, gap_check_every=50), report="weighted")
        assert trace[-1].primal < trace[0].primal


class TestCurvature:
    def test_from_radius(self):
        c = ProblemConstants.from_radius(2.0, 1.0, 4)
        assert (c.Cf_bound, c.Cprod_bound, c.block_curvature_bound) == (16.0, 4.0, 1.0)
        assert c.Cprod_bound * c.n == c.Cf_bound

    def test_zero_radius(self):
        m = ChainModel(1, 3)
        data = SequenceDataset(m, [SequenceExample(np.ones((3, 3)), [0, 0, 0])] * 2)
        c = curvature_bounds(data, 0.1)
        assert c.R == 0.0 and c.Cf_bound == 0.0 and c.Cprod_bound == 0.0

    def test_exact_radius(self, small):
        c = curvature_bounds(small, 0.1)
        assert c.R_exact
        R = max(np.linalg.norm(psi(small.model, ex, y)) for ex in small
                for y in all_labelings(small.model.n_labels, len(ex)))
        assert c.R == pytest.approx(R, rel=1e-12)
        loose = curvature_bounds(small, 0.1, exact_cap=1)
        assert not loose.R_exact and loose.R >= c.R
        assert c.loss_dominated == (c.L_max <= c.Cprod_bound)

    def test_sampled_curvature_below_bound(self, small, dense_dual):
        lam = 0.1
        dd = dense_dual(small, lam)
        oracle = ChainOracle(small, lam)
        problem = bcfw_problem(oracle)
        c = curvature_bounds(small, lam)
        total = 0.0
        for i in range(len(small)):
            def sampler(rng, i=i):
                x = state_from_alpha(dd, dd.random_feasible(rng))
                Y = dd.labelings[i]
                y = Y[rng.integers(len(Y))]
                return x, oracle.corner(i, y, 0.0)

            est = estimate_curvature(problem, i, 200, i, sampler)
            assert 0.0 < est <= c.block_curvature_bound
            total += est
        assert total <= c.Cprod_bound
