import numpy as np
import pytest

from conftest import random_graph
from fairmp import autodiff as ad
from fairmp.graph import (build_normalized_adjacency, build_selfloop_adjacency,
                          neighborhood_structure, partition_by_sensitive)
from fairmp.kernels import (KernelConfig, build_coupling_full,
                            build_coupling_simplified)
from fairmp.propagation import (GATParams, PropagationConfig,
                                PropagationContext, attention_coefficients,
                                fair_layer_node, gat_fair_layer,
                                gin_fair_layer, gmmd_layer, gmmd_s_layer,
                                joint_objective, joint_objective_grad,
                                propagate_k, sampled_layer)
from oracles import central_diff, rel_err


def setup(rng, n=8, d=3, lambda_s=1.0, lambda_f=0.5, alpha=0.9):
    g = random_graph(rng, n=n, d=d)
    cfg = PropagationConfig(variant="gmmd", k=2, lambda_s=lambda_s,
                            lambda_f=lambda_f, alpha=alpha)
    part = partition_by_sensitive(g)
    op = build_normalized_adjacency(g)
    f = rng.normal(size=(n, d))
    x_in = rng.normal(size=(n, d))
    return g, cfg, part, op, f, x_in


class TestGmmdLayer:
    def test_lambda_f_zero_is_vanilla(self, rng):
        g, cfg, part, op, f, x_in = setup(rng, lambda_f=0.0)
        coupling = build_coupling_full(f, part, cfg.kernel)
        out = gmmd_layer(f, x_in, op, coupling, cfg)
        gamma = cfg.gamma
        assert out == pytest.approx((1 - gamma) * op.apply(f) + gamma * x_in,
                                    abs=1e-14)

    def test_gamma_one_keeps_only_fairness(self, rng):
        g, _, part, op, f, x_in = setup(rng)
        cfg = PropagationConfig(lambda_s=0.0, lambda_f=0.7, alpha=0.9)
        assert cfg.gamma == 1.0
        coupling = build_coupling_full(f, part, cfg.kernel)
        out = gmmd_layer(f, x_in, op, coupling, cfg)
        expected = x_in + 4 * 0.7 * 0.9 * (coupling.values @ f)
        assert out == pytest.approx(expected, abs=1e-12)

    def test_equals_literal_gradient_form(self, rng):
        # ((1-g) I - g ls L + 4 g lf a P) F + g X_in with L = I - A~
        g, cfg, part, op, f, x_in = setup(rng, n=3, lambda_s=0.8,
                                          lambda_f=0.4)
        coupling = build_coupling_full(f, part, cfg.kernel)
        gamma, ls, lf, a = cfg.gamma, cfg.lambda_s, cfg.lambda_f, cfg.alpha
        n = f.shape[0]
        dense_a = op.to_dense()
        lap = np.eye(n) - dense_a
        literal = ((1 - gamma) * np.eye(n) - gamma * ls * lap
                   + 4 * gamma * lf * a * coupling.values) @ f + gamma * x_in
        out = gmmd_layer(f, x_in, op, coupling, cfg)
        assert np.abs(out - literal).max() < 1e-12

    def test_operator_identity(self, rng):
        # (1-g) I - g ls L == (1-g)(I - L) as operators
        g, cfg, part, op, f, _ = setup(rng, n=9, lambda_s=1.7)
        gamma, ls = cfg.gamma, cfg.lambda_s
        lhs = (1 - gamma) * f - gamma * ls * (f - op.apply(f))
        rhs = (1 - gamma) * op.apply(f)
        assert np.abs(lhs - rhs).max() < 1e-12


class TestGmmdSimplifiedLayer:
    def test_distant_groups_reduce_to_vanilla(self, rng):
        # cross-group kernel ~ exp(-alpha * dist^2) with dist^2 >= 50/alpha
        n, d = 6, 3
        alpha = 2.0
        f = rng.normal(size=(n, d)) * 0.1
        f[3:] += np.sqrt(50.0 / alpha) + 1.0
        s = np.array([0, 0, 0, 1, 1, 1])
        g = random_graph(rng, n=n, d=d)
        g = type(g).from_edge_list(g.features, g.labels, s, g.edges)
        part = partition_by_sensitive(g)
        op = build_normalized_adjacency(g)
        x_in = rng.normal(size=(n, d))
        cfg = PropagationConfig(variant="gmmd_s", lambda_f=1.0, alpha=alpha)
        coupling = build_coupling_simplified(f, part, cfg.kernel)
        out = gmmd_s_layer(f, x_in, op, coupling, cfg)
        vanilla = (1 - cfg.gamma) * op.apply(f) + cfg.gamma * x_in
        assert np.abs(out - vanilla).max() < 1e-9

    def test_equals_full_with_same_group_zeroed(self, rng):
        g, cfg, part, op, f, x_in = setup(rng)
        full = build_coupling_full(f, part, cfg.kernel)
        zeroed = full.values.copy()
        for grp in (part.idx0, part.idx1):
            block = np.ix_(grp, grp)
            zeroed[block] = 0.0
        np.fill_diagonal(zeroed, 0.0)
        diag = -zeroed.sum(axis=1)
        zeroed[np.diag_indices_from(zeroed)] = diag
        simp = build_coupling_simplified(f, part, cfg.kernel)
        assert np.abs(simp.values - zeroed).max() < 1e-15
        scfg = PropagationConfig(variant="gmmd_s", lambda_s=cfg.lambda_s,
                                 lambda_f=cfg.lambda_f, alpha=cfg.alpha)
        out_s = gmmd_s_layer(f, x_in, op, simp, scfg)
        manual = gmmd_layer(f, x_in, op, type(full)(full.indices, zeroed,
                                                    full.n0, full.n1,
                                                    "full"), cfg)
        assert np.abs(out_s - manual).max() < 1e-12

    def test_singleton_pair_hand_expansion(self):
        f = np.array([[0.0], [np.sqrt(np.log(2.0))]])
        x_in = np.array([[1.0], [2.0]])
        s = np.array([0, 1])
        g = random_graph(np.random.default_rng(0), n=2, d=1)
        g = type(g).from_edge_list(f, [0, 1], s, [[0, 1]])
        part = partition_by_sensitive(g)
        op = build_normalized_adjacency(g)
        cfg = PropagationConfig(variant="gmmd_s", lambda_s=1.0, lambda_f=1.0,
                                alpha=1.0)
        coupling = build_coupling_simplified(g.features, part, cfg.kernel)
        out = gmmd_s_layer(g.features, x_in, op, coupling, cfg)
        gamma = 0.5
        p = np.array([[-0.5, 0.5], [0.5, -0.5]])
        expected = ((1 - gamma) * op.to_dense() + 4 * gamma * 1.0 * 1.0 * p) \
            @ g.features + gamma * x_in
        assert out == pytest.approx(expected, abs=1e-12)


class TestSampledLayer:
    def test_full_coverage_matches_gmmd(self, rng):
        n = 8
        s = np.array([0, 0, 0, 0, 1, 1, 1, 1])
        g = random_graph(rng, n=n, d=3)
        g = type(g).from_edge_list(g.features, g.labels, s, g.edges)
        part = partition_by_sensitive(g)
        op = build_normalized_adjacency(g)
        f = rng.normal(size=(n, 3))
        x_in = rng.normal(size=(n, 3))
        cfg = PropagationConfig(lambda_f=0.6, alpha=1.1)
        coupling = build_coupling_full(f, part, cfg.kernel)
        full = gmmd_layer(f, x_in, op, coupling, cfg)
        sampled = sampled_layer(f, x_in, op, part.idx0, part.idx1, cfg)
        assert np.abs(full - sampled).max() < 1e-12

    def test_empty_sample_is_vanilla(self, rng):
        g, cfg, part, op, f, x_in = setup(rng)
        out = sampled_layer(f, x_in, op, np.array([], dtype=int),
                            np.array([], dtype=int), cfg)
        vanilla = (1 - cfg.gamma) * op.apply(f) + cfg.gamma * x_in
        assert np.abs(out - vanilla).max() == 0.0

    def test_unsampled_rows_equal_vanilla(self, rng):
        g, cfg, part, op, f, x_in = setup(rng, n=10)
        s0 = part.idx0[:1]
        s1 = part.idx1[:1]
        out = sampled_layer(f, x_in, op, s0, s1, cfg)
        vanilla = (1 - cfg.gamma) * op.apply(f) + cfg.gamma * x_in
        untouched = np.setdiff1d(np.arange(10), np.concatenate([s0, s1]))
        assert np.abs(out[untouched] - vanilla[untouched]).max() == 0.0
        assert np.abs(out[s0] - vanilla[s0]).max() > 0.0 or cfg.lambda_f == 0


class TestGinLayer:
    def test_single_node(self):
        rng = np.random.default_rng(0)
        from fairmp.graph import AttributedGraph
        g = AttributedGraph(rng.normal(size=(1, 2)), [0], [0],
                            np.zeros((0, 2), dtype=int))
        cfg = PropagationConfig(backbone="gin", lambda_f=0.0, lambda_s=1.0)
        f = rng.normal(size=(1, 2))
        x_in = rng.normal(size=(1, 2))
        out = gin_fair_layer(f, x_in, g, None, cfg)
        assert out == pytest.approx(0.5 * f + 0.5 * x_in, abs=1e-14)

    def test_dense_oracle(self, rng):
        g = random_graph(rng, n=5, d=2)
        part = partition_by_sensitive(g)
        cfg = PropagationConfig(backbone="gin", lambda_f=0.3, gin_epsilon=0.2)
        f = rng.normal(size=(5, 2))
        x_in = rng.normal(size=(5, 2))
        coupling = build_coupling_full(f, part, cfg.kernel)
        a = np.zeros((5, 5))
        for i, j in g.edges:
            a[i, j] = a[j, i] = 1.0
        dense = a + 1.2 * np.eye(5)
        gamma = cfg.gamma
        expected = ((1 - gamma) * dense
                    + 4 * gamma * 0.3 * cfg.alpha * coupling.values) @ f \
            + gamma * x_in
        out = gin_fair_layer(f, x_in, g, coupling, cfg)
        assert out == pytest.approx(expected, abs=1e-12)

    def test_lambda_zero_is_scaled_gin(self, rng):
        g = random_graph(rng, n=6, d=2)
        cfg = PropagationConfig(backbone="gin", lambda_f=0.0)
        op = build_selfloop_adjacency(g, 0.0)
        f = rng.normal(size=(6, 2))
        x_in = rng.normal(size=(6, 2))
        out = gin_fair_layer(f, x_in, g, None, cfg)
        assert out == pytest.approx((1 - cfg.gamma) * op.apply(f)
                                    + cfg.gamma * x_in, abs=1e-13)


class TestGatLayer:
    def test_zero_scores_give_uniform_attention(self, rng):
        g = random_graph(rng, n=6, d=2)
        structure = neighborhood_structure(g)
        f = rng.normal(size=(6, 2))
        coeff = attention_coefficients(f, GATParams(np.zeros(4)), structure)
        indptr = structure[0]
        for i in range(6):
            row = coeff[indptr[i]:indptr[i + 1]]
            assert row == pytest.approx(np.full(row.size, 1.0 / row.size))

    def test_rows_sum_to_one(self, rng):
        g = random_graph(rng, n=7, d=3)
        structure = neighborhood_structure(g)
        f = rng.normal(size=(7, 3))
        coeff = attention_coefficients(f, GATParams(rng.normal(size=6)),
                                       structure)
        sums = np.add.reduceat(coeff, structure[0][:-1])
        assert sums == pytest.approx(np.ones(7), abs=1e-12)

    def test_dense_oracle(self, rng):
        n, c = 5, 2
        g = random_graph(rng, n=n, d=c)
        part = partition_by_sensitive(g)
        b = rng.normal(size=2 * c)
        f = rng.normal(size=(n, c))
        x_in = rng.normal(size=(n, c))
        cfg = PropagationConfig(backbone="gat", lambda_f=0.4, alpha=0.8)
        coupling = build_coupling_full(f, part, cfg.kernel)
        # dense attention with self loops
        adj = np.eye(n)
        for i, j in g.edges:
            adj[i, j] = adj[j, i] = 1.0
        att = np.zeros((n, n))
        for i in range(n):
            nbrs = np.flatnonzero(adj[i])
            scores = np.array([f[i] @ b[:c] + f[j] @ b[c:] for j in nbrs])
            scores = np.where(scores > 0, scores, 0.2 * scores)
            e = np.exp(scores - scores.max())
            att[i, nbrs] = e / e.sum()
        gamma = cfg.gamma
        expected = ((1 - gamma) * att
                    + 4 * gamma * 0.4 * 0.8 * coupling.values) @ f \
            + gamma * x_in
        out = gat_fair_layer(f, x_in, g, coupling, GATParams(b), cfg)
        assert out == pytest.approx(expected, abs=1e-12)


class TestPropagateK:
    def test_k1_vanilla(self, rng):
        g = random_graph(rng, n=6, d=2)
        cfg = PropagationConfig(variant="vanilla", k=1, lambda_s=1.0)
        ctx = PropagationContext.build(g, cfg)
        x_in = rng.normal(size=(6, 2))
        tape = ad.Tape()
        fk, fprev = propagate_k(ctx, cfg, tape.constant(x_in))
        expected = (1 - cfg.gamma) * ctx.operator.apply(x_in) \
            + cfg.gamma * x_in
        assert fk.value == pytest.approx(expected, abs=1e-13)
        assert fprev.value == pytest.approx(x_in)

    def test_k2_manual_composition(self, rng):
        g = random_graph(rng, n=7, d=2)
        cfg = PropagationConfig(variant="gmmd", k=2, lambda_f=0.5, alpha=1.2)
        ctx = PropagationContext.build(g, cfg)
        x_in = rng.normal(size=(7, 2))
        tape = ad.Tape()
        fk, fprev = propagate_k(ctx, cfg, tape.constant(x_in))
        part = ctx.part
        f1 = gmmd_layer(x_in, x_in, ctx.operator,
                        build_coupling_full(x_in, part, cfg.kernel), cfg)
        f2 = gmmd_layer(f1, x_in, ctx.operator,
                        build_coupling_full(f1, part, cfg.kernel), cfg)
        assert fprev.value == pytest.approx(f1, abs=1e-12)
        assert fk.value == pytest.approx(f2, abs=1e-12)

    def test_deep_stack_stays_finite(self, rng):
        g = random_graph(rng, n=10, d=3)
        cfg = PropagationConfig(variant="gmmd", k=8, lambda_f=1.0)
        ctx = PropagationContext.build(g, cfg)
        tape = ad.Tape()
        fk, _ = propagate_k(ctx, cfg, tape.constant(rng.normal(size=(10, 3))))
        assert np.isfinite(fk.value).all()

    def test_tape_layer_matches_plain(self, rng):
        g = random_graph(rng, n=8, d=3)
        for variant in ("gmmd", "gmmd_s"):
            cfg = PropagationConfig(variant=variant, k=1, lambda_f=0.7,
                                    alpha=0.9)
            ctx = PropagationContext.build(g, cfg)
            f = rng.normal(size=(8, 3))
            x_in = rng.normal(size=(8, 3))
            tape = ad.Tape()
            out = fair_layer_node(ctx, cfg, tape.constant(f),
                                  tape.constant(x_in))
            builder = (build_coupling_full if variant == "gmmd"
                       else build_coupling_simplified)
            coupling = builder(f, ctx.part, cfg.kernel)
            plain = gmmd_layer(f, x_in, ctx.operator, coupling, cfg)
            assert out.value == pytest.approx(plain, abs=1e-13)

    def test_sampled_tape_matches_plain(self, rng):
        g = random_graph(rng, n=10, d=3)
        cfg = PropagationConfig(variant="gmmd", k=1, lambda_f=0.7, alpha=0.9)
        ctx = PropagationContext.build(g, cfg)
        part = ctx.part
        ns = min(part.n0, part.n1, 2)
        s0, s1 = part.idx0[:ns], part.idx1[:ns]
        f = rng.normal(size=(10, 3))
        x_in = rng.normal(size=(10, 3))
        tape = ad.Tape()
        out = fair_layer_node(ctx, cfg, tape.constant(f), tape.constant(x_in),
                              sample=(s0, s1))
        plain = sampled_layer(f, x_in, ctx.operator, s0, s1, cfg)
        assert out.value == pytest.approx(plain, abs=1e-13)


class TestObjectiveDescent:
    def test_gradient_matches_finite_differences(self, rng):
        g = random_graph(rng, n=8, d=2)
        part = partition_by_sensitive(g)
        op = build_normalized_adjacency(g)
        kcfg = KernelConfig(0.9)
        f = rng.normal(size=(8, 2))
        x_in = rng.normal(size=(8, 2))
        grad = joint_objective_grad(f, x_in, op, part, 1.3, 0.7, kcfg)
        fd = central_diff(lambda a: joint_objective(a, x_in, op, part, 1.3,
                                                    0.7, kcfg), f)
        assert rel_err(grad, fd) < 1e-6

    def test_small_step_strictly_decreases(self, rng):
        # 100 random 12-node instances, explicit step 1e-3
        decreases = 0
        for trial in range(100):
            g = random_graph(np.random.default_rng(5000 + trial), n=12, d=3)
            part = partition_by_sensitive(g)
            op = build_normalized_adjacency(g)
            kcfg = KernelConfig(1.0)
            local = np.random.default_rng(9000 + trial)
            f = local.normal(size=(12, 3))
            x_in = local.normal(size=(12, 3))
            h0 = joint_objective(f, x_in, op, part, 1.0, 0.5, kcfg)
            grad = joint_objective_grad(f, x_in, op, part, 1.0, 0.5, kcfg)
            if np.linalg.norm(grad) < 1e-10:
                decreases += 1
                continue
            h1 = joint_objective(f - 1e-3 * grad, x_in, op, part, 1.0, 0.5,
                                 kcfg)
            assert h1 < h0 - 1e-10
            decreases += 1
        assert decreases == 100
