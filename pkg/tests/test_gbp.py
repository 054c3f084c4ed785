"""Message-passing correctness: exactness on trees, message algebra, and
analytic-vs-numeric factor Jacobians."""
import time

import numpy as np
import pytest

from swarmgbp import manifold as mf
from swarmgbp.consensus import make_consensus_factor, make_prior_factor
from swarmgbp.gbp import (
    FactorGraph,
    FactorNode,
    GaussianInfo,
    MeasurementModel,
    VariableNode,
    numeric_jacobian,
)


def random_tree_graph(rng, max_vars=20):
    """Random linear-Gaussian tree over mixed R^1/R^3 variables."""
    n = int(rng.integers(2, max_vars + 1))
    graph = FactorGraph()
    kinds = []
    for i in range(n):
        kind = mf.rn(1) if rng.random() < 0.5 else mf.rn(3)
        kinds.append(kind)
        graph.add_variable(
            VariableNode(i, kind, mf.ManifoldPoint(kind, rng.normal(size=kind.dim)))
        )
        # unary anchor so the joint precision is full rank
        graph.add_factor(
            make_prior_factor(
                graph.variables[i],
                mf.ManifoldPoint(kind, rng.normal(size=kind.dim)),
                rng.uniform(0.5, 2.0, size=kind.dim),
                fid=("p", i),
            )
        )
    for i in range(1, n):
        j = int(rng.integers(i))  # parent: random earlier node -> a tree
        ki, kj = kinds[i], kinds[j]

        a = rng.normal(size=(ki.dim, ki.dim))
        b = rng.normal(size=(ki.dim, kj.dim))

        def h(points, a=a, b=b):
            return a @ points[0].data + b @ points[1].data

        def jac(points, a=a, b=b):
            return np.hstack([a, b])

        model = MeasurementModel(h, ki.dim, jac)
        graph.add_factor(
            FactorNode(
                ("f", i, j), [i, j], model, rng.normal(size=ki.dim),
                sigma=rng.uniform(0.5, 2.0, size=ki.dim),
            )
        )
    return graph, n


class TestTreeExactness:
    def test_matches_dense_solver_on_random_trees(self):
        rng = np.random.default_rng(7)
        start = time.perf_counter()
        for _ in range(50):
            graph, n = random_tree_graph(rng)
            graph.iterate(n, relinearize=False)  # diameter sweeps suffice
            means, covs = graph.solve_dense()
            for vid, var in graph.variables.items():
                np.testing.assert_allclose(var.belief.mean(), means[vid], atol=1e-8)
                np.testing.assert_allclose(var.belief.cov(), covs[vid], atol=1e-8)
        assert time.perf_counter() - start < 10.0

    def test_two_variable_chain_closed_form(self):
        # priors N(0, 1) and N(4, 1) tied by an equality factor N(0, 1):
        # posterior means are (4/3, 8/3) by solving the 2x2 normal equations
        kind = mf.rn(1)
        graph = FactorGraph()
        va = graph.add_variable(VariableNode("a", kind, mf.identity(kind)))
        vb = graph.add_variable(VariableNode("b", kind, mf.identity(kind)))
        graph.add_factor(
            make_prior_factor(va, mf.ManifoldPoint(kind, [0.0]), 1.0, fid="pa")
        )
        graph.add_factor(
            make_prior_factor(vb, mf.ManifoldPoint(kind, [4.0]), 1.0, fid="pb")
        )
        graph.add_factor(make_consensus_factor(va, vb, 1.0, fid="c"))
        graph.iterate(4, relinearize=False)
        assert va.belief.mean()[0] == pytest.approx(4.0 / 3.0, abs=1e-10)
        assert vb.belief.mean()[0] == pytest.approx(8.0 / 3.0, abs=1e-10)


class TestMessageAlgebra:
    def test_belief_is_sum_of_inbox(self):
        kind = mf.rn(2)
        var = VariableNode("x", kind, mf.identity(kind))
        m1 = GaussianInfo(np.array([1.0, 0.0]), np.eye(2))
        m2 = GaussianInfo(np.array([0.0, 2.0]), 2.0 * np.eye(2))
        var.inbox["f1"] = m1
        var.inbox["f2"] = m2
        var.update_belief()
        np.testing.assert_allclose(var.belief.eta, [1.0, 2.0])
        np.testing.assert_allclose(var.belief.lam, 3.0 * np.eye(2))

    def test_message_to_excludes_own_contribution(self):
        kind = mf.rn(1)
        var = VariableNode("x", kind, mf.identity(kind))
        var.inbox["f1"] = GaussianInfo(np.array([1.0]), np.array([[2.0]]))
        var.inbox["f2"] = GaussianInfo(np.array([3.0]), np.array([[4.0]]))
        var.update_belief()
        out = var.message_to("f1")
        np.testing.assert_allclose(out.eta, [3.0])
        np.testing.assert_allclose(out.lam, [[4.0]])

    def test_rebase_preserves_global_mean(self):
        g = GaussianInfo(np.array([2.0]), np.array([[4.0]]))
        mu = g.mean()[0]
        shift = 0.3
        g.rebase(np.array([shift]))
        assert g.mean()[0] == pytest.approx(mu - shift)

    def test_relinearize_moves_lin_point_to_mean(self):
        kind = mf.rn(1)
        var = VariableNode("x", kind, mf.ManifoldPoint(kind, [1.0]))
        var.inbox["f"] = GaussianInfo(np.array([3.0]), np.array([[2.0]]))
        var.update_belief()
        # global mean: lin + eta/lam = 1 + 1.5 = 2.5
        assert var.relinearize()
        assert var.lin_point.data[0] == pytest.approx(2.5)
        np.testing.assert_allclose(var.belief.mean(), [0.0], atol=1e-12)

    def test_uninformative_belief_keeps_lin_point(self):
        kind = mf.rn(1)
        var = VariableNode("x", kind, mf.ManifoldPoint(kind, [7.0]))
        assert not var.relinearize()
        assert var.mean_point().data[0] == 7.0


class TestFactorJacobians:
    @pytest.mark.parametrize("kind", [mf.rn(1), mf.rn(3), mf.SO2, mf.SE2], ids=repr)
    def test_consensus_factor_analytic_matches_numeric(self, kind):
        rng = np.random.default_rng(3)
        for _ in range(10):
            pa = mf.ManifoldPoint(kind, rng.normal(scale=2.0, size=kind.dim))
            pb = mf.ManifoldPoint(kind, rng.normal(scale=2.0, size=kind.dim))
            va = VariableNode("a", kind, pa)
            vb = VariableNode("b", kind, pb)
            factor = make_consensus_factor(va, vb, 1.0, fid="c")
            analytic = factor.model.jacobian([pa, pb])
            numeric = numeric_jacobian(factor.model.h, [pa, pb], kind.dim)
            np.testing.assert_allclose(analytic, numeric, atol=1e-5)

    @pytest.mark.parametrize("kind", [mf.rn(3), mf.SO2, mf.SE2], ids=repr)
    def test_prior_factor_analytic_matches_numeric(self, kind):
        rng = np.random.default_rng(4)
        for _ in range(10):
            p = mf.ManifoldPoint(kind, rng.normal(scale=2.0, size=kind.dim))
            x0 = mf.ManifoldPoint(kind, rng.normal(scale=2.0, size=kind.dim))
            var = VariableNode("a", kind, p)
            factor = make_prior_factor(var, x0, 1.0, fid="p")
            analytic = factor.model.jacobian([p])
            numeric = numeric_jacobian(factor.model.h, [p], kind.dim)
            np.testing.assert_allclose(analytic, numeric, atol=1e-5)


class TestRobustness:
    def test_rank_deficient_factor_does_not_raise(self):
        # two variables joined only by a zero-Jacobian binary factor: the
        # conditioning block is singular; iteration must survive and leave
        # only finite (zero-information) messages behind
        kind = mf.rn(1)
        graph = FactorGraph()
        va = graph.add_variable(VariableNode("a", kind, mf.identity(kind)))
        vb = graph.add_variable(VariableNode("b", kind, mf.identity(kind)))

        model = MeasurementModel(
            lambda pts: np.array([0.0]), 1, lambda pts: np.array([[0.0, 0.0]])
        )
        graph.add_factor(FactorNode("f", ["a", "b"], model, [0.0], sigma=[1.0]))
        graph.iterate(2, relinearize=False)
        for var in (va, vb):
            assert np.all(np.isfinite(var.belief.eta))
            assert np.all(np.isfinite(var.belief.lam))

    def test_non_finite_message_skipped_not_propagated(self):
        # a diverging residual must increment the skip counter instead of
        # polluting the peer's inbox with NaNs
        kind = mf.rn(1)
        graph = FactorGraph()
        va = graph.add_variable(VariableNode("a", kind, mf.identity(kind)))
        vb = graph.add_variable(VariableNode("b", kind, mf.identity(kind)))
        model = MeasurementModel(
            lambda pts: np.array([np.inf]), 1,
            lambda pts: np.array([[1.0, -1.0]]),
        )
        graph.add_factor(FactorNode("f", ["a", "b"], model, [0.0], sigma=[1.0]))
        graph.iterate(1, relinearize=False)
        assert graph.skipped_messages >= 1
        for var in (va, vb):
            assert np.all(np.isfinite(var.belief.eta))

    def test_duplicate_ids_rejected(self):
        kind = mf.rn(1)
        graph = FactorGraph()
        graph.add_variable(VariableNode("a", kind, mf.identity(kind)))
        with pytest.raises(ValueError):
            graph.add_variable(VariableNode("a", kind, mf.identity(kind)))

    def test_factor_with_unknown_variable_rejected(self):
        graph = FactorGraph()
        kind = mf.rn(1)
        va = VariableNode("a", kind, mf.identity(kind))
        graph.add_variable(va)
        with pytest.raises(ValueError):
            graph.add_factor(make_consensus_factor(
                va, VariableNode("ghost", kind, mf.identity(kind)), 1.0, fid="f"
            ))
