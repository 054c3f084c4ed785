"""Sliding-window consensus layer: construction, slide semantics, belief
retention and the angle-wrap behaviour of tangent-space agreement."""
import numpy as np
import pytest

from swarmgbp import manifold as mf
from swarmgbp.consensus import (
    ConsensusWindow,
    MarginalPriorFactor,
    make_consensus_factor,
    make_prior_factor,
    make_temporal_factor,
)
from swarmgbp.gbp import FactorGraph, GaussianInfo, VariableNode


def scalar_window(x0=0.25, sigma_p=0.1, sigma_t=0.2, length=3):
    kind = mf.rn(1)
    return ConsensusWindow(
        0, kind, mf.ManifoldPoint(kind, [x0]), sigma_p, sigma_t, length=length
    )


def pair_precision(lam_f, lam):
    """Precision of a message through an equality factor of strength lam_f."""
    return lam_f * lam / (lam_f + lam)


class TestConstruction:
    @pytest.mark.parametrize("length", [1, 2, 3, 5])
    def test_newest_starts_informative_at_x0(self, length):
        win = scalar_window(x0=0.7, length=length)
        mean, cov = win.current_belief()
        assert mean.data[0] == pytest.approx(0.7, abs=1e-12)
        assert cov[0, 0] > 0.0

    def test_window_ids_ordered_newest_first(self):
        win = scalar_window(length=3)
        seqs = [vid[2] for vid in win.window]
        assert seqs == sorted(seqs, reverse=True)

    def test_bad_length_rejected(self):
        kind = mf.rn(1)
        with pytest.raises(ValueError):
            ConsensusWindow(0, kind, mf.identity(kind), 0.1, 0.2, length=0)


class TestSlide:
    def test_slide_preserves_mean_for_isolated_robot(self):
        win = scalar_window(x0=0.4)
        for _ in range(10):
            win.slide()
            win.graph.iterate(2)
        mean, _ = win.current_belief()
        assert mean.data[0] == pytest.approx(0.4, abs=1e-9)

    def test_slide_weakens_precision_toward_temporal_cap(self):
        # after many slides the carried information decays like lam_t / n,
        # so the newest-variable precision must strictly drop over time
        win = scalar_window(x0=0.4, sigma_p=1e-3)
        lam_first = None
        for k in range(20):
            win.slide()
            win.graph.iterate(2)
            lam = 1.0 / win.current_belief()[1][0, 0]
            if lam_first is None:
                lam_first = lam
        assert lam < lam_first

    def test_single_variable_window_slide_prior_closed_form(self):
        # W=1: the carried prior is the full newest belief passed through
        # one temporal factor: lam' = lam_t * lam / (lam_t + lam)
        win = scalar_window(x0=0.25, sigma_p=0.1, sigma_t=0.2, length=1)
        lam_before = 1.0 / win.current_belief()[1][0, 0]
        lam_t = 0.2 ** -2.0
        win.slide()
        prior = win.graph.factors[win.prior_id]
        assert isinstance(prior, MarginalPriorFactor)
        assert prior.info.lam[0, 0] == pytest.approx(
            pair_precision(lam_t, lam_before), rel=1e-9
        )

    def test_window_size_constant_across_slides(self):
        win = scalar_window(length=3)
        for _ in range(5):
            win.slide()
            assert len(win.window) == 3
            assert len(win.graph.variables) == 3


class TestMarginalPriorFactor:
    def test_message_mean_tracks_reference_shift(self):
        # the replayed message must keep pointing at the same global mean
        # when the variable relinearizes elsewhere
        kind = mf.rn(1)
        graph = FactorGraph()
        var = graph.add_variable(
            VariableNode("x", kind, mf.ManifoldPoint(kind, [1.0]))
        )
        info = GaussianInfo(np.array([2.0]), np.array([[4.0]]))  # mean offset 0.5
        prior = MarginalPriorFactor("mp", var, info, var.lin_point)
        graph.add_factor(prior)
        graph.iterate(1, relinearize=False)
        assert var.mean_point().data[0] == pytest.approx(1.5)
        # move the linearization point and recompute: same global mean
        var.lin_point = mf.ManifoldPoint(kind, [1.3])
        msg = prior.compute_messages([var])["x"]
        assert (1.3 + msg.mean()[0]) == pytest.approx(1.5, abs=1e-12)


class TestTwoRobotAgreement:
    def test_equal_priors_meet_at_midpoint(self):
        # two W=1 windows coupled through one agreement factor; the fixed
        # point must match the dense joint solve of the same graph
        kind = mf.rn(1)
        graph = FactorGraph()
        va = graph.add_variable(VariableNode("a", kind, mf.identity(kind)))
        vb = graph.add_variable(VariableNode("b", kind, mf.identity(kind)))
        graph.add_factor(
            make_prior_factor(va, mf.ManifoldPoint(kind, [0.2]), 0.1, fid="pa")
        )
        graph.add_factor(
            make_prior_factor(vb, mf.ManifoldPoint(kind, [0.8]), 0.1, fid="pb")
        )
        graph.add_factor(make_consensus_factor(va, vb, 0.05, fid="c"))
        graph.iterate(10)
        means, _ = graph.solve_dense()
        # closed form: the residual disagreement is lam_p/(lam_p + 2 lam_c)
        # of the prior gap, split symmetrically around the midpoint 0.5
        lam_p, lam_c = 0.1 ** -2.0, 0.05 ** -2.0
        gap = lam_p / (lam_p + 2.0 * lam_c) * 0.6
        assert va.mean_point().data[0] == pytest.approx(0.5 - gap / 2.0, abs=1e-9)
        assert vb.mean_point().data[0] == pytest.approx(0.5 + gap / 2.0, abs=1e-9)
        np.testing.assert_allclose(va.belief.mean(), means["a"], atol=1e-8)
        np.testing.assert_allclose(vb.belief.mean(), means["b"], atol=1e-8)

    def test_so2_wrap_agreement_finds_geodesic_midpoint(self):
        # headings +170 deg and -170 deg agree at +-180 deg, never near 0
        kind = mf.SO2
        a0 = np.deg2rad(170.0)
        b0 = np.deg2rad(-170.0)
        graph = FactorGraph()
        va = graph.add_variable(VariableNode("a", kind, mf.ManifoldPoint(kind, [a0])))
        vb = graph.add_variable(VariableNode("b", kind, mf.ManifoldPoint(kind, [b0])))
        graph.add_factor(
            make_prior_factor(va, mf.ManifoldPoint(kind, [a0]), 0.1, fid="pa")
        )
        graph.add_factor(
            make_prior_factor(vb, mf.ManifoldPoint(kind, [b0]), 0.1, fid="pb")
        )
        graph.add_factor(make_consensus_factor(va, vb, 0.01, fid="c"))
        for _ in range(50):
            graph.iterate(1)
        for var in (va, vb):
            theta = var.mean_point().data[0]
            assert abs(mf.wrap_angle(theta - np.pi)) < 0.01
            assert abs(theta) > 3.0  # nowhere near the naive average 0


class TestFactorConstructors:
    def test_scalar_sigma_broadcasts_to_dim(self):
        kind = mf.SE2
        va = VariableNode("a", kind, mf.identity(kind))
        vb = VariableNode("b", kind, mf.identity(kind))
        f = make_consensus_factor(va, vb, 0.5, fid="c")
        np.testing.assert_allclose(f.precision, np.eye(3) * 4.0)

    def test_kind_mismatch_rejected(self):
        va = VariableNode("a", mf.SE2, mf.identity(mf.SE2))
        vb = VariableNode("b", mf.SO2, mf.identity(mf.SO2))
        with pytest.raises(mf.KindMismatchError):
            make_consensus_factor(va, vb, 0.5)

    def test_nonpositive_sigma_rejected(self):
        va = VariableNode("a", mf.R1, mf.identity(mf.R1))
        with pytest.raises(ValueError):
            make_prior_factor(va, mf.identity(mf.R1), 0.0)

    def test_temporal_factor_is_equality_factor(self):
        kind = mf.rn(1)
        va = VariableNode("a", kind, mf.ManifoldPoint(kind, [1.0]))
        vb = VariableNode("b", kind, mf.ManifoldPoint(kind, [0.4]))
        f = make_temporal_factor(va, vb, 1.0, fid="t")
        np.testing.assert_allclose(f.model.h([va.lin_point, vb.lin_point]), [0.6])
