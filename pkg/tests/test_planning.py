"""Planning-layer residuals, horizon kinematics and end-to-end chain
behaviour (straight-line travel, head-on avoidance)."""
import numpy as np
import pytest

from swarmgbp import manifold as mf
from swarmgbp.planning import (
    PlanChain,
    clamp_speed,
    collision_jacobian,
    collision_residual,
    dynamics_residual,
    horizon_update,
    make_collision_factor,
    transition_matrix,
    unicycle_jacobian,
    unicycle_residual,
    wrap_state_residual,
)
from swarmgbp.gbp import VariableNode, numeric_jacobian
from swarmgbp.sim import RobotAgent, World

R6 = mf.rn(6)


class TestResiduals:
    def test_collision_at_min_distance_is_inverse_e(self):
        a = np.zeros(6)
        b = np.zeros(6)
        b[0] = 2.0
        assert collision_residual(a, b, 2.0) == pytest.approx(
            0.36787944117144233, abs=1e-12
        )

    def test_collision_at_contact_is_one_and_decays(self):
        a = np.zeros(6)
        assert collision_residual(a, a, 1.5) == pytest.approx(1.0)
        prev = 1.0
        for d in (0.5, 1.0, 2.0, 5.0):
            b = np.zeros(6)
            b[1] = d
            r = collision_residual(a, b, 1.5)
            assert r < prev
            prev = r

    def test_collision_rejects_bad_dmin(self):
        with pytest.raises(ValueError):
            collision_residual(np.zeros(6), np.ones(6), 0.0)

    def test_collision_jacobian_matches_numeric(self):
        rng = np.random.default_rng(12)
        for _ in range(10):
            a = rng.normal(scale=3.0, size=6)
            b = rng.normal(scale=3.0, size=6)
            d_min = 2.0

            def h(points):
                return np.array(
                    [collision_residual(points[0].data, points[1].data, d_min)]
                )

            pa = mf.ManifoldPoint(R6, a)
            pb = mf.ManifoldPoint(R6, b)
            np.testing.assert_allclose(
                collision_jacobian(a, b, d_min),
                numeric_jacobian(h, [pa, pb], 1),
                atol=1e-6,
            )

    def test_dynamics_residual_zero_on_constant_velocity(self):
        dt = 0.25
        x = np.array([1.0, -2.0, 0.3, 2.0, 0.5, 0.1])
        x_next = transition_matrix(dt) @ x
        np.testing.assert_allclose(dynamics_residual(x, x_next, dt), np.zeros(6),
                                   atol=1e-12)

    def test_dynamics_residual_wraps_heading(self):
        dt = 0.1
        x = np.zeros(6)
        x[2] = np.pi - 0.05
        x_next = x.copy()
        x_next[2] = -np.pi + 0.05  # crossed the cut; true change is +0.1
        r = dynamics_residual(x, x_next, dt)
        assert r[2] == pytest.approx(0.1, abs=1e-12)

    @pytest.mark.parametrize("theta", [0.0, 0.7, np.pi / 2.0, -2.2])
    def test_unicycle_zero_for_aligned_motion(self, theta):
        state = np.zeros(6)
        state[2] = theta
        state[3] = 1.5 * np.cos(theta)
        state[4] = 1.5 * np.sin(theta)
        assert unicycle_residual(state) == pytest.approx(0.0, abs=1e-12)

    def test_unicycle_penalizes_sideways_motion(self):
        state = np.zeros(6)  # heading +x, moving +y
        state[4] = 1.0
        assert abs(unicycle_residual(state)) == pytest.approx(1.0)

    def test_paper_form_kept_but_not_zero_when_aligned(self):
        state = np.zeros(6)
        state[3] = 1.0  # heading +x, moving +x
        assert unicycle_residual(state, form="paper") == pytest.approx(1.0)
        assert unicycle_residual(state, form="corrected") == pytest.approx(0.0)

    def test_unicycle_jacobian_matches_numeric(self):
        rng = np.random.default_rng(5)
        for form in ("corrected", "paper"):
            for _ in range(5):
                s = rng.normal(size=6)

                def h(points):
                    return np.array([unicycle_residual(points[0].data, form)])

                p = mf.ManifoldPoint(R6, s)
                np.testing.assert_allclose(
                    unicycle_jacobian(s, form), numeric_jacobian(h, [p], 1),
                    atol=1e-6,
                )

    def test_wrap_state_residual_only_touches_heading(self):
        r = np.array([10.0, -10.0, 2.0 * np.pi + 0.3, 5.0, 5.0, 5.0])
        w = wrap_state_residual(r)
        np.testing.assert_allclose(w[[0, 1, 3, 4, 5]], r[[0, 1, 3, 4, 5]])
        assert w[2] == pytest.approx(0.3)


class TestHorizonKinematics:
    def test_speed_clamped_to_v_max(self):
        state = np.zeros(6)
        out = horizon_update(state, goal=[100.0, 0.0], dt=0.1, v_max=2.0,
                             omega_max=1.0)
        assert np.hypot(out[3], out[4]) == pytest.approx(2.0)
        assert out[0] == pytest.approx(0.2)

    def test_turn_rate_clamped_to_omega_max(self):
        state = np.zeros(6)  # heading +x, goal behind
        out = horizon_update(state, goal=[-100.0, 1e-6], dt=0.1, v_max=2.0,
                             omega_max=1.0)
        assert abs(out[5]) == pytest.approx(1.0)

    def test_short_hop_lands_exactly_on_goal(self):
        state = np.zeros(6)
        out = horizon_update(state, goal=[0.05, 0.0], dt=0.1, v_max=2.0,
                             omega_max=1.0)
        assert out[0] == pytest.approx(0.05)
        assert np.hypot(out[3], out[4]) == pytest.approx(0.5)

    def test_at_goal_stops(self):
        state = np.zeros(6)
        state[3] = 1.0
        out = horizon_update(state, goal=[0.0, 0.0], dt=0.1, v_max=2.0,
                             omega_max=1.0)
        np.testing.assert_allclose(out[3:6], np.zeros(3))

    def test_clamp_speed(self):
        s = np.zeros(6)
        s[3:5] = [3.0, 4.0]
        out = clamp_speed(s, 2.5)
        assert np.hypot(out[3], out[4]) == pytest.approx(2.5)
        assert out[4] / out[3] == pytest.approx(4.0 / 3.0)
        np.testing.assert_allclose(clamp_speed(s, 10.0), s)


class TestPlanChain:
    def test_requires_at_least_one_segment(self):
        with pytest.raises(ValueError):
            PlanChain(0, np.zeros(3), n_segments=0)

    def test_straight_line_travel(self):
        # travelling to a goal straight ahead must stay within 5% lateral
        # deviation of the start-goal line and actually arrive
        chain = PlanChain(0, np.array([0.0, 0.0, 0.0]))
        chain.set_goal([20.0, 0.0])
        dt = 0.1
        max_lateral = 0.0
        for _ in range(300):
            chain.iterate(2)
            chain.advance(dt)
            max_lateral = max(max_lateral, abs(chain.position[1]))
            if np.linalg.norm(chain.position - [20.0, 0.0]) < 0.5:
                break
        assert np.linalg.norm(chain.position - [20.0, 0.0]) < 0.5
        assert max_lateral < 0.05 * 20.0

    def test_goal_reached_predicate(self):
        chain = PlanChain(0, np.zeros(3))
        chain.set_goal([0.1, 0.0])
        assert chain.goal_reached(radius=2.0)
        chain.set_goal([50.0, 0.0])
        assert not chain.goal_reached(radius=2.0)

    def test_head_on_robots_keep_separation(self):
        # two plan-driven robots crossing paths must never get closer than
        # a large fraction of the collision distance d_min
        d_min = 2.0
        agents = []
        for rid, (x0, goal) in enumerate(
            [(0.0, [24.0, 0.0]), (24.0, [0.0, 0.0])]
        ):
            theta = 0.0 if x0 == 0.0 else np.pi
            plan = PlanChain(rid, np.array([x0, 0.0, theta]))
            a = RobotAgent(
                rid, mf.SE2, mf.identity(mf.SE2), sigma_p=10.0, sigma_t=1.0,
                sigma_c=1.0, plan=plan, motion="plan", d_min=d_min,
                goal_radius=1.0,
            )
            a.goal = np.asarray(goal, dtype=float)
            plan.set_goal(goal)
            agents.append(a)
        world = World(agents, r_c=30.0, dt=0.1,
                      rng=np.random.default_rng(0))
        min_sep = np.inf
        for _ in range(250):
            world.step()
            # pin goals: update_goal resamples for plain plan motion
            for a, goal in zip(agents, ([24.0, 0.0], [0.0, 0.0])):
                a.goal = np.asarray(goal, dtype=float)
                a.plan.set_goal(goal)
            sep = np.linalg.norm(agents[0].position - agents[1].position)
            min_sep = min(min_sep, sep)
        assert min_sep >= 0.9 * d_min
        # both actually passed through and reached their goals
        assert np.linalg.norm(agents[0].position - [24.0, 0.0]) < 2.0
        assert np.linalg.norm(agents[1].position - [0.0, 0.0]) < 2.0
