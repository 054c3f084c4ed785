"""Per-robot trajectory factor graph over a short forward horizon.

States are 6-vectors [x, y, theta, xdot, ydot, thetadot]. The chain holds
H+1 states joined by constant-velocity dynamics factors, with a unicycle
factor on every state, a very strong anchor on the current state and a
goal-following anchor on the horizon state. Collision factors against
neighbouring robots' chains are added per horizon index by the simulator.
"""
from __future__ import annotations

import numpy as np

from . import manifold as mf
from .gbp import FactorGraph, FactorNode, MeasurementModel, VariableNode

STATE_DIM = 6
_R6 = mf.rn(STATE_DIM)


def wrap_state_residual(r: np.ndarray) -> np.ndarray:
    r = np.asarray(r, dtype=float).copy()
    r[2] = mf.wrap_angle(r[2])
    return r


def transition_matrix(dt: float) -> np.ndarray:
    """Constant-velocity transition: positions advance by velocity * dt."""
    phi = np.eye(STATE_DIM)
    phi[0, 3] = phi[1, 4] = phi[2, 5] = dt
    return phi


def dynamics_residual(x_k, x_next, dt: float) -> np.ndarray:
    """r = X_{k+1} - Phi(dt) X_k, theta row wrapped."""
    return wrap_state_residual(np.asarray(x_next) - transition_matrix(dt) @ np.asarray(x_k))


def unicycle_residual(state, form: str = "corrected") -> float:
    """Non-holonomy residual; zero when velocity is collinear with heading.

    `form="paper"` selects the variant xdot cos(theta) - ydot sin(theta),
    which does not vanish for aligned motion and is kept only for comparison.
    """
    x, y, theta, xd, yd, td = np.asarray(state, dtype=float)
    if form == "paper":
        return xd * np.cos(theta) - yd * np.sin(theta)
    return xd * np.sin(theta) - yd * np.cos(theta)


def unicycle_jacobian(state, form: str = "corrected") -> np.ndarray:
    x, y, theta, xd, yd, td = np.asarray(state, dtype=float)
    jac = np.zeros((1, STATE_DIM))
    if form == "paper":
        jac[0, 2] = -xd * np.sin(theta) - yd * np.cos(theta)
        jac[0, 3] = np.cos(theta)
        jac[0, 4] = -np.sin(theta)
    else:
        jac[0, 2] = xd * np.cos(theta) + yd * np.sin(theta)
        jac[0, 3] = np.sin(theta)
        jac[0, 4] = -np.cos(theta)
    return jac


def collision_residual(x_i, x_j, d_min: float) -> float:
    """exp(-dist / d_min) on planar positions; large when robots are close."""
    if d_min <= 0.0:
        raise ValueError("d_min must be positive")
    d = np.hypot(x_i[0] - x_j[0], x_i[1] - x_j[1])
    return float(np.exp(-d / d_min))


def collision_jacobian(x_i, x_j, d_min: float) -> np.ndarray:
    diff = np.array([x_i[0] - x_j[0], x_i[1] - x_j[1]])
    d = max(np.hypot(diff[0], diff[1]), 1e-9)
    grad = -np.exp(-d / d_min) / d_min * diff / d
    jac = np.zeros((1, 2 * STATE_DIM))
    jac[0, 0:2] = grad
    jac[0, STATE_DIM:STATE_DIM + 2] = -grad
    return jac


def make_collision_factor(var_i: VariableNode, var_j: VariableNode,
                          d_min: float, sigma: float, fid,
                          damping: float = 0.25) -> FactorNode:
    def h(points):
        return np.array([collision_residual(points[0].data, points[1].data, d_min)])

    def jac(points):
        return collision_jacobian(points[0].data, points[1].data, d_min)

    return FactorNode(fid, [var_i.id, var_j.id], MeasurementModel(h, 1, jac),
                      np.zeros(1), sigma=[sigma], damping=damping)


def horizon_update(state, goal, dt: float, v_max: float, omega_max: float):
    """Advance the horizon state toward the goal with clamped rates."""
    state = np.asarray(state, dtype=float).copy()
    d = np.asarray(goal, dtype=float) - state[0:2]
    dist = np.hypot(d[0], d[1])
    if dist < 1e-12:
        state[3:6] = 0.0
        return state
    speed = min(v_max, dist / dt)
    vel = speed * d / dist
    dtheta = mf.wrap_angle(np.arctan2(d[1], d[0]) - state[2])
    omega = min(omega_max, abs(dtheta) / dt) * np.sign(dtheta)
    state[3:5] = vel
    state[5] = omega
    state[0:3] += state[3:6] * dt
    state[2] = mf.wrap_angle(state[2])
    return state


def _interp_state(a, b, alpha: float) -> np.ndarray:
    out = (1.0 - alpha) * np.asarray(a, dtype=float) + alpha * np.asarray(b, dtype=float)
    out[2] = mf.wrap_angle(a[2] + alpha * mf.wrap_angle(b[2] - a[2]))
    return out


def clamp_speed(state, v_max: float) -> np.ndarray:
    state = np.asarray(state, dtype=float).copy()
    speed = np.hypot(state[3], state[4])
    if speed > v_max:
        state[3:5] *= v_max / speed
    return state


class _AnchorModel(MeasurementModel):
    """h(X) = X - x_ref with wrapped theta row; the target is mutable so the
    anchor can be moved without rebuilding the factor."""

    def __init__(self, target):
        self.target = np.asarray(target, dtype=float).copy()
        super().__init__(
            lambda pts: wrap_state_residual(pts[0].data - self.target),
            STATE_DIM,
            lambda pts: np.eye(STATE_DIM),
        )


class PlanChain:
    """The planning-layer factor graph of one robot."""

    def __init__(self, robot, start_pose, horizon_time: float = 1.5,
                 n_segments: int = 6, sigma_d: float = 0.1,
                 sigma_u: float = 0.001, sigma_anchor_start: float = 1e-6,
                 sigma_anchor_horizon: float = 0.1, v_max: float = 2.0,
                 omega_max: float = 1.0, unicycle_form: str = "corrected"):
        if n_segments < 1:
            raise ValueError("need at least one horizon segment")
        self.robot = robot
        self.n_states = n_segments + 1
        self.seg_dt = horizon_time / n_segments
        self.v_max = v_max
        self.omega_max = omega_max
        self.unicycle_form = unicycle_form
        self.goal = np.asarray(start_pose[0:2], dtype=float).copy()
        self.sigma_d = sigma_d
        self.graph = FactorGraph()

        start = np.zeros(STATE_DIM)
        start[0:3] = start_pose[0:3]
        for k in range(self.n_states):
            self.graph.add_variable(
                VariableNode(("P", robot, k), _R6, mf.ManifoldPoint(_R6, start))
            )
        for k in range(n_segments):
            self.graph.add_factor(self._dynamics_factor(k))
        for k in range(self.n_states):
            self.graph.add_factor(self._unicycle_factor(k, sigma_u))

        self._start_model = _AnchorModel(start)
        self._horizon_model = _AnchorModel(start)
        self.graph.add_factor(FactorNode(
            ("anchor0", robot), [("P", robot, 0)], self._start_model,
            np.zeros(STATE_DIM), sigma=np.full(STATE_DIM, sigma_anchor_start)))
        self.graph.add_factor(FactorNode(
            ("anchorH", robot), [("P", robot, self.n_states - 1)],
            self._horizon_model, np.zeros(STATE_DIM),
            sigma=np.full(STATE_DIM, sigma_anchor_horizon)))

    def _dynamics_factor(self, k: int) -> FactorNode:
        dt = self.seg_dt
        phi = transition_matrix(dt)

        def h(points):
            return dynamics_residual(points[0].data, points[1].data, dt)

        def jac(points):
            return np.hstack([-phi, np.eye(STATE_DIM)])

        return FactorNode(("fd", self.robot, k),
                          [("P", self.robot, k), ("P", self.robot, k + 1)],
                          MeasurementModel(h, STATE_DIM, jac),
                          np.zeros(STATE_DIM),
                          sigma=np.full(STATE_DIM, self.sigma_d))

    def _unicycle_factor(self, k: int, sigma_u: float) -> FactorNode:
        form = self.unicycle_form

        def h(points):
            return np.array([unicycle_residual(points[0].data, form)])

        def jac(points):
            return unicycle_jacobian(points[0].data, form)

        return FactorNode(("fu", self.robot, k), [("P", self.robot, k)],
                          MeasurementModel(h, 1, jac), np.zeros(1),
                          sigma=[sigma_u])

    def state_var(self, k: int) -> VariableNode:
        return self.graph.variables[("P", self.robot, k)]

    def mean_state(self, k: int) -> np.ndarray:
        return self.state_var(k).mean_point().data

    @property
    def current_state(self) -> np.ndarray:
        return self._start_model.target.copy()

    @property
    def position(self) -> np.ndarray:
        return self._start_model.target[0:2].copy()

    def set_goal(self, goal):
        self.goal = np.asarray(goal, dtype=float).copy()

    def goal_reached(self, radius: float) -> bool:
        h = self._horizon_model.target
        return np.hypot(h[0] - self.goal[0], h[1] - self.goal[1]) < radius

    def advance(self, dt: float):
        """Move the current-state anchor along the plan and push the horizon
        anchor toward the goal; this is the robot's physical motion."""
        if self.n_states < 2:
            raise ValueError("chain too short to advance")
        alpha = min(1.0, dt / self.seg_dt)
        nxt = self.mean_state(1)
        new0 = clamp_speed(_interp_state(self._start_model.target, nxt, alpha),
                           self.v_max)
        self._start_model.target = new0
        newh = horizon_update(self._horizon_model.target, self.goal, dt,
                              self.v_max, self.omega_max)
        self._horizon_model.target = clamp_speed(newh, self.v_max)

    def iterate(self, n: int = 1):
        self.graph.iterate(n)
