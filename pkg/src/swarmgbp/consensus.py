"""Per-robot global consensus layer.

A sliding window of Lie-group variables joined by temporal factors, with a
prior on the oldest variable. Inter-robot agreement factors attach to the
newest window variable; sliding preserves the belief mean while letting the
covariance weaken, so a robot keeps its negotiated belief after losing
contact with its group.
"""
from __future__ import annotations

import itertools

import numpy as np

from . import manifold as mf
from .gbp import FactorGraph, FactorNode, GaussianInfo, MeasurementModel, VariableNode

_uid = itertools.count()


def _relative_model(kind: mf.ManifoldKind) -> MeasurementModel:
    """h(Xa, Xb) = Xa (-) Xb with analytic Jacobians."""

    def h(points):
        return mf.right_minus(points[0], points[1]).value

    def jacobian(points):
        tau = mf.right_minus(points[0], points[1])
        ja = mf.inv_right_jacobian(tau)
        jb = -mf.inv_left_jacobian(tau)
        return np.hstack([ja, jb])

    return MeasurementModel(h, kind.dim, jacobian)


def _anchor_model(kind: mf.ManifoldKind, x0: mf.ManifoldPoint) -> MeasurementModel:
    def h(points):
        return mf.right_minus(points[0], x0).value

    def jacobian(points):
        return mf.inv_right_jacobian(mf.right_minus(points[0], x0))

    return MeasurementModel(h, kind.dim, jacobian)


def make_prior_factor(var: VariableNode, x0: mf.ManifoldPoint, sigma,
                      fid=None) -> FactorNode:
    """Unary factor anchoring a variable at x0: h(X) = X (-) x0, z = 0."""
    sigma = np.asarray(sigma, dtype=float).reshape(-1)
    if sigma.shape[0] == 1 and var.kind.dim > 1:
        sigma = np.full(var.kind.dim, sigma[0])
    if np.any(sigma <= 0.0):
        raise ValueError("prior strengths must be positive")
    if fid is None:
        fid = ("prior", next(_uid))
    return FactorNode(
        fid, [var.id], _anchor_model(var.kind, x0.copy()),
        np.zeros(var.kind.dim), sigma=sigma,
    )


def make_consensus_factor(var_i: VariableNode, var_j: VariableNode, sigma,
                          fid=None, damping: float = 0.0) -> FactorNode:
    """Binary agreement factor: h = X_i (-) X_j, z = 0."""
    if var_i.kind != var_j.kind:
        raise mf.KindMismatchError(
            f"kind mismatch: {var_i.kind} vs {var_j.kind}"
        )
    sigma = np.asarray(sigma, dtype=float).reshape(-1)
    if sigma.shape[0] == 1 and var_i.kind.dim > 1:
        sigma = np.full(var_i.kind.dim, sigma[0])
    if fid is None:
        fid = ("consensus", next(_uid))
    return FactorNode(
        fid, [var_i.id, var_j.id], _relative_model(var_i.kind),
        np.zeros(var_i.kind.dim), sigma=sigma, damping=damping,
    )


def make_temporal_factor(var_new: VariableNode, var_old: VariableNode, sigma,
                         fid=None) -> FactorNode:
    """Same form as the agreement factor, joining consecutive window variables."""
    return make_consensus_factor(var_new, var_old, sigma, fid=fid)


class MarginalPriorFactor(FactorNode):
    """Unary factor replaying a stored message (the marginalized information
    from a deleted part of the graph), expressed at a reference point."""

    __slots__ = ("info", "ref_point")

    def __init__(self, fid, var: VariableNode, info: GaussianInfo,
                 ref_point: mf.ManifoldPoint):
        model = MeasurementModel(lambda pts: np.zeros(var.kind.dim), var.kind.dim)
        super().__init__(fid, [var.id], model, np.zeros(var.kind.dim),
                         precision=np.zeros((var.kind.dim, var.kind.dim)))
        self.info = info.copy()
        self.ref_point = ref_point.copy()

    def compute_messages(self, variables):
        var = variables[0]
        shift = mf.right_minus(var.lin_point, self.ref_point).value
        msg = GaussianInfo(self.info.eta - self.info.lam @ shift, self.info.lam)
        self.prev_messages[var.id] = msg
        return {var.id: msg}


class ConsensusWindow:
    """Sliding window of consensus variables for one robot.

    Variable ids are ("G", robot, seq) with seq increasing over time; index 0
    of `window` is always the newest variable.
    """

    def __init__(self, robot, kind: mf.ManifoldKind, x0: mf.ManifoldPoint,
                 sigma_p, sigma_t, length: int = 3, slide_period: int = 1):
        if length < 1:
            raise ValueError("window length must be >= 1")
        self.robot = robot
        self.kind = kind
        self.sigma_p = np.asarray(sigma_p, dtype=float).reshape(-1)
        self.sigma_t = np.asarray(sigma_t, dtype=float).reshape(-1)
        self.length = length
        self.slide_period = slide_period
        self.graph = FactorGraph()
        self.window = []  # newest first
        self._seq = 0
        for k in range(length):
            var = VariableNode(("G", robot, self._seq), kind, x0)
            self._seq += 1
            self.graph.add_variable(var)
            self.window.insert(0, var.id)
            if k > 0:
                newer = self.graph.variables[self.window[0]]
                older = self.graph.variables[self.window[1]]
                self.graph.add_factor(
                    make_temporal_factor(
                        newer, older, self.sigma_t,
                        fid=("ft", robot, newer.id[2]),
                    )
                )
        oldest = self.graph.variables[self.window[-1]]
        self.prior_id = ("fp", robot, 0)
        self.graph.add_factor(
            make_prior_factor(oldest, x0, self.sigma_p, fid=self.prior_id)
        )
        # propagate the prior through the chain so every variable starts
        # with an informative belief centred on x0.
        self.graph.iterate(length, relinearize=False)

    @property
    def newest(self) -> VariableNode:
        return self.graph.variables[self.window[0]]

    @property
    def oldest(self) -> VariableNode:
        return self.graph.variables[self.window[-1]]

    def current_belief(self):
        """Mean point and covariance of the newest window variable."""
        var = self.newest
        if not var.belief.is_informative():
            raise ValueError("consensus layer is uninitialized (zero information)")
        return var.mean_point(), var.belief.cov()

    def slide(self):
        """Advance the window by one variable.

        The newest belief mean seeds the new variable; the oldest variable is
        dropped and its marginalized information becomes a prior on the new
        oldest variable.
        """
        graph = self.graph
        old_newest = self.newest
        new_var = VariableNode(
            ("G", self.robot, self._seq), self.kind, old_newest.mean_point()
        )
        self._seq += 1
        graph.add_variable(new_var)
        ft_new = graph.add_factor(
            make_temporal_factor(
                new_var, old_newest, self.sigma_t,
                fid=("ft", self.robot, new_var.id[2]),
            )
        )
        self.window.insert(0, new_var.id)
        # give the new variable an informative belief right away (goal
        # selection may read it before the next message sweep).
        nodes = [graph.variables[vid] for vid in ft_new.adjacent]
        msg = ft_new.compute_messages(nodes).get(new_var.id)
        if msg is not None:
            new_var.inbox[ft_new.id] = msg
            new_var.update_belief()

        dropped_id = self.window.pop()
        dropped = graph.variables[dropped_id]
        survivor = graph.variables[self.window[-1]]
        # Temporal factor between the dropped variable and the survivor; its
        # last message to the survivor is the marginalized information that
        # replaces the deleted subgraph.
        ft_id = ("ft", self.robot, survivor.id[2])
        ft = graph.factors.get(ft_id)
        carried = GaussianInfo.zero(self.kind.dim)
        if ft is not None:
            nodes = [graph.variables[vid] for vid in ft.adjacent]
            msg = ft.compute_messages(nodes).get(survivor.id)
            if msg is not None:
                carried = msg
        new_prior = MarginalPriorFactor(
            ("fp", self.robot, survivor.id[2]), survivor, carried,
            survivor.lin_point,
        )
        graph.remove_variable(dropped_id)  # also removes its prior and ft
        graph.add_factor(new_prior)
        self.prior_id = new_prior.id
        survivor.inbox[new_prior.id] = carried.copy()
        survivor.update_belief()
        return new_var, old_newest
