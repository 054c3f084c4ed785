"""Gaussian belief propagation over factor graphs with Lie-group variables.

Beliefs and messages are information-form Gaussians expressed in the tangent
space of each variable's linearization point. Factors relinearize at the
current linearization points every iteration; on relinearization only the
information vectors are rebased (parallel transport approximated by the
identity, valid for small per-step motions).
"""
from __future__ import annotations

import numpy as np

from . import manifold as mf


class GaussianInfo:
    """Information-form Gaussian: eta = Lambda mu, lam = Sigma^-1."""

    __slots__ = ("eta", "lam")

    def __init__(self, eta, lam):
        self.eta = np.asarray(eta, dtype=float)
        self.lam = np.asarray(lam, dtype=float)

    @classmethod
    def zero(cls, dim: int) -> "GaussianInfo":
        return cls(np.zeros(dim), np.zeros((dim, dim)))

    @property
    def dim(self) -> int:
        return self.eta.shape[0]

    def copy(self) -> "GaussianInfo":
        return GaussianInfo(self.eta.copy(), self.lam.copy())

    def __add__(self, other: "GaussianInfo") -> "GaussianInfo":
        return GaussianInfo(self.eta + other.eta, self.lam + other.lam)

    def __sub__(self, other: "GaussianInfo") -> "GaussianInfo":
        return GaussianInfo(self.eta - other.eta, self.lam - other.lam)

    def mean(self) -> np.ndarray:
        return np.linalg.solve(self.lam, self.eta)

    def cov(self) -> np.ndarray:
        return np.linalg.inv(self.lam)

    def rebase(self, shift: np.ndarray):
        """Shift the reference point by `shift` in the tangent space."""
        self.eta = self.eta - self.lam @ shift

    def is_informative(self, cond_limit: float = 1e14) -> bool:
        if not np.any(self.lam):
            return False
        return np.linalg.cond(self.lam) < cond_limit


def damped(new: GaussianInfo, prev: GaussianInfo, beta: float) -> GaussianInfo:
    if beta <= 0.0 or prev is None:
        return new
    return GaussianInfo(
        (1.0 - beta) * new.eta + beta * prev.eta,
        (1.0 - beta) * new.lam + beta * prev.lam,
    )


class VariableNode:
    __slots__ = ("id", "kind", "lin_point", "belief", "inbox", "external")

    def __init__(self, vid, kind: mf.ManifoldKind, lin_point: mf.ManifoldPoint):
        self.id = vid
        self.kind = kind
        self.lin_point = lin_point.copy()
        self.belief = GaussianInfo.zero(kind.dim)
        self.inbox = {}
        self.external = False

    def update_belief(self):
        belief = GaussianInfo.zero(self.kind.dim)
        for msg in self.inbox.values():
            belief = belief + msg
        self.belief = belief
        return belief

    def message_to(self, factor_id) -> GaussianInfo:
        msg = self.inbox.get(factor_id)
        if msg is None:
            return self.belief
        return self.belief - msg

    def mean_point(self) -> mf.ManifoldPoint:
        """Belief mean as a manifold point (lin_point if uninformative)."""
        if not self.belief.is_informative():
            return self.lin_point.copy()
        return mf.right_plus(
            self.lin_point, mf.TangentVector(self.kind, self.belief.mean())
        )

    def relinearize(self) -> bool:
        """Move lin_point to the belief mean and rebase stored messages."""
        if not self.belief.is_informative():
            return False
        mu = self.belief.mean()
        if not np.any(mu):
            return False
        self.lin_point = mf.right_plus(self.lin_point, mf.TangentVector(self.kind, mu))
        for msg in self.inbox.values():
            msg.rebase(mu)
        self.belief.rebase(mu)
        return True


class ExternalVariable(VariableNode):
    """Stand-in for a variable owned by another robot.

    Its linearization point and outgoing messages are set from mailbox
    snapshots; messages computed *to* it are collected from the inbox and
    published back. It never updates its own belief.
    """

    __slots__ = ("outgoing",)

    def __init__(self, vid, kind, lin_point):
        super().__init__(vid, kind, lin_point)
        self.external = True
        self.outgoing = {}

    def update_belief(self):
        return self.belief

    def message_to(self, factor_id) -> GaussianInfo:
        return self.outgoing.get(factor_id, GaussianInfo.zero(self.kind.dim))

    def relinearize(self) -> bool:
        return False


class MeasurementModel:
    """Measurement function h over a tuple of manifold points.

    `h(points)` returns the residual-space vector; `jacobian(points)`, when
    given, returns the stacked Jacobian w.r.t. right-perturbations of each
    point. Without it a central-difference Jacobian is used.
    """

    __slots__ = ("h", "jacobian", "out_dim")

    def __init__(self, h, out_dim: int, jacobian=None):
        self.h = h
        self.out_dim = out_dim
        self.jacobian = jacobian


def numeric_jacobian(h, points, out_dim: int, step: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian of h w.r.t. tangent perturbations."""
    total = sum(p.kind.dim for p in points)
    jac = np.empty((out_dim, total))
    col = 0
    for i, p in enumerate(points):
        for d in range(p.kind.dim):
            delta = np.zeros(p.kind.dim)
            delta[d] = step
            plus = list(points)
            minus = list(points)
            plus[i] = mf.right_plus(p, mf.TangentVector(p.kind, delta))
            minus[i] = mf.right_plus(p, mf.TangentVector(p.kind, -delta))
            jac[:, col] = (np.asarray(h(plus)) - np.asarray(h(minus))) / (2.0 * step)
            col += 1
    return jac


class FactorNode:
    __slots__ = (
        "id",
        "adjacent",
        "model",
        "z",
        "precision",
        "damping",
        "prev_messages",
        "skipped",
    )

    def __init__(self, fid, adjacent, model: MeasurementModel, z, sigma=None,
                 precision=None, damping: float = 0.0):
        self.id = fid
        self.adjacent = list(adjacent)
        self.model = model
        self.z = np.asarray(z, dtype=float).reshape(-1)
        if precision is None:
            sigma = np.asarray(sigma, dtype=float).reshape(-1)
            if np.any(sigma <= 0.0):
                raise ValueError("factor strengths must be positive")
            precision = np.diag(sigma ** -2.0)
        self.precision = np.asarray(precision, dtype=float)
        if self.z.shape[0] != model.out_dim:
            raise ValueError("observation dimension does not match measurement")
        if self.precision.shape[0] != model.out_dim:
            raise ValueError("precision dimension does not match measurement")
        self.damping = damping
        self.prev_messages = {}
        self.skipped = 0

    def set_sigma(self, sigma):
        sigma = np.asarray(sigma, dtype=float).reshape(-1)
        self.precision = np.diag(sigma ** -2.0)

    def linearize(self, variables):
        points = [v.lin_point for v in variables]
        residual = self.z - np.asarray(self.model.h(points))
        if self.model.jacobian is not None:
            jac = self.model.jacobian(points)
        else:
            jac = numeric_jacobian(self.model.h, points, self.model.out_dim)
        lam = jac.T @ self.precision @ jac
        eta = jac.T @ (self.precision @ residual)
        return eta, lam

    def compute_messages(self, variables) -> dict:
        """Messages to every adjacent variable; never raises on singular
        conditioning blocks (keeps the previous message and counts a skip)."""
        eta_f, lam_f = self.linearize(variables)
        dims = [v.kind.dim for v in variables]
        offsets = np.concatenate([[0], np.cumsum(dims)])
        if len(variables) == 1:
            msg = damped(
                GaussianInfo(eta_f, lam_f),
                self.prev_messages.get(variables[0].id),
                self.damping,
            )
            self.prev_messages[variables[0].id] = msg
            return {variables[0].id: msg}

        incoming = [v.message_to(self.id) for v in variables]
        out = {}
        for a, var in enumerate(variables):
            lo, hi = offsets[a], offsets[a + 1]
            keep = np.r_[lo:hi]
            drop = np.r_[0:lo, hi:offsets[-1]]
            eta = eta_f.copy()
            lam = lam_f.copy()
            for b, other in enumerate(variables):
                if b == a:
                    continue
                blo, bhi = offsets[b], offsets[b + 1]
                eta[blo:bhi] += incoming[b].eta
                lam[blo:bhi, blo:bhi] += incoming[b].lam
            laa = lam[np.ix_(keep, keep)]
            lab = lam[np.ix_(keep, drop)]
            lbb = lam[np.ix_(drop, drop)]
            try:
                sol = np.linalg.solve(lbb, np.column_stack([lab.T, eta[drop]]))
            except np.linalg.LinAlgError:
                try:
                    jitter = lbb + 1e-12 * np.eye(lbb.shape[0])
                    sol = np.linalg.solve(jitter, np.column_stack([lab.T, eta[drop]]))
                except np.linalg.LinAlgError:
                    self.skipped += 1
                    prev = self.prev_messages.get(var.id)
                    out[var.id] = prev if prev is not None else GaussianInfo.zero(
                        var.kind.dim
                    )
                    continue
            msg = GaussianInfo(
                eta[keep] - lab @ sol[:, -1], laa - lab @ sol[:, :-1]
            )
            if not np.all(np.isfinite(msg.eta)) or not np.all(np.isfinite(msg.lam)):
                self.skipped += 1
                prev = self.prev_messages.get(var.id)
                out[var.id] = prev if prev is not None else GaussianInfo.zero(
                    var.kind.dim
                )
                continue
            msg = damped(msg, self.prev_messages.get(var.id), self.damping)
            self.prev_messages[var.id] = msg
            out[var.id] = msg
        return out


class FactorGraph:
    """A collection of variables and factors with synchronous sweeps."""

    def __init__(self):
        self.variables = {}
        self.factors = {}

    def add_variable(self, var: VariableNode) -> VariableNode:
        if var.id in self.variables:
            raise ValueError(f"duplicate variable id {var.id!r}")
        self.variables[var.id] = var
        return var

    def add_factor(self, factor: FactorNode) -> FactorNode:
        if factor.id in self.factors:
            raise ValueError(f"duplicate factor id {factor.id!r}")
        for vid in factor.adjacent:
            if vid not in self.variables:
                raise ValueError(f"factor {factor.id!r} references unknown {vid!r}")
        self.factors[factor.id] = factor
        return factor

    def remove_factor(self, fid):
        factor = self.factors.pop(fid)
        for vid in factor.adjacent:
            var = self.variables.get(vid)
            if var is not None:
                var.inbox.pop(fid, None)
                if var.external:
                    var.outgoing.pop(fid, None)

    def remove_variable(self, vid):
        attached = [f.id for f in self.factors.values() if vid in f.adjacent]
        for fid in attached:
            self.remove_factor(fid)
        del self.variables[vid]

    def factors_of(self, vid):
        return [f for f in self.factors.values() if vid in f.adjacent]

    @property
    def skipped_messages(self) -> int:
        return sum(f.skipped for f in self.factors.values())

    def iterate(self, n: int = 1, relinearize: bool = True):
        """Run n synchronous sweeps: relinearize, all messages, all beliefs."""
        for _ in range(n):
            if relinearize:
                for var in self.variables.values():
                    var.relinearize()
            staged = []
            for factor in self.factors.values():
                nodes = [self.variables[vid] for vid in factor.adjacent]
                staged.append(factor.compute_messages(nodes))
            for factor, msgs in zip(self.factors.values(), staged):
                for vid, msg in msgs.items():
                    self.variables[vid].inbox[factor.id] = msg
            for var in self.variables.values():
                if not var.external:
                    var.update_belief()

    def solve_dense(self):
        """Dense joint solve at the current linearization points.

        Returns (means, covariances) per variable id, as tangent offsets from
        each lin_point mapped through the same linearization the message
        passing uses. Intended as a reference for tests and diagnostics.
        """
        vids = list(self.variables)
        dims = [self.variables[v].kind.dim for v in vids]
        offsets = dict(zip(vids, np.concatenate([[0], np.cumsum(dims)])[:-1]))
        total = sum(dims)
        eta = np.zeros(total)
        lam = np.zeros((total, total))
        for factor in self.factors.values():
            nodes = [self.variables[vid] for vid in factor.adjacent]
            eta_f, lam_f = factor.linearize(nodes)
            idx = np.concatenate(
                [
                    np.arange(offsets[v.id], offsets[v.id] + v.kind.dim)
                    for v in nodes
                ]
            )
            eta[idx] += eta_f
            lam[np.ix_(idx, idx)] += lam_f
        cov = np.linalg.inv(lam)
        mu = cov @ eta
        means = {}
        covs = {}
        for vid in vids:
            var = self.variables[vid]
            lo = offsets[vid]
            hi = lo + var.kind.dim
            means[vid] = mu[lo:hi]
            covs[vid] = cov[lo:hi, lo:hi]
        return means, covs
