"""Lie group arithmetic for R^n, SO(2) and SE(2).

Points and tangent vectors are thin wrappers around numpy arrays tagged with
the group they belong to. All operations are pure functions; angles are
always stored wrapped to (-pi, pi]. Adding another group (e.g. SE(3)) only
requires extending the dispatch tables here.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Below this angle the closed-form sin(t)/t and (1-cos(t))/t coefficients
# switch to 4th-order Taylor expansions (error < 1e-17).
_SMALL_ANGLE = 1e-4


class KindMismatchError(ValueError):
    """Raised when operands live on different manifolds."""


@dataclass(frozen=True)
class ManifoldKind:
    """Identifies one of the supported groups and its tangent dimension."""

    name: str  # "Rn", "SO2" or "SE2"
    dim: int

    def __repr__(self):
        if self.name == "Rn":
            return f"Rn({self.dim})"
        return self.name


SO2 = ManifoldKind("SO2", 1)
SE2 = ManifoldKind("SE2", 3)


def rn(n: int) -> ManifoldKind:
    return ManifoldKind("Rn", n)


R1 = rn(1)


@dataclass
class ManifoldPoint:
    kind: ManifoldKind
    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=float).reshape(-1)
        if self.data.shape[0] != self.kind.dim:
            raise ValueError(
                f"point data of length {self.data.shape[0]} for kind {self.kind}"
            )
        if self.kind.name in ("SO2", "SE2"):
            self.data[-1] = wrap_angle(self.data[-1])

    def copy(self) -> "ManifoldPoint":
        return ManifoldPoint(self.kind, self.data.copy())


@dataclass
class TangentVector:
    kind: ManifoldKind
    value: np.ndarray

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=float).reshape(-1)
        if self.value.shape[0] != self.kind.dim:
            raise ValueError(
                f"tangent vector of length {self.value.shape[0]} for kind {self.kind}"
            )


def wrap_angle(theta):
    """Wrap an angle (or array of angles) to (-pi, pi]."""
    return np.pi - np.mod(np.pi - theta, 2.0 * np.pi)


def _check_kinds(a: ManifoldPoint, b: ManifoldPoint):
    if a.kind != b.kind:
        raise KindMismatchError(f"kind mismatch: {a.kind} vs {b.kind}")


def identity(kind: ManifoldKind) -> ManifoldPoint:
    return ManifoldPoint(kind, np.zeros(kind.dim))


def _exp_coeffs(theta: float):
    """Coefficients A = sin(t)/t and B = (1-cos(t))/t, Taylor near zero."""
    if abs(theta) < _SMALL_ANGLE:
        t2 = theta * theta
        a = 1.0 - t2 / 6.0 + t2 * t2 / 120.0
        b = theta / 2.0 - theta * t2 / 24.0
    else:
        a = np.sin(theta) / theta
        b = (1.0 - np.cos(theta)) / theta
    return a, b


def compose(a: ManifoldPoint, b: ManifoldPoint) -> ManifoldPoint:
    """Group product a . b."""
    _check_kinds(a, b)
    k = a.kind
    if k.name == "Rn":
        return ManifoldPoint(k, a.data + b.data)
    if k.name == "SO2":
        return ManifoldPoint(k, np.array([wrap_angle(a.data[0] + b.data[0])]))
    # SE2
    c, s = np.cos(a.data[2]), np.sin(a.data[2])
    x = c * b.data[0] - s * b.data[1] + a.data[0]
    y = s * b.data[0] + c * b.data[1] + a.data[1]
    return ManifoldPoint(k, np.array([x, y, wrap_angle(a.data[2] + b.data[2])]))


def inverse(a: ManifoldPoint) -> ManifoldPoint:
    k = a.kind
    if k.name == "Rn":
        return ManifoldPoint(k, -a.data)
    if k.name == "SO2":
        return ManifoldPoint(k, np.array([wrap_angle(-a.data[0])]))
    c, s = np.cos(a.data[2]), np.sin(a.data[2])
    x = -(c * a.data[0] + s * a.data[1])
    y = -(-s * a.data[0] + c * a.data[1])
    return ManifoldPoint(k, np.array([x, y, wrap_angle(-a.data[2])]))


def exp(v: TangentVector) -> ManifoldPoint:
    k = v.kind
    if k.name == "Rn":
        return ManifoldPoint(k, v.value.copy())
    if k.name == "SO2":
        return ManifoldPoint(k, np.array([wrap_angle(v.value[0])]))
    rx, ry, theta = v.value
    a, b = _exp_coeffs(theta)
    return ManifoldPoint(
        k, np.array([a * rx - b * ry, b * rx + a * ry, wrap_angle(theta)])
    )


def log(p: ManifoldPoint) -> TangentVector:
    k = p.kind
    if k.name == "Rn":
        return TangentVector(k, p.data.copy())
    if k.name == "SO2":
        return TangentVector(k, p.data.copy())
    x, y, theta = p.data
    a, b = _exp_coeffs(theta)
    d = a * a + b * b
    return TangentVector(k, np.array([(a * x + b * y) / d, (-b * x + a * y) / d, theta]))


def right_plus(a: ManifoldPoint, v: TangentVector) -> ManifoldPoint:
    """a . Exp(v): retraction of a tangent step onto the manifold."""
    if a.kind != v.kind:
        raise KindMismatchError(f"kind mismatch: {a.kind} vs {v.kind}")
    return compose(a, exp(v))


def right_minus(a: ManifoldPoint, b: ManifoldPoint) -> TangentVector:
    """Manifold difference Log(b^-1 . a), a tangent vector at b."""
    _check_kinds(a, b)
    k = a.kind
    if k.name == "Rn":
        return TangentVector(k, a.data - b.data)
    if k.name == "SO2":
        return TangentVector(k, np.array([wrap_angle(a.data[0] - b.data[0])]))
    return log(compose(inverse(b), a))


def act(pose: ManifoldPoint, p) -> np.ndarray:
    """Apply an SE(2) pose to a 2D point: R(theta) p + t."""
    if pose.kind.name != "SE2":
        raise KindMismatchError(f"act requires SE2 pose, got {pose.kind}")
    p = np.asarray(p, dtype=float)
    c, s = np.cos(pose.data[2]), np.sin(pose.data[2])
    return np.array(
        [c * p[0] - s * p[1] + pose.data[0], s * p[0] + c * p[1] + pose.data[1]]
    )


def left_jacobian(v: TangentVector) -> np.ndarray:
    """Left Jacobian Jl(v), so Exp(v + d) ~ Exp(Jl d) . Exp(v)."""
    k = v.kind
    if k.name in ("Rn", "SO2"):
        return np.eye(k.dim)
    rx, ry, theta = v.value
    a, b = _exp_coeffs(theta)
    if abs(theta) < _SMALL_ANGLE:
        t2 = theta * theta
        one_minus_a = theta / 6.0 - theta * t2 / 120.0  # (1 - A)/theta
        b_over = 0.5 - t2 / 24.0  # B/theta
    else:
        one_minus_a = (1.0 - a) / theta
        b_over = b / theta
    w0 = rx * one_minus_a + ry * b_over
    w1 = -rx * b_over + ry * one_minus_a
    return np.array([[a, -b, w0], [b, a, w1], [0.0, 0.0, 1.0]])


def right_jacobian(v: TangentVector) -> np.ndarray:
    """Right Jacobian Jr(v) = Jl(-v)."""
    return left_jacobian(TangentVector(v.kind, -v.value))


def inv_right_jacobian(v: TangentVector) -> np.ndarray:
    k = v.kind
    if k.name in ("Rn", "SO2"):
        return np.eye(k.dim)
    j = right_jacobian(v)
    vi = np.linalg.inv(j[:2, :2])
    out = np.eye(3)
    out[:2, :2] = vi
    out[:2, 2] = -vi @ j[:2, 2]
    return out


def inv_left_jacobian(v: TangentVector) -> np.ndarray:
    return inv_right_jacobian(TangentVector(v.kind, -v.value))
