"""Shape formation: canonical shape storage, occupancy weighting and
distance-occupancy goal selection.

Formation points live in a canonical frame; each robot transforms between
that frame and the world using its current consensus pose. Every point
carries an occupancy weight stored as a third Euclidean coordinate, so a
nearest-neighbour query in 3D trades metres against recently-observed
occupancy.
"""
from __future__ import annotations

from dataclasses import dataclass
from importlib import resources

import numpy as np
from scipy.spatial import cKDTree

from . import manifold as mf

BUNDLED_SHAPES = ("letter_a", "letter_r", "exclaim", "wifi", "smiley")


@dataclass
class ShapeSpec:
    points: np.ndarray  # (N_F, 2), metres, canonical frame
    min_spacing: float

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 2)
        if len(self.points) == 0:
            raise ValueError("shape has no points")
        if len(self.points) > 1:
            d = np.linalg.norm(
                self.points[:, None, :] - self.points[None, :, :], axis=-1
            )
            np.fill_diagonal(d, np.inf)
            if d.min() < self.min_spacing - 1e-9:
                raise ValueError(
                    f"formation points closer than min spacing "
                    f"({d.min():.3f} < {self.min_spacing})"
                )

    def __len__(self):
        return len(self.points)


def load_shape(path_or_name, min_spacing: float = 4.0) -> ShapeSpec:
    """Load a shape file (one 'x y' pair per line, metres).

    Bundled shape names (letter_a, wifi, ...) resolve to packaged files.
    """
    name = str(path_or_name)
    if name in BUNDLED_SHAPES:
        text = (
            resources.files(__package__).joinpath(f"shapes/{name}.txt").read_text()
        )
    else:
        with open(name) as fh:
            text = fh.read()
    rows = []
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ValueError(f"bad shape line: {line!r}")
        rows.append((float(parts[0]), float(parts[1])))
    return ShapeSpec(np.array(rows), min_spacing)


class FormationIndex:
    """Augmented formation points with occupancy weights and a KD-tree.

    The tree spans (q_x, q_y, tau) and is rebuilt whenever weights change;
    shapes are small enough that rebuilding beats incremental updates.
    """

    def __init__(self, shape: ShapeSpec, tau0: float = 1e3):
        self.points = shape.points.copy()
        self.tau0 = float(tau0)
        self.tau = np.zeros(len(self.points))
        self._tree = None

    def _canonical(self, pose: mf.ManifoldPoint, position) -> np.ndarray:
        return mf.act(mf.inverse(pose), np.asarray(position, dtype=float))

    def update_occupancy(self, pose: mf.ManifoldPoint, self_position,
                         neighbor_positions, r_n: float, r_c: float):
        """One occupancy sweep given world-frame robot positions.

        Points near a neighbour are marked occupied (tau0); unoccupied points
        within the robot's comms radius are cleared; everything else decays
        by one.
        """
        occupied = np.zeros(len(self.points), dtype=bool)
        for npos in neighbor_positions:
            q = self._canonical(pose, npos)
            occupied |= (
                np.linalg.norm(self.points - q[None, :], axis=1) < r_n
            )
        own = self._canonical(pose, self_position)
        visible = np.linalg.norm(self.points - own[None, :], axis=1) < r_c
        decay = ~occupied & ~visible
        self.tau[occupied] = self.tau0
        self.tau[~occupied & visible] = 0.0
        self.tau[decay] = np.maximum(0.0, self.tau[decay] - 1.0)
        self._tree = None

    def _augmented(self) -> np.ndarray:
        return np.column_stack([self.points, self.tau])

    def nearest(self, query3) -> int:
        """Index of the nearest augmented point; ties break to the lowest
        point index."""
        aug = self._augmented()
        if self._tree is None:
            self._tree = cKDTree(aug)
        dist, idx = self._tree.query(np.asarray(query3, dtype=float))
        near = self._tree.query_ball_point(np.asarray(query3, dtype=float),
                                           dist + 1e-12)
        if len(near) > 1:
            d = np.linalg.norm(aug[near] - np.asarray(query3)[None, :], axis=1)
            best = d.min()
            idx = min(i for i, di in zip(near, d) if di <= best + 1e-12)
        return int(idx)

    def select_goal(self, pose: mf.ManifoldPoint, self_position,
                    use_occupancy: bool = True) -> np.ndarray:
        """World-frame planning goal: nearest formation point in the
        (position, occupancy) metric."""
        own = self._canonical(pose, self_position)
        if use_occupancy:
            idx = self.nearest(np.array([own[0], own[1], 0.0]))
        else:
            d = np.linalg.norm(self.points - own[None, :], axis=1)
            idx = int(np.argmin(d))
        return mf.act(pose, self.points[idx])


def mean_pose(poses) -> mf.ManifoldPoint:
    """Tangent-space mean of a list of poses (iterated right-minus average)."""
    poses = list(poses)
    base = poses[0].copy()
    for _ in range(8):
        offsets = np.mean(
            [mf.right_minus(p, base).value for p in poses], axis=0
        )
        base = mf.right_plus(base, mf.TangentVector(base.kind, offsets))
        if np.linalg.norm(offsets) < 1e-10:
            break
    return base


def formation_complete(shape: ShapeSpec, robot_positions, consensus_poses,
                       r_r: float) -> bool:
    """True when every transformed formation point has a robot within r_r."""
    pose = mean_pose(consensus_poses)
    world_points = np.array([mf.act(pose, q) for q in shape.points])
    positions = np.asarray(robot_positions, dtype=float).reshape(-1, 2)
    for q in world_points:
        if np.min(np.linalg.norm(positions - q[None, :], axis=1)) >= r_r:
            return False
    return True
