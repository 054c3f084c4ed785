"""Deterministic multi-robot simulation kernel.

Synchronous round model: every step all robots publish a presence record,
the communication graph is recomputed, inter-robot factors are reconciled
against the edge set, mailbox payloads from the previous step are ingested,
every robot runs its internal GBP iterations, publishes fresh payloads,
moves, slides its consensus window and updates its goal. Cross-robot reads
go only through presence/mailbox snapshots, so robots could be computed in
parallel between the barriers; single-threaded order is fixed by id.
"""
from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from . import manifold as mf
from .consensus import (
    ConsensusWindow,
    MarginalPriorFactor,
    make_consensus_factor,
)
from .discrete import DecisionSpace
from .gbp import ExternalVariable
from .planning import (
    STATE_DIM,
    PlanChain,
    make_collision_factor,
    wrap_state_residual,
)

_R6 = mf.rn(STATE_DIM)


def shared_factor_ownership(i, j):
    """The lower-id robot hosts factors shared between i and j."""
    if i == j:
        raise ValueError("a robot does not share factors with itself")
    return min(i, j)


def init_triangular_grid(n_robots: int, spacing: float, jitter: float,
                         rng: np.random.Generator,
                         min_distance: float = 5.0) -> np.ndarray:
    """Near-square triangular lattice with per-node uniform jitter.

    The jitter must be small enough to preserve the minimum inter-robot
    distance; the result is asserted.
    """
    if spacing < min_distance:
        raise ValueError(f"spacing {spacing} below minimum {min_distance}")
    if spacing - 2.0 * np.sqrt(2.0) * jitter < min_distance - 1e-9:
        raise ValueError("jitter too large to guarantee the minimum distance")
    cols = max(1, int(np.ceil(np.sqrt(n_robots))))
    pos = np.empty((n_robots, 2))
    row_h = spacing * np.sqrt(3.0) / 2.0
    for i in range(n_robots):
        r, c = divmod(i, cols)
        pos[i] = (c * spacing + (r % 2) * spacing / 2.0, r * row_h)
    if jitter > 0.0:
        pos += rng.uniform(-jitter, jitter, size=pos.shape)
    if n_robots > 1:
        dmin, _ = cKDTree(pos).query(pos, k=2)
        if dmin[:, 1].min() < min_distance - 1e-9:
            raise AssertionError("grid violates the minimum distance")
    return pos


class RobotAgent:
    """One robot: consensus window, optional planning chain / formation
    index / decision space, plus the mailbox-facing link bookkeeping."""

    def __init__(self, rid, kind, consensus_init, *, sigma_p, sigma_t,
                 sigma_c, window=3, slide_period=1, n_internal=2,
                 pose=None, plan: PlanChain | None = None,
                 formation=None, decision_space: DecisionSpace | None = None,
                 motion: str = "none", v_max: float = 2.0,
                 goal_radius: float = 2.0, sigma_r: float = 0.05,
                 d_min: float = 2.0, collision_damping: float = 0.25,
                 consensus_damping: float = 0.0,
                 use_occupancy: bool = True, r_n: float = 2.0):
        if motion not in ("none", "kinematic", "plan"):
            raise ValueError(f"unknown motion model {motion!r}")
        if motion == "plan" and plan is None:
            raise ValueError("plan motion requires a planning chain")
        self.id = rid
        self.kind = kind
        self.sigma_c = np.asarray(sigma_c, dtype=float).reshape(-1)
        self.n_internal = n_internal
        self.slide_period = slide_period
        self.cw = ConsensusWindow(rid, kind, consensus_init,
                                  sigma_p, sigma_t, length=window,
                                  slide_period=slide_period)
        self.plan = plan
        self.formation = formation
        self.decision_space = decision_space
        self.motion = motion
        self.v_max = v_max
        self.goal_radius = goal_radius
        self.sigma_r = sigma_r
        self.d_min = d_min
        self.collision_damping = collision_damping
        self.consensus_damping = consensus_damping
        self.use_occupancy = use_occupancy
        self.r_n = r_n
        self.goal = None
        if motion != "plan":
            if pose is None:
                pose = np.zeros(3)
            self.pose = np.asarray(pose, dtype=float).reshape(-1)[:3].copy()
        self.links = {}       # fid -> {"peer", "host", "ghost"}
        self.plan_links = {}  # fid -> {"peer", "host", "k", "ghost"}
        self._mem_seq = 0

    # -- state accessors ---------------------------------------------------

    @property
    def position(self) -> np.ndarray:
        if self.motion == "plan":
            return self.plan.position
        return self.pose[0:2].copy()

    def current_pose(self) -> np.ndarray:
        if self.motion == "plan":
            return self.plan.current_state[0:3]
        return self.pose.copy()

    def consensus_mean(self) -> mf.ManifoldPoint:
        return self.cw.newest.mean_point()

    def exhibited_decision(self) -> int:
        if self.decision_space is None:
            raise ValueError("robot has no decision space")
        point, _ = self.cw.current_belief()
        return self.decision_space.quantize(point.data[0])

    def presence(self) -> dict:
        """Broadcast record readable by current neighbours."""
        rec = {
            "position": self.position,
            "consensus_lin": self.cw.newest.lin_point.copy(),
        }
        if self.plan is not None:
            rec["plan_lins"] = [
                self.plan.state_var(k).lin_point.data.copy()
                for k in range(self.plan.n_states)
            ]
        return rec

    # -- factor lifecycle --------------------------------------------------

    def _consensus_fid(self, j):
        a, b = sorted((self.id, j))
        return ("fc", a, b)

    def _plan_fid(self, j, k):
        a, b = sorted((self.id, j))
        return ("fr", a, b, k)

    def sync_links(self, neighbor_ids, presence, plan_links: bool):
        """Create factors for new neighbours, drop factors for lost ones."""
        current = set(neighbor_ids)
        for fid, link in list(self.links.items()):
            if link["peer"] not in current:
                self._drop_consensus_link(fid, link)
        for fid, link in list(self.plan_links.items()):
            if link["peer"] not in current:
                self._drop_plan_link(fid, link)
        for j in sorted(current):
            fid = self._consensus_fid(j)
            if fid not in self.links:
                self._make_consensus_link(fid, j, presence[j])
            if plan_links and self.plan is not None:
                for k in range(1, self.plan.n_states):
                    pfid = self._plan_fid(j, k)
                    if pfid not in self.plan_links:
                        self._make_plan_link(pfid, j, k, presence[j])

    def _make_consensus_link(self, fid, j, peer_presence):
        host = shared_factor_ownership(self.id, j) == self.id
        # a reconnecting peer supersedes any memory prior left by its last
        # disconnect; keeping both would count the peer twice
        stale = [mid for mid in self.cw.graph.factors
                 if isinstance(mid, tuple) and mid[0] == "mem"
                 and mid[2] == j]
        for mid in stale:
            self.cw.graph.remove_factor(mid)
        if stale:
            for vid in self.cw.window:
                self.cw.graph.variables[vid].update_belief()
        ghost_id = None
        if host:
            ghost_id = ("GX", j)
            ghost = ExternalVariable(ghost_id, self.kind,
                                     peer_presence["consensus_lin"])
            self.cw.graph.add_variable(ghost)
            self.cw.graph.add_factor(
                make_consensus_factor(self.cw.newest, ghost, self.sigma_c,
                                      fid=fid,
                                      damping=self.consensus_damping)
            )
        self.links[fid] = {"peer": j, "host": host, "ghost": ghost_id}

    def _drop_consensus_link(self, fid, link):
        # the peer's last contribution becomes a static memory prior on the
        # newest variable, so the robot keeps its negotiated belief after
        # losing contact; the memory ages out through the window's
        # carried-prior marginalization as its variable is dropped
        newest = self.cw.newest
        last = newest.inbox.get(fid)
        if link["host"]:
            self.cw.graph.remove_variable(link["ghost"])
        for vid in self.cw.window:
            var = self.cw.graph.variables[vid]
            if fid in var.inbox:
                del var.inbox[fid]
                var.update_belief()
        if last is not None and np.any(last.lam):
            mem = MarginalPriorFactor(
                ("mem", self.id, link["peer"], self._mem_seq), newest,
                last, newest.lin_point,
            )
            self._mem_seq += 1
            self.cw.graph.add_factor(mem)
            newest.inbox[mem.id] = last.copy()
            newest.update_belief()
        del self.links[fid]

    def _make_plan_link(self, fid, j, k, peer_presence):
        host = shared_factor_ownership(self.id, j) == self.id
        ghost_id = None
        if host:
            ghost_id = ("PX", j, k)
            lin = mf.ManifoldPoint(_R6, peer_presence["plan_lins"][k])
            ghost = ExternalVariable(ghost_id, _R6, lin)
            self.plan.graph.add_variable(ghost)
            self.plan.graph.add_factor(
                make_collision_factor(self.plan.state_var(k), ghost,
                                      self.d_min, self.sigma_r, fid,
                                      damping=self.collision_damping)
            )
        self.plan_links[fid] = {"peer": j, "host": host, "k": k,
                                "ghost": ghost_id}

    def _drop_plan_link(self, fid, link):
        if link["host"]:
            self.plan.graph.remove_variable(link["ghost"])
        var = self.plan.state_var(link["k"])
        if fid in var.inbox:
            del var.inbox[fid]
            var.update_belief()
        del self.plan_links[fid]

    # -- mailbox exchange --------------------------------------------------

    def ingest(self, outboxes, neighbor_ids):
        current = set(neighbor_ids)
        for fid, link in self.links.items():
            if link["peer"] not in current:
                continue
            payload = outboxes.get(link["peer"], {}).get(("c", fid))
            if payload is None:
                continue
            msg, ref = payload
            if link["host"]:
                ghost = self.cw.graph.variables[link["ghost"]]
                ghost.lin_point = ref.copy()
                ghost.outgoing[fid] = msg.copy()
            else:
                var = self.cw.newest
                m = msg.copy()
                m.rebase(mf.right_minus(var.lin_point, ref).value)
                var.inbox[fid] = m
        for fid, link in self.plan_links.items():
            if link["peer"] not in current:
                continue
            payload = outboxes.get(link["peer"], {}).get(("p", fid))
            if payload is None:
                continue
            msg, ref = payload
            if link["host"]:
                ghost = self.plan.graph.variables[link["ghost"]]
                ghost.lin_point = mf.ManifoldPoint(_R6, ref)
                ghost.outgoing[fid] = msg.copy()
            else:
                var = self.plan.state_var(link["k"])
                m = msg.copy()
                m.rebase(wrap_state_residual(var.lin_point.data - ref))
                var.inbox[fid] = m

    def iterate(self):
        self.cw.graph.iterate(self.n_internal)
        if self.plan is not None:
            self.plan.iterate(self.n_internal)

    def publish(self) -> dict:
        out = {}
        for fid, link in self.links.items():
            if link["host"]:
                ghost = self.cw.graph.variables[link["ghost"]]
                msg = ghost.inbox.get(fid)
                if msg is not None:
                    out[("c", fid)] = (msg.copy(), ghost.lin_point.copy())
            else:
                var = self.cw.newest
                out[("c", fid)] = (var.message_to(fid).copy(),
                                   var.lin_point.copy())
        for fid, link in self.plan_links.items():
            if link["host"]:
                ghost = self.plan.graph.variables[link["ghost"]]
                msg = ghost.inbox.get(fid)
                if msg is not None:
                    out[("p", fid)] = (msg.copy(),
                                       ghost.lin_point.data.copy())
            else:
                var = self.plan.state_var(link["k"])
                out[("p", fid)] = (var.message_to(fid).copy(),
                                   var.lin_point.data.copy())
        return out

    # -- motion, sliding, goals -------------------------------------------

    def move(self, dt: float):
        if self.motion == "plan":
            self.plan.advance(dt)
        elif self.motion == "kinematic" and self.goal is not None:
            d = self.goal - self.pose[0:2]
            dist = np.hypot(d[0], d[1])
            if dist > 1e-12:
                step = min(self.v_max * dt, dist)
                self.pose[0:2] += d / dist * step
                self.pose[2] = np.arctan2(d[1], d[0])

    def slide(self):
        # detach inter-robot messages first: they are re-attached directly to
        # the new newest variable, so the temporal-chain message computed
        # inside the window slide must not also carry their information
        old = self.cw.newest
        moved = {}
        for fid in self.links:
            msg = old.inbox.pop(fid, None)
            if msg is not None:
                moved[fid] = msg
        if moved:
            old.update_belief()
        # a one-variable window drops the variable the hosted inter-robot
        # factors hang off; keep the factor objects and the peer contribution
        # parked on their ghosts so they can be re-attached afterwards
        hosted = {}
        for fid, link in self.links.items():
            if link["host"]:
                factor = self.cw.graph.factors[fid]
                ghost = self.cw.graph.variables[factor.adjacent[1]]
                hosted[fid] = (factor, ghost.outgoing.get(fid))
        new_var, old_newest = self.cw.slide()
        shift = mf.right_minus(new_var.lin_point, old_newest.lin_point).value
        for fid, link in self.links.items():
            msg = moved.get(fid)
            if link["host"]:
                factor, peer_msg = hosted[fid]
                factor.adjacent[0] = new_var.id
                if fid not in self.cw.graph.factors:
                    self.cw.graph.add_factor(factor)
                    if peer_msg is not None:
                        ghost = self.cw.graph.variables[factor.adjacent[1]]
                        ghost.outgoing[fid] = peer_msg
                prev = factor.prev_messages.pop(old_newest.id, None)
                if prev is not None:
                    # the factor may hand out the same object it keeps as
                    # its previous message; rebase each object exactly once
                    if prev is not msg:
                        prev.rebase(shift)
                    factor.prev_messages[new_var.id] = prev
            if msg is not None:
                msg.rebase(shift)
                new_var.inbox[fid] = msg
        old_newest.update_belief()
        new_var.update_belief()

    def update_goal(self, presence, neighbor_ids, rng, extent, r_c):
        if self.formation is not None:
            pose_belief, _ = self.cw.current_belief()
            self.formation.update_occupancy(
                pose_belief, self.position,
                [presence[j]["position"] for j in sorted(neighbor_ids)],
                self.r_n, r_c,
            )
            self.goal = self.formation.select_goal(
                pose_belief, self.position, use_occupancy=self.use_occupancy
            )
            if self.plan is not None:
                self.plan.set_goal(self.goal)
        elif self.motion == "kinematic":
            if self.goal is None or np.linalg.norm(
                self.goal - self.pose[0:2]
            ) < self.goal_radius:
                self.goal = rng.uniform(0.0, extent, size=2)
        elif self.motion == "plan":
            if self.goal is None or self.plan.goal_reached(self.goal_radius):
                self.goal = rng.uniform(0.0, extent, size=2)
            self.plan.set_goal(self.goal)


class World:
    """Simulation state and the synchronous per-step schedule."""

    def __init__(self, robots, r_c: float, dt: float = 0.1,
                 extent: float = 100.0, rng=None,
                 collision_links: bool = True):
        self.robots = sorted(robots, key=lambda r: r.id)
        ids = [r.id for r in self.robots]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate robot ids")
        self.by_id = {r.id: r for r in self.robots}
        self.r_c = float(r_c)
        self.dt = float(dt)
        self.extent = float(extent)
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.collision_links = collision_links
        self.t = 0
        self.outboxes = {r.id: {} for r in self.robots}

    def positions(self) -> np.ndarray:
        return np.array([r.position for r in self.robots])

    def comm_edges(self):
        """Unordered id pairs with inter-robot distance strictly below r_c."""
        pos = self.positions()
        edges = set()
        if len(self.robots) > 1:
            for a, b in cKDTree(pos).query_pairs(self.r_c):
                if np.linalg.norm(pos[a] - pos[b]) < self.r_c:
                    i, j = self.robots[a].id, self.robots[b].id
                    edges.add((min(i, j), max(i, j)))
        return edges

    def neighbor_map(self, edges=None):
        if edges is None:
            edges = self.comm_edges()
        nbrs = {r.id: set() for r in self.robots}
        for i, j in edges:
            nbrs[i].add(j)
            nbrs[j].add(i)
        return nbrs

    def step(self):
        presence = {r.id: r.presence() for r in self.robots}
        edges = self.comm_edges()
        nbrs = self.neighbor_map(edges)
        for r in self.robots:
            r.sync_links(nbrs[r.id], presence, self.collision_links)
        for r in self.robots:
            r.ingest(self.outboxes, nbrs[r.id])
        for r in self.robots:
            r.iterate()
        self.outboxes = {r.id: r.publish() for r in self.robots}
        for r in self.robots:
            r.move(self.dt)
        self.t += 1
        for r in self.robots:
            if r.slide_period > 0 and self.t % r.slide_period == 0:
                r.slide()
        for r in self.robots:
            r.update_goal(presence, nbrs[r.id], self.rng, self.extent,
                          self.r_c)
        return edges

    @property
    def skipped_messages(self) -> int:
        total = 0
        for r in self.robots:
            total += r.cw.graph.skipped_messages
            if r.plan is not None:
                total += r.plan.graph.skipped_messages
        return total


def continuous_converged(world: World, pos_tol: float = 0.1,
                         ang_tol: float = 0.01) -> bool:
    """Mean pairwise deviation of consensus belief means below tolerance."""
    means = [r.consensus_mean().data for r in world.robots]
    if len(means) < 2:
        raise ValueError("need at least two robots")
    pos_err = []
    ang_err = []
    for a in range(len(means)):
        for b in range(a + 1, len(means)):
            da = means[a]
            db = means[b]
            if da.shape[0] >= 2:
                pos_err.append(np.hypot(da[0] - db[0], da[1] - db[1]))
            else:
                pos_err.append(abs(da[0] - db[0]))
            ang_err.append(abs(mf.wrap_angle(da[-1] - db[-1]))
                           if world.robots[0].kind.name in ("SE2", "SO2")
                           else 0.0)
    return (float(np.mean(pos_err)) < pos_tol
            and float(np.mean(ang_err)) < ang_tol)


def discrete_converged(world: World) -> bool:
    decisions = {r.exhibited_decision() for r in world.robots}
    return len(decisions) == 1
