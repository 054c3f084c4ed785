"""Experiment configuration, execution and trace emission.

Three experiment modes share one flat config: `exploration-consensus`
(robots wander while negotiating a shared SE(2) parameter), `formation`
(robots negotiate a shape pose and drive to formation points) and
`discrete` (static swarm negotiating a best-of-N decision through the
vectorized scalar engine). Every trial is independently seeded from the
master seed; traces are plot-ready long-format CSV and are byte-identical
across runs with the same config and seed.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from scipy.spatial import cKDTree

from . import manifold as mf
from .discrete import (
    DecisionSpace,
    DiscreteConsensusNetwork,
    init_discrete_experiment,
)
from .formation import FormationIndex, formation_complete, load_shape
from .planning import PlanChain
from .sim import (
    RobotAgent,
    World,
    continuous_converged,
    init_triangular_grid,
)

MODES = ("exploration-consensus", "formation", "discrete")

TRACE_COLUMNS = [
    "trial", "t", "robot", "x", "y", "theta",
    "belief_x", "belief_y", "belief_theta", "decision",
    "mean_pos_dev", "mean_ang_dev", "converged", "n_edges", "min_dist",
]


@dataclass
class SwarmConfig:
    mode: str = "discrete"
    n_robots: int = 10
    r_c: float = 50.0
    dt: float = 0.1
    t_max: int | None = None      # default 1000 discrete, 5000 formation
    trials: int = 1
    seed: int = 0
    extent: float = 100.0
    # consensus layer
    window: int = 3
    slide_period: int = 1
    n_internal: int | None = None     # default 4 exploration / 2 otherwise
    sigma_p: list = field(default_factory=lambda: [10.0, 10.0, float(np.pi)])
    sigma_t: list | None = None       # default 0.1 * sigma_p
    sigma_c: float | list | None = None  # default 0.01*sigma_p / 0.5/N_D
    # discrete mode
    n_options: int = 4
    zeta: float = 0.0
    seed_decision: int = 0
    sigma_p_discrete: float = 0.1
    sigma_t_discrete: float = 0.2
    sigma_p_seed: float = 1e-10
    init_at_bin_center: bool = True
    grid_spacing: float = 5.5
    grid_jitter: float = 0.15
    grid_min_distance: float = 5.0
    # planning layer
    t_horizon: float = 1.5
    horizon_segments: int = 6
    sigma_d: float = 0.1
    sigma_u: float = 0.001
    sigma_r: float = 0.05
    sigma_anchor_start: float = 1e-6
    sigma_anchor_horizon: float = 0.1
    v_max: float = 2.0
    turn_radius: float = 2.0
    d_min: float = 2.0
    collision_damping: float = 0.25
    consensus_damping: float = 0.5
    unicycle_form: str = "corrected"
    # formation mode
    shape: str = "letter_a"
    r_n: float = 2.0
    r_s: float = 4.0
    r_r: float = 1.0
    tau0: float = 1e3
    use_occupancy: bool = True
    start_spacing: float = 3.0
    start_jitter: float = 0.15
    heading_jitter: float = 0.25
    # exploration mode
    goal_radius: float = 2.0
    # convergence criteria
    pos_tol: float = 0.1
    ang_tol: float = 0.01
    # tracing
    trace_stride: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.n_robots < 1:
            raise ValueError("n_robots must be positive")
        if self.trials < 1:
            raise ValueError("trials must be positive")
        if self.t_max is not None and self.t_max < 1:
            raise ValueError("t_max must be >= 1")
        if self.n_options < 2:
            raise ValueError("n_options must be >= 2")
        if not 0.0 <= self.zeta <= 1.0:
            raise ValueError("zeta must be in [0, 1]")
        if not 0 <= self.seed_decision < self.n_options:
            raise ValueError("seed_decision out of range")
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if self.unicycle_form not in ("corrected", "paper"):
            raise ValueError("unicycle_form must be 'corrected' or 'paper'")
        if self.trace_stride < 1:
            raise ValueError("trace_stride must be >= 1")
        for name in ("collision_damping", "consensus_damping"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ValueError(f"{name} must be in [0, 1)")
        for name in ("r_c", "dt", "extent", "t_horizon", "sigma_d",
                     "sigma_u", "sigma_r", "sigma_p_discrete", "sigma_p_seed",
                     "v_max", "turn_radius", "d_min", "r_n", "r_s", "r_r",
                     "grid_spacing", "start_spacing", "goal_radius",
                     "pos_tol", "ang_tol"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        sp = np.asarray(self.sigma_p, dtype=float)
        if np.any(sp <= 0):
            raise ValueError("sigma_p entries must be positive")

    # -- derived defaults --------------------------------------------------

    @property
    def omega_max(self) -> float:
        return self.v_max / self.turn_radius

    def effective_t_max(self) -> int:
        if self.t_max is not None:
            return self.t_max
        return 5000 if self.mode == "formation" else 1000

    def effective_n_internal(self) -> int:
        if self.n_internal is not None:
            return self.n_internal
        # sparse dynamic graphs need extra sweeps per step to absorb the
        # perturbation from newly created links before it can amplify
        return 4 if self.mode == "exploration-consensus" else 2

    def sigma_t_continuous(self) -> np.ndarray:
        if self.sigma_t is not None:
            return np.asarray(self.sigma_t, dtype=float)
        return 0.1 * np.asarray(self.sigma_p, dtype=float)

    def sigma_c_continuous(self) -> np.ndarray:
        if self.sigma_c is not None:
            return np.asarray(self.sigma_c, dtype=float).reshape(-1)
        return 0.01 * np.asarray(self.sigma_p, dtype=float)

    def sigma_c_discrete(self) -> float:
        if self.sigma_c is not None:
            return float(np.asarray(self.sigma_c, dtype=float).reshape(-1)[0])
        return 0.5 / self.n_options

    # -- serialization -----------------------------------------------------

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "SwarmConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, path) -> "SwarmConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def save_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)

    def with_overrides(self, overrides: dict) -> "SwarmConfig":
        data = self.to_dict()
        names = set(data)
        for key, value in overrides.items():
            if key not in names:
                raise ValueError(f"unknown config key {key!r}")
            data[key] = value
        return SwarmConfig.from_dict(data)


def parse_override(text: str):
    """Parse a 'key=value' CLI override; values use JSON syntax with a
    bare-string fallback."""
    if "=" not in text:
        raise ValueError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


# -- trace helpers ---------------------------------------------------------


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


class TraceWriter:
    def __init__(self, path):
        self._fh = open(path, "w", newline="")
        self._writer = csv.writer(self._fh)
        self._writer.writerow(TRACE_COLUMNS)

    def write(self, **fields):
        unknown = set(fields) - set(TRACE_COLUMNS)
        if unknown:
            raise ValueError(f"unknown trace fields: {sorted(unknown)}")
        self._writer.writerow(
            [_fmt(fields.get(col)) for col in TRACE_COLUMNS]
        )

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def mean_pairwise_abs(values: np.ndarray) -> float:
    """Mean over unordered pairs of |v_i - v_j| (O(n log n))."""
    v = np.sort(np.asarray(values, dtype=float))
    n = v.shape[0]
    if n < 2:
        return 0.0
    total = np.sum(v * (2.0 * np.arange(n) - n + 1.0))
    return float(total / (n * (n - 1) / 2.0))


def _pairwise_deviation(means):
    """Mean pairwise position / wrapped-heading deviation of SE(2) means."""
    arr = np.asarray(means, dtype=float)
    n = arr.shape[0]
    diff = arr[:, None, :] - arr[None, :, :]
    iu = np.triu_indices(n, k=1)
    pos = np.hypot(diff[..., 0][iu], diff[..., 1][iu])
    ang = np.abs(mf.wrap_angle(diff[..., 2][iu]))
    return float(pos.mean()), float(ang.mean())


def _min_pairwise_distance(positions) -> float:
    pos = np.asarray(positions, dtype=float)
    if pos.shape[0] < 2:
        return float("inf")
    d, _ = cKDTree(pos).query(pos, k=2)
    return float(d[:, 1].min())


# -- per-trial runners -----------------------------------------------------


def _trial_rng(config: SwarmConfig, trial: int) -> np.random.Generator:
    ss = np.random.SeedSequence(config.seed)
    return np.random.default_rng(ss.spawn(config.trials)[trial])


def run_discrete_trial(config: SwarmConfig, trial: int, trace=None) -> dict:
    rng = _trial_rng(config, trial)
    space = DecisionSpace(config.n_options)
    positions = init_triangular_grid(
        config.n_robots, config.grid_spacing, config.grid_jitter, rng,
        min_distance=config.grid_min_distance,
    )
    inits = init_discrete_experiment(
        config.n_robots, config.n_options, config.zeta,
        config.seed_decision, rng, sigma_p=config.sigma_p_discrete,
        sigma_p_seed=config.sigma_p_seed,
    )
    # non-seed priors sit at bin centres (a lower-edge prior sits exactly on
    # its decision boundary and flips on any downward nudge); seeds keep the
    # exact dequantized value they are steering the swarm toward.
    offset = 0.5 / config.n_options if config.init_at_bin_center else 0.0
    values = np.array([
        space.dequantize(i.initial_decision) + (0.0 if i.is_seed else offset)
        for i in inits
    ])
    sigma_p = np.array([i.sigma_p for i in inits])
    sigma_t = np.where(
        [i.is_seed for i in inits],
        0.1 * config.sigma_p_seed,
        config.sigma_t_discrete,
    )
    edges = []
    if config.n_robots > 1:
        tree = cKDTree(positions)
        for a, b in sorted(tree.query_pairs(config.r_c)):
            if np.linalg.norm(positions[a] - positions[b]) < config.r_c:
                edges.append((a, b))
    net = DiscreteConsensusNetwork(
        values, sigma_p, sigma_t, config.sigma_c_discrete(), edges,
        window=config.window, slide_period=config.slide_period,
        n_internal=config.effective_n_internal(),
    )
    t_max = config.effective_t_max()
    iterations = None
    seed_success = False
    converged_now = False
    for t in range(t_max + 1):
        decisions = net.exhibited_decisions(space)
        converged_now = bool(np.all(decisions == decisions[0]))
        at_seed = converged_now and decisions[0] == config.seed_decision
        if converged_now and iterations is None:
            iterations = t
        if at_seed and not seed_success:
            seed_success = True
            iterations = t
        # with seeds present, interim unanimity on another decision can
        # still be pulled over to the seed decision; keep running.
        done = at_seed if config.zeta > 0.0 else converged_now
        if trace is not None and (t % config.trace_stride == 0
                                  or done):
            means = net.means()
            dev = mean_pairwise_abs(means)
            for r in range(config.n_robots):
                trace.write(
                    trial=trial, t=t, robot=r,
                    x=positions[r, 0], y=positions[r, 1],
                    belief_x=means[r], decision=int(decisions[r]),
                    mean_pos_dev=dev, converged=converged_now,
                    n_edges=len(edges),
                )
        if done or t == t_max:
            break
        net.step()
    return {
        "trial": trial,
        "iterations": iterations if iterations is not None else t_max,
        "converged": iterations is not None,
        "seed_success": seed_success,
    }


def _make_exploration_world(config: SwarmConfig, rng) -> World:
    robots = []
    sigma_p = np.asarray(config.sigma_p, dtype=float)
    sigma_t = config.sigma_t_continuous()
    sigma_c = config.sigma_c_continuous()
    for i in range(config.n_robots):
        pos = rng.uniform(0.0, config.extent, size=2)
        guess = np.array([
            rng.uniform(0.0, config.extent),
            rng.uniform(0.0, config.extent),
            config.heading_jitter * rng.uniform(-np.pi, np.pi),
        ])
        robots.append(RobotAgent(
            i, mf.SE2, mf.ManifoldPoint(mf.SE2, guess),
            sigma_p=sigma_p, sigma_t=sigma_t, sigma_c=sigma_c,
            window=config.window, slide_period=config.slide_period,
            n_internal=config.effective_n_internal(),
            consensus_damping=config.consensus_damping,
            pose=np.array([pos[0], pos[1], 0.0]),
            motion="kinematic", v_max=config.v_max,
            goal_radius=config.goal_radius,
        ))
    return World(robots, config.r_c, dt=config.dt, extent=config.extent,
                 rng=rng, collision_links=False)


def run_exploration_trial(config: SwarmConfig, trial: int, trace=None) -> dict:
    rng = _trial_rng(config, trial)
    world = _make_exploration_world(config, rng)
    t_max = config.effective_t_max()
    iterations = None
    for t in range(t_max + 1):
        conv = continuous_converged(world, config.pos_tol, config.ang_tol)
        if conv and iterations is None:
            iterations = t
        if trace is not None and (t % config.trace_stride == 0 or conv):
            means = [r.consensus_mean().data for r in world.robots]
            pos_dev, ang_dev = _pairwise_deviation(means)
            n_edges = len(world.comm_edges())
            for r, m in zip(world.robots, means):
                p = r.current_pose()
                trace.write(
                    trial=trial, t=t, robot=r.id,
                    x=p[0], y=p[1], theta=p[2],
                    belief_x=m[0], belief_y=m[1], belief_theta=m[2],
                    mean_pos_dev=pos_dev, mean_ang_dev=ang_dev,
                    converged=conv, n_edges=n_edges,
                )
        if conv or t == t_max:
            break
        world.step()
    return {
        "trial": trial,
        "iterations": iterations if iterations is not None else t_max,
        "converged": iterations is not None,
    }


def _make_formation_world(config: SwarmConfig, rng):
    shape = load_shape(config.shape, min_spacing=config.r_s)
    n = len(shape)
    positions = init_triangular_grid(
        n, config.start_spacing, config.start_jitter, rng,
        min_distance=config.d_min,
    )
    positions = positions - positions.mean(axis=0) + config.extent / 2.0
    order = rng.permutation(n)
    sigma_p = np.asarray(config.sigma_p, dtype=float)
    sigma_t = config.sigma_t_continuous()
    sigma_c = config.sigma_c_continuous()
    robots = []
    for i in range(n):
        pos = positions[order[i]]
        heading = rng.uniform(-np.pi, np.pi)
        guess = np.array([
            pos[0], pos[1],
            config.heading_jitter * rng.uniform(-np.pi, np.pi),
        ])
        chain = PlanChain(
            i, np.array([pos[0], pos[1], heading]),
            horizon_time=config.t_horizon, n_segments=config.horizon_segments,
            sigma_d=config.sigma_d, sigma_u=config.sigma_u,
            sigma_anchor_start=config.sigma_anchor_start,
            sigma_anchor_horizon=config.sigma_anchor_horizon,
            v_max=config.v_max, omega_max=config.omega_max,
            unicycle_form=config.unicycle_form,
        )
        robots.append(RobotAgent(
            i, mf.SE2, mf.ManifoldPoint(mf.SE2, guess),
            sigma_p=sigma_p, sigma_t=sigma_t, sigma_c=sigma_c,
            window=config.window, slide_period=config.slide_period,
            n_internal=config.effective_n_internal(),
            consensus_damping=config.consensus_damping, plan=chain,
            formation=FormationIndex(shape, tau0=config.tau0),
            motion="plan", v_max=config.v_max, sigma_r=config.sigma_r,
            d_min=config.d_min, collision_damping=config.collision_damping,
            use_occupancy=config.use_occupancy, r_n=config.r_n,
        ))
    world = World(robots, config.r_c, dt=config.dt, extent=config.extent,
                  rng=rng, collision_links=True)
    return world, shape


def run_formation_trial(config: SwarmConfig, trial: int, trace=None) -> dict:
    rng = _trial_rng(config, trial)
    world, shape = _make_formation_world(config, rng)
    t_max = config.effective_t_max()
    iterations = None
    min_dist = float("inf")
    for t in range(t_max + 1):
        positions = world.positions()
        min_dist = min(min_dist, _min_pairwise_distance(positions))
        complete = formation_complete(
            shape, positions,
            [r.consensus_mean() for r in world.robots], config.r_r,
        )
        if complete and iterations is None:
            iterations = t
        if trace is not None and (t % config.trace_stride == 0 or complete):
            means = [r.consensus_mean().data for r in world.robots]
            pos_dev, ang_dev = _pairwise_deviation(means)
            n_edges = len(world.comm_edges())
            for r, m in zip(world.robots, means):
                p = r.current_pose()
                trace.write(
                    trial=trial, t=t, robot=r.id,
                    x=p[0], y=p[1], theta=p[2],
                    belief_x=m[0], belief_y=m[1], belief_theta=m[2],
                    mean_pos_dev=pos_dev, mean_ang_dev=ang_dev,
                    converged=complete, n_edges=n_edges, min_dist=min_dist,
                )
        if complete or t == t_max:
            break
        world.step()
    return {
        "trial": trial,
        "iterations": iterations if iterations is not None else t_max,
        "converged": iterations is not None,
        "min_distance": min_dist,
    }


_TRIAL_RUNNERS = {
    "discrete": run_discrete_trial,
    "exploration-consensus": run_exploration_trial,
    "formation": run_formation_trial,
}


# -- public entry points ---------------------------------------------------


def run_experiment(config: SwarmConfig, out_dir=None) -> dict:
    """Run `config.trials` independent trials; optionally write traces and
    a summary to out_dir. Returns the summary dict."""
    config.validate()
    runner = _TRIAL_RUNNERS[config.mode]
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
    results = []
    t0 = time.perf_counter()
    for trial in range(config.trials):
        trial_t0 = time.perf_counter()
        if out_dir is not None:
            path = os.path.join(out_dir, f"trace_trial{trial}.csv")
            with TraceWriter(path) as trace:
                result = runner(config, trial, trace=trace)
        else:
            result = runner(config, trial)
        result["wall_time"] = time.perf_counter() - trial_t0
        results.append(result)
    converged = [r for r in results if r["converged"]]
    summary = {
        "mode": config.mode,
        "config": config.to_dict(),
        "trials": results,
        "convergence_rate": len(converged) / len(results),
        "mean_iterations": (
            float(np.mean([r["iterations"] for r in converged]))
            if converged else None
        ),
        "wall_time_total": time.perf_counter() - t0,
    }
    if config.mode == "discrete":
        summary["seed_success_rate"] = (
            sum(r["seed_success"] for r in results) / len(results)
        )
    if out_dir is not None:
        with open(os.path.join(out_dir, "summary.json"), "w") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True)
    return summary


def sweep(config: SwarmConfig, axis: str, values, out_dir=None) -> list:
    """Cross-product sweep over one numeric config field.

    Returns long-format rows [{axis, value, trial, iterations, converged}];
    writes sweep.csv when out_dir is given.
    """
    names = {f.name for f in dataclasses.fields(SwarmConfig)}
    if axis not in names:
        raise ValueError(
            f"unknown sweep axis {axis!r}; valid axes: {sorted(names)}"
        )
    rows = []
    for value in values:
        cfg = config.with_overrides({axis: value})
        summary = run_experiment(cfg)
        for r in summary["trials"]:
            rows.append({
                "axis": axis, "value": value, "trial": r["trial"],
                "iterations": r["iterations"],
                "converged": r["converged"],
            })
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "sweep.csv"), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["axis", "value", "trial", "iterations",
                             "converged"])
            for row in rows:
                writer.writerow([
                    row["axis"], _fmt(row["value"]), row["trial"],
                    row["iterations"], _fmt(row["converged"]),
                ])
    return rows


def seed_robot_study(config: SwarmConfig, zetas, out_dir=None) -> list:
    """For each seed proportion, the percentage of trials where every robot
    exhibits the seed decision within t_max."""
    if config.mode != "discrete":
        raise ValueError("seed study requires discrete mode")
    rows = []
    for zeta in zetas:
        cfg = config.with_overrides({"zeta": zeta})
        summary = run_experiment(cfg)
        successes = [r["seed_success"] for r in summary["trials"]]
        iters = [r["iterations"] for r in summary["trials"]
                 if r["seed_success"]]
        rows.append({
            "zeta": zeta,
            "pct_converged": 100.0 * sum(successes) / len(successes),
            "mean_iterations": float(np.mean(iters)) if iters else None,
        })
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "seeds.csv"), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["zeta", "pct_converged", "mean_iterations"])
            for row in rows:
                writer.writerow([
                    _fmt(row["zeta"]), _fmt(row["pct_converged"]),
                    _fmt(row["mean_iterations"]),
                ])
    return rows
