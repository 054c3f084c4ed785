"""Best-of-N consensus on a continuous R^1 decision domain.

Discrete options map to [0, 1] through the quantization pair; negotiation
runs as ordinary Gaussian consensus over R^1 and the quantizer only extracts
the exhibited decision. `DiscreteConsensusNetwork` is a vectorized engine
for large static swarms that mirrors the per-robot window mechanics and the
one-exchange-per-timestep mailbox schedule of the full simulator.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class DecisionSpace:
    n_options: int

    def __post_init__(self):
        if self.n_options < 2:
            raise ValueError("need at least two options")

    def quantize(self, x: float) -> int:
        """floor(N_D * x), with x clamped to [0, 1) first."""
        x = min(max(float(x), 0.0), np.nextafter(1.0, 0.0))
        return min(int(np.floor(self.n_options * x)), self.n_options - 1)

    def dequantize(self, k: int) -> float:
        if not 0 <= k < self.n_options:
            raise ValueError(f"option {k} out of range [0, {self.n_options})")
        return k / self.n_options


@dataclass
class RobotDecisionInit:
    initial_decision: int
    is_seed: bool
    sigma_p: float


def init_discrete_experiment(n_robots: int, n_options: int, zeta: float,
                             seed_decision: int, rng: np.random.Generator,
                             sigma_p: float = 0.1,
                             sigma_p_seed: float = 1e-10):
    """Assign initial decisions; ceil(zeta * N) robots become seeds."""
    if not 0.0 <= zeta <= 1.0:
        raise ValueError("seed proportion must be in [0, 1]")
    space = DecisionSpace(n_options)
    if not 0 <= seed_decision < n_options:
        raise ValueError("seed decision out of range")
    n_seed = int(np.ceil(zeta * n_robots)) if zeta > 0 else 0
    seed_ids = set(rng.choice(n_robots, size=n_seed, replace=False).tolist())
    inits = []
    for i in range(n_robots):
        if i in seed_ids:
            inits.append(RobotDecisionInit(seed_decision, True, sigma_p_seed))
        else:
            inits.append(
                RobotDecisionInit(int(rng.integers(n_options)), False, sigma_p)
            )
    return inits


class DiscreteConsensusNetwork:
    """Vectorized scalar consensus over a static communication graph.

    Each robot holds a window of R^1 variables chained by temporal factors,
    with a prior on the oldest variable that is refreshed from the temporal
    marginal on every slide. Inter-robot factors couple newest variables and
    exchange messages once per timestep: every robot sees its neighbour's
    published contribution with one step of latency, matching the mailbox
    schedule of the full simulator (hosts ingest raw contributions, the
    other side ingests the host-computed factor message, both one step old).
    """

    def __init__(self, values, sigma_p, sigma_t, sigma_c: float, edges,
                 window: int = 1, slide_period: int = 1,
                 n_internal: int = 2):
        values = np.asarray(values, dtype=float)
        n = values.shape[0]
        self.n = n
        self.window = int(window)
        self.slide_period = int(slide_period)
        self.n_internal = int(n_internal)
        self.lam_t = np.broadcast_to(
            np.asarray(sigma_t, dtype=float) ** -2.0, (n,)
        ).copy()
        self.lam_c = float(sigma_c) ** -2.0
        lam_p = np.broadcast_to(np.asarray(sigma_p, dtype=float) ** -2.0, (n,)).copy()
        self.eta_p = lam_p * values
        self.lam_p = lam_p

        # temporal-factor messages, per chain link w in [0, window-2]:
        # up[w] flows into variable w (newer side), down[w] into w+1.
        links = max(self.window - 1, 0)
        self.up_eta = np.zeros((links, n))
        self.up_lam = np.zeros((links, n))
        self.down_eta = np.zeros((links, n))
        self.down_lam = np.zeros((links, n))

        edges = [(int(a), int(b)) for a, b in edges]
        src = [a for a, b in edges] + [b for a, b in edges]
        dst = [b for a, b in edges] + [a for a, b in edges]
        self.src = np.asarray(src, dtype=int)
        self.dst = np.asarray(dst, dtype=int)
        d = self.src.shape[0]
        self.rev = np.concatenate(
            [np.arange(d // 2) + d // 2, np.arange(d // 2)]
        )
        self.in_eta = np.zeros(d)
        self.in_lam = np.zeros(d)
        # per-directed-edge contribution of src toward the shared factor,
        # as published at the end of the previous step.
        self.out_eta = np.zeros(d)
        self.out_lam = np.zeros(d)
        self.t = 0
        # propagate the prior through the chain so newest variables start
        # with an informative belief centred on the initial value.
        for _ in range(self.window):
            self._internal_iteration()

    def _pair_message(self, lam_f, eta, lam):
        denom = lam_f + lam
        scale = np.where(denom > 0.0, lam_f / np.where(denom > 0, denom, 1.0), 0.0)
        return scale * eta, scale * lam

    def _edge_sums(self):
        eta = np.zeros(self.n)
        lam = np.zeros(self.n)
        np.add.at(eta, self.dst, self.in_eta)
        np.add.at(lam, self.dst, self.in_lam)
        return eta, lam

    def beliefs(self):
        """(eta, lam) of every robot's newest variable, plus chain beliefs."""
        edge_eta, edge_lam = self._edge_sums()
        w = self.window
        eta = np.zeros((w, self.n))
        lam = np.zeros((w, self.n))
        for i in range(w):
            if i == 0:
                eta[0] += edge_eta
                lam[0] += edge_lam
            if i > 0:
                eta[i] += self.down_eta[i - 1]
                lam[i] += self.down_lam[i - 1]
            if i < w - 1:
                eta[i] += self.up_eta[i]
                lam[i] += self.up_lam[i]
            if i == w - 1:
                eta[i] += self.eta_p
                lam[i] += self.lam_p
        return eta, lam

    def means(self):
        eta, lam = self.beliefs()
        with np.errstate(invalid="ignore", divide="ignore"):
            m = np.where(lam[0] > 0.0, eta[0] / np.where(lam[0] > 0, lam[0], 1.0), 0.0)
        return m

    def _internal_iteration(self):
        if self.window < 2:
            return
        eta, lam = self.beliefs()
        new_up_e = np.empty_like(self.up_eta)
        new_up_l = np.empty_like(self.up_lam)
        new_dn_e = np.empty_like(self.down_eta)
        new_dn_l = np.empty_like(self.down_lam)
        for w in range(self.window - 1):
            # v2f from the older side (variable w+1) drives up[w] and
            # vice versa; each excludes the factor's own message.
            e_old = eta[w + 1] - self.down_eta[w]
            l_old = lam[w + 1] - self.down_lam[w]
            new_up_e[w], new_up_l[w] = self._pair_message(self.lam_t, e_old, l_old)
            e_new = eta[w] - self.up_eta[w]
            l_new = lam[w] - self.up_lam[w]
            new_dn_e[w], new_dn_l[w] = self._pair_message(self.lam_t, e_new, l_new)
        self.up_eta, self.up_lam = new_up_e, new_up_l
        self.down_eta, self.down_lam = new_dn_e, new_dn_l

    def _slide(self):
        if self.window < 2:
            eta, lam = self.beliefs()
            self.eta_p, self.lam_p = self._pair_message(self.lam_t, eta[0], lam[0])
            return
        # marginal of the dropped oldest variable through its temporal factor
        # is a weakened copy of the old prior.
        self.eta_p, self.lam_p = self._pair_message(
            self.lam_t, self.eta_p, self.lam_p
        )
        # the new chain link immediately forwards the old newest variable's
        # chain message, so the new newest variable starts informative.
        up0_e, up0_l = self._pair_message(
            self.lam_t, self.up_eta[0], self.up_lam[0]
        )
        self.up_eta = np.vstack([up0_e, self.up_eta[:-1]])
        self.up_lam = np.vstack([up0_l, self.up_lam[:-1]])
        self.down_eta = np.vstack([np.zeros(self.n), self.down_eta[:-1]])
        self.down_lam = np.vstack([np.zeros(self.n), self.down_lam[:-1]])

    def step(self):
        # 1. refresh inter-robot messages from last step's publications.
        # out[d] is src's contribution on directed edge d = (src -> dst),
        # so the factor message into dst conditions on exactly that.
        if self.src.size:
            self.in_eta, self.in_lam = self._pair_message(
                self.lam_c, self.out_eta, self.out_lam
            )
        # 2. internal GBP iterations with frozen inter-robot messages. The
        # hosting (lower-id) side publishes the contribution it computed
        # during its last sweep, i.e. from beliefs one sweep earlier than
        # the final state; the other side publishes its final contribution.
        host_e = host_l = None
        for it in range(self.n_internal):
            if it == self.n_internal - 1 and self.src.size:
                eta, lam = self.beliefs()
                host_e = eta[0][self.src] - self.in_eta[self.rev]
                host_l = lam[0][self.src] - self.in_lam[self.rev]
            self._internal_iteration()
        # 3. publish outgoing contributions.
        if self.src.size:
            eta, lam = self.beliefs()
            full_e = eta[0][self.src] - self.in_eta[self.rev]
            full_l = lam[0][self.src] - self.in_lam[self.rev]
            host_dir = self.src < self.dst
            self.out_eta = np.where(host_dir, host_e, full_e)
            self.out_lam = np.where(host_dir, host_l, full_l)
        # 4. slide the windows.
        self.t += 1
        if self.slide_period > 0 and self.t % self.slide_period == 0:
            self._slide()

    def exhibited_decisions(self, space: DecisionSpace) -> np.ndarray:
        means = self.means()
        clamped = np.clip(means, 0.0, np.nextafter(1.0, 0.0))
        return np.minimum(
            np.floor(space.n_options * clamped).astype(int), space.n_options - 1
        )
