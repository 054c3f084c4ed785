"""Distributed swarm consensus via Gaussian belief propagation on
Lie-group factor graphs, with a deterministic multi-robot simulator."""

from . import manifold
from .consensus import (
    ConsensusWindow,
    MarginalPriorFactor,
    make_consensus_factor,
    make_prior_factor,
    make_temporal_factor,
)
from .discrete import (
    DecisionSpace,
    DiscreteConsensusNetwork,
    RobotDecisionInit,
    init_discrete_experiment,
)
from .formation import (
    FormationIndex,
    ShapeSpec,
    formation_complete,
    load_shape,
    mean_pose,
)
from .gbp import (
    ExternalVariable,
    FactorGraph,
    FactorNode,
    GaussianInfo,
    MeasurementModel,
    VariableNode,
)
from .harness import SwarmConfig, run_experiment, seed_robot_study, sweep
from .planning import PlanChain
from .sim import (
    RobotAgent,
    World,
    continuous_converged,
    discrete_converged,
    init_triangular_grid,
    shared_factor_ownership,
)

__version__ = "0.1.0"
