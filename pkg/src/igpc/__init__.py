"""Iterative planning under adversarial disturbances: iterative GPC, the
nested online-learning game, ILC-style baselines, and a planning-regret oracle."""

from .config import ExperimentConfig, load_config
from .costs import QuadraticCost
from .disturbances import DisturbanceModel
from .dynamics import (
    ConfigError,
    DimensionError,
    DivergedRolloutError,
    LinearSystem,
    NonlinearSystem,
    PerturbedSystem,
    RolloutRecord,
    rollout,
    step,
)
from .environments import Environment, make_environment
from .gpc import GPCParams, gpc_loss, gpc_loss_grad, gpc_rollout
from .nested import OGD, nested_run, planning_regret_nested
from .outer import IGPCConfig, igpc_run, outer_gradient
from .planner import LineSearch, iterative_planner, lqr_tv_solve
from .policies import AffineGainPolicy, DACPolicy, OpenLoopPlan, project_spectral
from .regret import comparator_solve, planning_regret

__version__ = "0.1.0"
