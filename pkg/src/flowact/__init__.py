"""flowact: action-constrained RL with normalizing-flow action mappings.

The package covers the full pipeline: uniform sampling from feasible action
sets (rejection, hard-wall HMC, decision-diagram sampling for integer
constraints), conditional RealNVP training with a mollified-uniform latent
distribution, and DDPG whose policy output passes through the frozen flow
with analytic gradients and a projection fallback.
"""

__version__ = "0.1.0"

from .autodiff import AdamState, DivergenceError, Mlp, Tensor
from .constraints import (
    AffineSet,
    AllocEq,
    Ball,
    BoxOnly,
    ConstraintSet,
    HingeSum,
    ProjectionError,
    WeightedL1,
    constraint_from_config,
)
from .diagram import (
    BitEncoding,
    CompileBudgetError,
    DiagramManager,
    PbConstraint,
    Psdd,
    all_actions,
    compile_allocation,
    sample_actions,
)
from .envs import BikeShare, InfeasibleActionError, PointReach, WeightedLimit, env_from_config
from .flow import FlowModel, MollifiedUniform, load_flow, save_flow
from .rl import (
    DdpgConfig,
    ReplayBuffer,
    ViolationLedger,
    act,
    actor_update,
    critic_update,
    soft_update,
    train_run,
)
from .samplers import (
    HmcConfig,
    SampleDataset,
    SamplingError,
    hmc_sample,
    load_dataset,
    rejection_sample,
    save_dataset,
)

__all__ = [
    "AdamState", "DivergenceError", "Mlp", "Tensor",
    "AffineSet", "AllocEq", "Ball", "BoxOnly", "ConstraintSet", "HingeSum",
    "ProjectionError", "WeightedL1", "constraint_from_config",
    "BitEncoding", "CompileBudgetError", "DiagramManager", "PbConstraint",
    "Psdd", "all_actions", "compile_allocation", "sample_actions",
    "BikeShare", "InfeasibleActionError", "PointReach", "WeightedLimit",
    "env_from_config",
    "FlowModel", "MollifiedUniform", "load_flow", "save_flow",
    "DdpgConfig", "ReplayBuffer", "ViolationLedger", "act", "actor_update",
    "critic_update", "soft_update", "train_run",
    "HmcConfig", "SampleDataset", "SamplingError", "hmc_sample",
    "load_dataset", "rejection_sample", "save_dataset",
]
