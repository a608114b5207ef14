"""Tree search over factored action spaces with learned, state-conditioned
action abstraction.

A structure-inference network learns which sub-actions matter in each latent
state, jointly with a masked latent dynamics model trained by reconstruction.
The search prunes irrelevant sub-action dimensions node by node, shrinking the
branching factor; with masks forced to all-ones the engine is a standard
MuZero-style agent.
"""

from .actions import (
    AbstractAction,
    AbstractionMask,
    BranchingCapError,
    FactoredAction,
    FactoredActionSpace,
    InvalidDistributionError,
    encode_action,
    encode_action_masked,
    enumerate_abstract_actions,
    marginalize_prior,
    project,
    unfold_distribution,
)
from .envs import CmabEnv, GridKeyConfig, GridKeyEnv, make_env
from .metrics import EvalReport, bootstrap_ci, evaluate, normalized_score, search_space_reduction, shd
from .models import Model, ModelConfig, deterministic_mask, sample_mask
from .nn import AdamW, MLP, NumericFaultError, ParamTensor, gumbel_sigmoid_st
from .search import SearchConfig, SearchResult, act, run_search, run_search_reference
from .training import Episode, ReplayBuffer, TrainConfig, TrajectoryStep, collect_episode, run_training, train_step

__all__ = [
    "AbstractAction",
    "AbstractionMask",
    "AdamW",
    "BranchingCapError",
    "CmabEnv",
    "Episode",
    "EvalReport",
    "FactoredAction",
    "FactoredActionSpace",
    "GridKeyConfig",
    "GridKeyEnv",
    "InvalidDistributionError",
    "MLP",
    "Model",
    "ModelConfig",
    "NumericFaultError",
    "ParamTensor",
    "ReplayBuffer",
    "SearchConfig",
    "SearchResult",
    "TrainConfig",
    "TrajectoryStep",
    "act",
    "bootstrap_ci",
    "collect_episode",
    "deterministic_mask",
    "encode_action",
    "encode_action_masked",
    "enumerate_abstract_actions",
    "evaluate",
    "gumbel_sigmoid_st",
    "make_env",
    "marginalize_prior",
    "normalized_score",
    "project",
    "run_search",
    "run_search_reference",
    "run_training",
    "sample_mask",
    "search_space_reduction",
    "shd",
    "train_step",
    "unfold_distribution",
]
