"""Meta-learned DVFS governors for simulated heterogeneous device fleets.

Pipeline: metadata catalogs -> simulated device/application environments ->
offline branched Q-learning with liquid time-constant backbones -> similarity
driven task forests -> meta-training and fast adaptation -> evaluation.
"""

from .metadata import CombinationKey, MetadataRecord, load_catalog
from .qlearner import LtcQNetwork, QPolicy, TrainConfig, fqe_q_value, train_on_dataset
from .simenv import Dataset, DvfsEnv, EnvSpec, generate_env, rollout, schedutil_policy
from .taskforest import QProtocol, TaskForest, build_forest
from .maml import MetaConfig, fast_adapt, meta_train, select_task

__version__ = "0.1.0"

__all__ = [
    "CombinationKey",
    "Dataset",
    "DvfsEnv",
    "EnvSpec",
    "LtcQNetwork",
    "MetaConfig",
    "MetadataRecord",
    "QPolicy",
    "QProtocol",
    "TaskForest",
    "TrainConfig",
    "build_forest",
    "fast_adapt",
    "fqe_q_value",
    "generate_env",
    "load_catalog",
    "meta_train",
    "rollout",
    "schedutil_policy",
    "select_task",
    "train_on_dataset",
]
