"""Desk-scale lab for robust offline RL via sequence modeling.

Pipeline: generate offline datasets from toy control environments, corrupt
them (random or adversarial attacks on states/actions/rewards), train DT/RDT
policies plus BC/RBC baselines, and evaluate under clean or perturbed
observations.
"""

from .corruption import CorruptionSpec, PerturbSpec, corrupt, perturb_observation
from .data import OfflineDataset, SequenceBatch, Trajectory, load_dataset, save_dataset
from .envs import EnvSpec, EvalReport, evaluate, generate_dataset, make_env_spec
from .model import ModelConfig
from .oracle import OracleBundle, OracleConfig, train_oracle
from .training import ErrorStats, TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "CorruptionSpec", "PerturbSpec", "corrupt", "perturb_observation",
    "OfflineDataset", "SequenceBatch", "Trajectory", "load_dataset", "save_dataset",
    "EnvSpec", "EvalReport", "evaluate", "generate_dataset", "make_env_spec",
    "ModelConfig", "OracleBundle", "OracleConfig", "train_oracle",
    "ErrorStats", "TrainConfig", "train",
]
