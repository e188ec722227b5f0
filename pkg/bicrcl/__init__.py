"""
bicrcl - replay-free class-incremental learning with a conservative and a
radical learner, analytic ridge classifiers and KL-gated fused inference
"""

from .analytic import AnalyticConfig, ProjectionHead, SuffStats
from .backbone import AdapterSet, BackboneConfig, FrozenBackbone
from .config import ExperimentConfig, StreamConfig, validate_config
from .engine import BiCRCL
from .errors import CRCLError
from .experiment import run_experiment
from .inference import FusionConfig
from .learners import ConsolidationConfig, TrainConfig
from .stream import Dataset, TaskData, TaskSpec, TaskStream, load_dataset, split_tasks

__version__ = "0.1.0"

__all__ = [
    "AdapterSet", "AnalyticConfig", "BackboneConfig", "BiCRCL", "ConsolidationConfig",
    "CRCLError", "Dataset", "ExperimentConfig", "FrozenBackbone", "FusionConfig",
    "ProjectionHead", "StreamConfig", "SuffStats", "TaskData", "TaskSpec", "TaskStream",
    "TrainConfig", "load_dataset", "run_experiment", "split_tasks", "validate_config",
]
