"""Input-adaptive depth aggregation on a toy multimodal transformer."""

from .backbone import Backbone, BackboneConfig, TokenSequence
from .depth_agg import AggregatorConfig, DepthAggregator, format_millions, param_count
from .harness import AdapterConfig, Experiment, Metrics, TrainConfig, finetune, run_tax
from .numeric import BACKEND, Tensor
from .tasks import TaskSpec, generate

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "AdapterConfig",
    "AggregatorConfig",
    "Backbone",
    "BackboneConfig",
    "DepthAggregator",
    "Experiment",
    "Metrics",
    "TaskSpec",
    "Tensor",
    "TokenSequence",
    "TrainConfig",
    "finetune",
    "format_millions",
    "generate",
    "param_count",
    "run_tax",
]
