"""Deeply supervised flow-matching transformers with velocity refinement, at desk scale."""
from .network import DeepFlow, ModelConfig, param_count
from .training import TrainConfig, Trainer
from .sampling import SamplerConfig, sample
from .datasets import DatasetSpec, generate
from .config import RunConfig

__all__ = ["DeepFlow", "ModelConfig", "param_count", "TrainConfig", "Trainer", "SamplerConfig", "sample",
           "DatasetSpec", "generate", "RunConfig"]
