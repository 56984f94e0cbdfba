"""Transferable adversarial perturbations against density-map and point-regression crowd counters."""

from .config import GeneratorConfig, LossWeights, RunConfig, TrainConfig
from .data import Dataset, PointAnnotation, Scene, generate_dataset, generate_scene, load_dataset, render_density, save_dataset
from .errors import ConfigError, CrowdAttackError, DataError, NumericError, UsageError
from .generator import PerturbationGenerator, apply, generate
from .surrogate import ModelOutput, PointOutput, SurrogateModel, gradcam, train_surrogate

__version__ = "0.1.0"
