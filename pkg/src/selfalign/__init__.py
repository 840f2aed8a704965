"""Desk-scale diffusion-transformer training with self-alignment of internal
representations, plus the samplers and representation diagnostics needed to
inspect what the auxiliary objective does."""

__version__ = "0.1.0"

from .alignment import AlignConfig
from .backbone import DiffusionTransformer, ModelConfig, preset_config
from .config import RunConfig, resolve_run_config
from .data import ShapesDataset, generate_shapes
from .diagnostics import ProbeConfig, frechet_gaussian_distance, linear_probe, pca_project
from .process import DENOISE, FLOW, NoiseSchedule, TimeSpec, linear_beta_schedule, make_interpolant
from .sampler import SampleConfig, sample_state
from .trainer import TrainConfig, TrainerState, load_checkpoint, save_checkpoint, train_loop

__all__ = [
    "AlignConfig",
    "DiffusionTransformer",
    "ModelConfig",
    "preset_config",
    "RunConfig",
    "resolve_run_config",
    "ShapesDataset",
    "generate_shapes",
    "ProbeConfig",
    "frechet_gaussian_distance",
    "linear_probe",
    "pca_project",
    "FLOW",
    "DENOISE",
    "NoiseSchedule",
    "TimeSpec",
    "linear_beta_schedule",
    "make_interpolant",
    "SampleConfig",
    "sample_state",
    "TrainConfig",
    "TrainerState",
    "load_checkpoint",
    "save_checkpoint",
    "train_loop",
]
