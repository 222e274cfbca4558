"""Multi-resolution super learner for voxel-wise classification."""

from mrsl.data import Dataset, SubjectImage, Voxel, derive_labels, standardize_coordinates
from mrsl.experiment import ExperimentConfig, format_summary, run_experiment, summarize
from mrsl.rng import derive_seed, make_rng
from mrsl.simgen import (
    MaternParams,
    ShapeSpec,
    SimConfig,
    matern_cov,
    preset,
    preset_names,
    sample_gp,
    simulate_binary_dataset,
    simulate_ordinal_dataset,
)
from mrsl.smoothing import nw_smooth, select_bandwidth
from mrsl.stacking import SuperLearnerConfig, predict_superlearner, train_superlearner

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "SubjectImage",
    "Voxel",
    "derive_labels",
    "standardize_coordinates",
    "derive_seed",
    "make_rng",
    "MaternParams",
    "ShapeSpec",
    "SimConfig",
    "matern_cov",
    "preset",
    "preset_names",
    "sample_gp",
    "simulate_binary_dataset",
    "simulate_ordinal_dataset",
    "nw_smooth",
    "select_bandwidth",
    "SuperLearnerConfig",
    "train_superlearner",
    "predict_superlearner",
    "ExperimentConfig",
    "run_experiment",
    "summarize",
    "format_summary",
    "__version__",
]
