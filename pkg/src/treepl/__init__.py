"""Two-pass semi-supervised tree species classification on hyperspectral
and laser-scanning rasters, with co-occurrence priors for pseudo-labels."""

from .cohabitation import CohabitationMatrix, ScaledPrior, build_prior, load_matrix
from .dsnn import DualStreamNet, NetworkConfig, init_model, predict_proba, train
from .errors import FormatError, NumericalError, TreeplError, ValidationError
from .geodata import RasterCube, load_cube, save_cube
from .metrics import evaluate, jaccard_maps
from .pipeline import ExperimentConfig, SceneData, run_two_pass
from .pseudolabel import FusionConfig, build_augmented_set, distance_weight, select_best_parent
from .synthscene import SceneConfig, benchmark_config, generate_scene
from .treetops import TreetopConfig, find_treetops

__version__ = "0.1.0"

__all__ = [
    "CohabitationMatrix", "ScaledPrior", "build_prior", "load_matrix",
    "DualStreamNet", "NetworkConfig", "init_model", "predict_proba", "train",
    "FormatError", "NumericalError", "TreeplError", "ValidationError",
    "RasterCube", "load_cube", "save_cube",
    "evaluate", "jaccard_maps",
    "ExperimentConfig", "SceneData", "run_two_pass",
    "FusionConfig", "build_augmented_set", "distance_weight", "select_best_parent",
    "SceneConfig", "benchmark_config", "generate_scene",
    "TreetopConfig", "find_treetops",
]
