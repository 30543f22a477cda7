"""Semivariogram-guided reweighting of contrastive losses for image geolocalization."""

from .dataset import Dataset, SyntheticSpec, generate_synthetic, load_binary, save_binary, split
from .encoders import DualEncoder, EncoderDims, load_checkpoint, save_checkpoint
from .evalretrieval import EvalReport, build_gallery, evaluate, evaluate_encoder
from .geodesy import GeoCoord, equal_earth_project, haversine_km
from .reweighting import ReweightConfig, weight, weight_matrix
from .semivariogram import EmpiricalVariogram, SphericalModel, estimate_empirical, fit_spherical
from .training import TrainConfig, info_nce, reweighted_info_nce, train

__version__ = "0.1.0"

__all__ = [
    "Dataset", "SyntheticSpec", "generate_synthetic", "load_binary", "save_binary", "split",
    "DualEncoder", "EncoderDims", "load_checkpoint", "save_checkpoint",
    "EvalReport", "build_gallery", "evaluate", "evaluate_encoder",
    "GeoCoord", "equal_earth_project", "haversine_km",
    "ReweightConfig", "weight", "weight_matrix",
    "EmpiricalVariogram", "SphericalModel", "estimate_empirical", "fit_spherical",
    "TrainConfig", "info_nce", "reweighted_info_nce", "train",
]
