"""Scene flow on sparse permutohedral lattices."""

from .bclops import SignalMatrix, Tape, epe3d
from .data import CameraModel, ScenePair, SceneSpec, gen_scene, preprocess, read_pair, write_pair
from .lattice import ScaleSchedule, build_feature_map, build_point_lattice, enclosing_simplex, elevate
from .metrics import MetricReport, compute_metrics
from .model import NetworkConfig, SceneFlowNet, ablation_variant, read_checkpoint, train, write_checkpoint

__all__ = [
    "SignalMatrix", "Tape", "epe3d",
    "CameraModel", "ScenePair", "SceneSpec", "gen_scene", "preprocess", "read_pair", "write_pair",
    "ScaleSchedule", "build_feature_map", "build_point_lattice", "enclosing_simplex", "elevate",
    "MetricReport", "compute_metrics",
    "NetworkConfig", "SceneFlowNet", "ablation_variant", "read_checkpoint", "train", "write_checkpoint",
]

__version__ = "0.1.0"
