"""Absolute-scale estimation for monocular reconstructions with a two-camera rig."""

__version__ = "0.1.0"

from .ba import BAConfig, BAProblem, Landmark, optimize, triangulate
from .dataset import Dataset, GridGroundTruth, load_dataset, save_dataset
from .evaluate import EvalReport, Stage, estimated_distance, evaluate, relative_error
from .geometry import (
    Algorithm,
    Intrinsics,
    NormalizedPoint,
    PairCoefficients,
    PairObservation,
    RelativePose,
    RigidTransform,
    compose,
    essential_matrix,
    invert,
    normalize,
    pair_coefficients,
    relative_pose,
)
from .simulate import (
    GridConfig,
    SceneConfig,
    SyntheticScene,
    TrialStats,
    baseline_sweep,
    generate_scene,
    grid_dataset,
    run_trials,
)
from .solver import (
    ScaleEstimate,
    SolverConfig,
    StereoRig,
    reject_outliers,
    solve_scale,
    solve_scale_robust,
)

__all__ = [
    "Algorithm",
    "BAConfig",
    "BAProblem",
    "Dataset",
    "EvalReport",
    "GridConfig",
    "GridGroundTruth",
    "Intrinsics",
    "Landmark",
    "NormalizedPoint",
    "PairCoefficients",
    "PairObservation",
    "RelativePose",
    "RigidTransform",
    "ScaleEstimate",
    "SceneConfig",
    "SolverConfig",
    "Stage",
    "StereoRig",
    "SyntheticScene",
    "TrialStats",
    "baseline_sweep",
    "compose",
    "essential_matrix",
    "estimated_distance",
    "evaluate",
    "generate_scene",
    "grid_dataset",
    "invert",
    "load_dataset",
    "normalize",
    "optimize",
    "pair_coefficients",
    "reject_outliers",
    "relative_error",
    "relative_pose",
    "run_trials",
    "save_dataset",
    "solve_scale",
    "solve_scale_robust",
    "triangulate",
]
