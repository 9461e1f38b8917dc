"""Single-image 3D face shape fitting.

Pipeline: a bilinear identity/expression shape model, scaled-orthographic
pose solves, landmark-based initialization, and a cascade of ridge
regressors over joint HOG + landmark-displacement features, plus
synthetic data generation, scan-based ground-truth preparation, and
RMSE/MAE/CED evaluation.
"""

from .camera import CameraPose, nearest_rotation, project, solve_pose
from .cascade import (
    CascadeRegressor,
    FitResult,
    RegressorStage,
    TrainingSample,
    fit_image,
    load_cascade,
    ridge_fit,
    save_cascade,
    train,
)
from .dataprep import PointCloud, RigidTransform3D, icp_fit, procrustes3d
from .errors import (
    DegenerateGeometryError,
    FaceFitError,
    FingerprintMismatchError,
    FormatError,
    NumericalRankError,
    VersionError,
)
from .features import (
    FeatureVector,
    HogConfig,
    Image,
    extract_patch,
    hog_descriptor,
    joint_feature,
    landmark_displacement,
    load_image,
    save_pgm,
)
from .kernels import BACKEND as KERNEL_BACKEND
from .landmarks import (
    FitConfig,
    LandmarkSet,
    fit_objective,
    init_pose,
    landmark_fit,
    solve_params_given_pose,
)
from .metrics import (
    RegionMask,
    aggregate_by_class,
    ced,
    center_mask,
    mae,
    rmse_z,
    whole_mask,
)
from .model import (
    BilinearModel,
    Shape,
    ShapeParams,
    landmark_positions,
    load_model,
    mean_params,
    save_model,
    save_obj,
    shape_basis_exp,
    shape_basis_id,
    synthesize,
    vertex_position,
)
from .synth import SynthConfig, generate_dataset, load_dataset, make_synthetic_model, render, sample_ground_truth

__version__ = "0.1.0"
