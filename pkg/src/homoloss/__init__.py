"""Homography loss over ground-plane correspondences for monocular 3D boxes.

Ground-truth image points and predicted BEV points of all objects in a scene
are tied together by one plane-to-plane homography; its fit residual couples
every object's position to every other's.
"""

from .errors import (
    DegenerateConfiguration,
    DivergedRun,
    GenerationExhausted,
    HomolossError,
    IllConditionedGradient,
    NonPositiveDepth,
    ParseError,
    VanishingHomogeneousScale,
)
from .geometry import (
    Box3D,
    CameraModel,
    backproject,
    bottom_points,
    kitti_camera,
    make_camera,
    project_point,
    project_points,
    stack_bottom_points,
)
from .homography import HomographySolve, apply_homography, estimate_homography, estimate_homography_backward
from .loss import (
    TYPE1,
    TYPE2,
    LossConfig,
    LossReport,
    SceneSample,
    homography_loss,
    projection_loss,
    regression_loss,
    replicated_homography_loss,
    smooth_l1,
    total_loss,
)
from .metrics import DepthBinnedReport, binned_errors, rotated_bev_iou
from .scene_sim import (
    NoiseModel,
    OptimRun,
    OptimSpec,
    Policy,
    ProposalSet,
    SceneGenParams,
    generate_scene,
    make_proposals,
    optimize,
    perturb,
    select_representative,
)

__version__ = "0.1.0"
