"""Scene-flow toolkit: geometry, warping, cost volumes, losses, rigid refinement, metrics and synthetic scenes."""
from .core import DegenerateGeometryError, RigidTransform, StereoCamera, se3_exp, se3_log
from .costvol import correlation_1d, correlation_2d
from .loss import LossInputs, LossReport, LossWeights, pretrain_supervised, total_semi_supervised
from .metrics import MetricReport, evaluate_scene_flow
from .rigid import GnOptions, GnTrace, build_rigid_mask, gn_jacobian, gn_solve, refine_scene_flow
from .synth import Plane, SceneSpec, driving_scene, render_scene
from .warp import forward_warp_disparity, inverse_warp_flow, rigid_flow

__version__ = "0.1.0"
