"""Point-cloud 6-DOF object pose estimation toolkit.

Per-keypoint prediction of class, box-point offsets and confidence, then
voting, rigid alignment and ICP refinement, with a synthetic labeled-scene
generator and an ADD/ADD-S evaluation harness.
"""

from .cloud import (GroupedSample, PointCloud, SpatialIndex, estimate_normals,
                    farthest_point_sampling, group_neighbors, random_sampling)
from .decode import (BoxHypothesis, DecodeConfig, IcpConfig, PoseEstimate,
                     decode, icp_refine, nms, reconstruct_hypotheses,
                     solve_pose, voxel_vote)
from .geometry import (Aabb, ControlPoints, RigidTransform, TriMesh,
                       fit_control_points, kabsch_align, model_diameter,
                       transform_points)
from .metrics import (EvalConfig, ModelInfo, SceneResult, Scoreboard,
                      add_metric, adds_metric, is_correct, score_dataset,
                      threshold_sweep)
from .network import (ConfidenceParams, EncoderParams, KeypointTargets,
                      LossWeights, Prediction, backward, build_targets,
                      confidence_target, forward, init_params, multitask_loss,
                      oracle_predictor, train)
from .scenegen import (CameraModel, LabeledScene, SceneSpec, generate_dataset,
                       render_depth, sample_layout)

__version__ = "0.1.0"
