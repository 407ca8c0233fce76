"""Loop closing for keyframe-based visual SLAM with explicit parallelism.

Detection (place candidates, Sim3 estimation and verification), correction
(pose propagation, map-point fusion) and essential-graph optimisation, run on a
deterministic worker runtime, plus a synthetic world and benchmark harness.
"""

from .geometry import CameraIntrinsics, SE3Pose, Sim3Transform, sim3_compose, sim3_exp, sim3_inverse, sim3_log
from .loop_correct import apply_fusion, plan_fusion, propagate_correction
from .loop_detect import LoopDetectConfig, LoopDetection, detect_loop
from .mapcore import KeyFrame, Map, MapConfig, MapPoint
from .pipeline import PipelineConfig, run_pipeline
from .posegraph import PoseGraphEdge, PoseGraphVertex, build_essential_problem, optimize, recover
from .runtime import BatchJob, Runtime, TaskPair
from .trajectory import compute_ate
from .world import SyntheticWorld, SyntheticWorldConfig, generate_world

__version__ = "0.1.0"
