"""Planning and closed-loop control for dual-arm DLO manipulation."""

from .dlo_model import (
    DloParams,
    ProjectionSettings,
    StableConfig,
    config_distance,
    energy,
    energy_gradient,
    interpolate_config,
    project_stable_config,
)
from .geometry import (
    Box,
    Capsule,
    Scene,
    Sphere,
    dlo_in_collision,
    segment_clearance,
    signed_distance,
)
from .kinematics import (
    ArmModel,
    EndEffectorState,
    arm_jacobian,
    forward_kinematics,
    grasp_map,
    inverse_kinematics,
)
from .planner import PlannerSettings, PlanNode, PlanPath, PlanningModels, plan, smooth_path
from .controller import (
    ControllerGains,
    DloJacobianEstimator,
    ExecutionSettings,
    execute_path,
    mpc_step,
)
from .simulator import MismatchSpec, SimWorld
from .harness import TaskSpec, load_task, run_benchmark, run_task

__version__ = "0.1.0"

__all__ = [
    "ArmModel",
    "Box",
    "Capsule",
    "ControllerGains",
    "DloJacobianEstimator",
    "DloParams",
    "EndEffectorState",
    "ExecutionSettings",
    "MismatchSpec",
    "PlanNode",
    "PlanPath",
    "PlannerSettings",
    "PlanningModels",
    "ProjectionSettings",
    "Scene",
    "SimWorld",
    "Sphere",
    "StableConfig",
    "TaskSpec",
    "arm_jacobian",
    "config_distance",
    "dlo_in_collision",
    "energy",
    "energy_gradient",
    "execute_path",
    "forward_kinematics",
    "grasp_map",
    "interpolate_config",
    "inverse_kinematics",
    "load_task",
    "mpc_step",
    "plan",
    "project_stable_config",
    "run_benchmark",
    "run_task",
    "segment_clearance",
    "signed_distance",
    "smooth_path",
]
