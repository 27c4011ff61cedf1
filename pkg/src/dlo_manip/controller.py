"""Closed-loop tracking of a planned path with a one-step MPC.

The controller servoes the DLO and arms along the planned nodes. Each step
solves a small quadratic program over the joint velocity: attractive
potentials toward the current target node, linearized repulsive potentials
away from nearby obstacles, an input penalty, an optional end-effector DoF
constraint, and a velocity-norm bound. The DLO Jacobian that links gripper
motion to feature motion is estimated online by recursive least squares
seeded from a rigid-attachment prior (or supplied by the plant as a
finite-difference oracle for isolation tests).
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Optional

import numpy as np
from scipy.linalg import null_space

from . import kinematics as kin
from .dlo_model import config_distance
from .geometry import Scene, signed_distance_batch
from .kinematics import ArmModel
from .planner import PlanPath
from .simulator import SimWorld

log = logging.getLogger(__name__)

REPULSION_DISTANCE_FLOOR = 1e-3
"""Clearances below this are clamped before inverting, bounding 1/c."""


@dataclass(frozen=True)
class ControllerGains:
    attract_dlo: float = 10.0
    repel_dlo: float = 1e-3
    attract_arm: float = 1.0
    repel_arm: float = 1e-3
    input_weight: Optional[np.ndarray] = None  # K_u; None means identity
    max_speed: float = 0.5  # bound on the K_u-norm of the input, rad/s
    dt: float = 0.1
    influence_distance: float = 0.1

    def __post_init__(self):
        for name in ("attract_dlo", "repel_dlo", "attract_arm", "repel_arm"):
            if getattr(self, name) < 0.0:
                raise ValueError(f"{name} must be >= 0")
        if self.max_speed <= 0.0 or self.dt <= 0.0 or self.influence_distance <= 0.0:
            raise ValueError("max_speed, dt, influence_distance must be > 0")
        if self.input_weight is not None:
            Ku = np.asarray(self.input_weight, dtype=float)
            if Ku.ndim != 2 or Ku.shape[0] != Ku.shape[1]:
                raise ValueError("input_weight must be square")
            if not np.allclose(Ku, Ku.T, atol=1e-10):
                raise ValueError("input_weight must be symmetric")
            if np.any(np.linalg.eigvalsh(Ku) <= 0.0):
                raise ValueError("input_weight must be positive definite")
            object.__setattr__(self, "input_weight", Ku)

    def input_weight_matrix(self, n: int) -> np.ndarray:
        if self.input_weight is None:
            return np.eye(n)
        if self.input_weight.shape[0] != n:
            raise ValueError("input_weight size does not match the joint count")
        return self.input_weight


@dataclass(frozen=True)
class ExecutionSettings:
    switch_threshold: float = 0.05  # config distance for advancing the node index
    stuck_speed: float = 1e-3  # rad/s; inputs below this count toward "stuck"
    stuck_window: int = 20  # consecutive slow steps before declaring stuck
    success_threshold: float = 0.01  # final configuration error for "done"
    replan_limit: int = 3
    max_steps: int = 3000

    def __post_init__(self):
        if min(self.switch_threshold, self.stuck_speed, self.success_threshold) <= 0.0:
            raise ValueError("thresholds must be > 0")
        if self.stuck_window <= 0 or self.max_steps <= 0 or self.replan_limit < 0:
            raise ValueError("window, step, and replan budgets must be nonnegative")


def attractive_potential_dlo(x, x_d) -> float:
    """Half squared distance between current and desired DLO configurations."""
    x = np.asarray(x, dtype=float)
    x_d = np.asarray(x_d, dtype=float)
    if x.shape != x_d.shape:
        raise ValueError("configuration shapes differ")
    diff = (x - x_d).ravel()
    return 0.5 * float(diff @ diff)


def attractive_potential_arm(q, q_d) -> float:
    """Half squared distance between current and desired joint vectors."""
    q = np.asarray(q, dtype=float).ravel()
    q_d = np.asarray(q_d, dtype=float).ravel()
    if q.shape != q_d.shape:
        raise ValueError("joint vector shapes differ")
    diff = q - q_d
    return 0.5 * float(diff @ diff)


def _repulsion_values_and_slopes(clearances: np.ndarray, influence: float):
    """Potential value and d/dc slope per clearance, with the 1/c floor.

    The value uses the clearance clamped to the floor, so it stays bounded in
    penetration; the slope is evaluated at the clamped clearance, keeping an
    outward push there even though the clamped value is flat.
    """
    c = np.maximum(clearances, REPULSION_DISTANCE_FLOOR)
    inside = c < influence
    inv = np.zeros_like(c)
    inv[inside] = 1.0 / c[inside] - 1.0 / influence
    values = 0.5 * inv**2
    slopes = np.zeros_like(c)
    slopes[inside] = -inv[inside] / (c[inside] ** 2)
    return values, slopes


def repulsive_potential_point(scene: Scene, p, influence: float) -> float:
    """Repulsion of one point: ``0.5 (1/c - 1/influence)^2`` inside the influence band."""
    if influence <= 0.0:
        raise ValueError("influence distance must be > 0")
    d, _ = signed_distance_batch(scene, np.asarray(p, dtype=float).reshape(1, 3))
    values, _ = _repulsion_values_and_slopes(d, influence)
    return float(values[0])


def repulsive_potential_dlo(scene: Scene, x, influence: float) -> tuple[float, np.ndarray]:
    """Summed feature repulsion and its gradient with respect to ``x``."""
    x = np.asarray(x, dtype=float)
    d, g = signed_distance_batch(scene, x)
    values, slopes = _repulsion_values_and_slopes(d, influence)
    return float(values.sum()), slopes[:, None] * g


def repulsive_potential_arm(
    scene: Scene, q, model: ArmModel, influence: float
) -> tuple[float, np.ndarray]:
    """Summed control-point repulsion and its gradient with respect to ``q``."""
    points = kin.control_point_positions(model, q)
    d, g = signed_distance_batch(scene, points)
    values, slopes = _repulsion_values_and_slopes(d, influence)
    grad_q = np.zeros(model.dof)
    if np.any(slopes != 0.0):
        jac = kin.control_point_jacobians(model, q)
        for i in np.nonzero(slopes)[0]:
            grad_q += slopes[i] * (jac[i].T @ g[i])
    return float(values.sum()), grad_q


@dataclass(frozen=True)
class DloJacobianEstimate:
    matrix: np.ndarray  # (3m, 12)
    update_count: int
    last_residual: float


def rigid_prior_jacobian(num_features: int) -> np.ndarray:
    """Rigid-attachment prior: grasped ends follow their gripper, interior
    features interpolate linearly between the two grippers."""
    m = num_features
    J = np.zeros((3 * m, kin.TWIST_DIM))
    weights = np.linspace(0.0, 1.0, m)
    for k in range(m):
        J[3 * k : 3 * k + 3, 0:3] = (1.0 - weights[k]) * np.eye(3)
        J[3 * k : 3 * k + 3, 6:9] = weights[k] * np.eye(3)
    return J


class DloJacobianEstimator:
    """Recursive least squares over observed (gripper twist, feature motion) pairs."""

    def __init__(
        self,
        num_features: int,
        forgetting: float = 0.99,
        prior_covariance: float = 1e3,
        min_motion: float = 1e-6,
    ):
        if not 0.0 < forgetting <= 1.0:
            raise ValueError("forgetting factor must be in (0, 1]")
        self.num_features = num_features
        self.forgetting = forgetting
        self.min_motion = min_motion
        self.matrix = rigid_prior_jacobian(num_features)
        self.covariance = prior_covariance * np.eye(kin.TWIST_DIM)
        self.update_count = 0
        self.last_residual = 0.0

    def update(self, d_twist, d_x) -> None:
        """Fold one observed increment pair into the estimate."""
        r = np.asarray(d_twist, dtype=float).reshape(kin.TWIST_DIM)
        dx = np.asarray(d_x, dtype=float).reshape(-1)
        if dx.size != 3 * self.num_features:
            raise ValueError("feature increment size mismatch")
        if np.linalg.norm(r) < self.min_motion:
            return
        residual = dx - self.matrix @ r
        Pr = self.covariance @ r
        gain = Pr / (self.forgetting + float(r @ Pr))
        self.matrix = self.matrix + np.outer(residual, gain)
        self.covariance = (self.covariance - np.outer(gain, Pr)) / self.forgetting
        self.update_count += 1
        self.last_residual = float(np.linalg.norm(residual))

    @property
    def estimate(self) -> DloJacobianEstimate:
        return DloJacobianEstimate(self.matrix.copy(), self.update_count, self.last_residual)


def estimate_dlo_jacobian(
    history: Iterable[tuple[np.ndarray, np.ndarray]],
    num_features: int,
    forgetting: float = 0.99,
    prior_covariance: float = 1e3,
) -> DloJacobianEstimate:
    """Run the recursive estimator over a recorded increment history."""
    estimator = DloJacobianEstimator(num_features, forgetting, prior_covariance)
    for d_twist, d_x in history:
        estimator.update(d_twist, d_x)
    return estimator.estimate


def mpc_step(
    x,
    q,
    x_d,
    q_d,
    scene: Scene,
    model: ArmModel,
    gains: ControllerGains,
    dlo_jacobian: np.ndarray,
    dof_constraint: Optional[np.ndarray] = None,
) -> np.ndarray:
    """One-step MPC: minimize the predicted potential-plus-input cost.

    The DLO and arm configurations at the next step are predicted linearly
    through ``dlo_jacobian`` and the arm Jacobian; repulsive terms enter
    through their current gradients. The quadratic is solved in the
    nullspace of ``dof_constraint @ J_arm`` and the result is scaled onto
    the ``K_u``-norm ball when the speed bound binds.
    """
    x = np.asarray(x, dtype=float)
    q = np.asarray(q, dtype=float).reshape(-1)
    x_d = np.asarray(x_d, dtype=float)
    q_d = np.asarray(q_d, dtype=float).reshape(-1)
    n = q.size
    dt = gains.dt
    Ku = gains.input_weight_matrix(n)
    J_arm = kin.arm_jacobian(model, q)
    B = np.asarray(dlo_jacobian, dtype=float) @ J_arm  # feature motion per joint motion

    H = Ku.copy()
    b = np.zeros(n)
    if gains.attract_dlo != 0.0:
        H += gains.attract_dlo * dt * dt * (B.T @ B)
        b += gains.attract_dlo * dt * (B.T @ (x - x_d).ravel())
    if gains.attract_arm != 0.0:
        H += gains.attract_arm * dt * dt * np.eye(n)
        b += gains.attract_arm * dt * (q - q_d)
    if gains.repel_dlo != 0.0:
        _, g_x = repulsive_potential_dlo(scene, x, gains.influence_distance)
        b += gains.repel_dlo * dt * (B.T @ g_x.ravel())
    if gains.repel_arm != 0.0:
        _, g_q = repulsive_potential_arm(scene, q, model, gains.influence_distance)
        b += gains.repel_arm * dt * g_q

    Z = None
    if dof_constraint is not None:
        C = np.atleast_2d(np.asarray(dof_constraint, dtype=float))
        if C.shape[0] > 0 and C.size > 0:
            A = C @ J_arm
            Z = null_space(A)
            if Z.shape[1] == 0:
                return np.zeros(n)

    if Z is None:
        H_red, b_red = H, b
    else:
        H_red = Z.T @ H @ Z
        b_red = Z.T @ b
    try:
        w = np.linalg.solve(H_red, -b_red)
    except np.linalg.LinAlgError:
        log.warning("MPC Hessian degenerate; applying identity regularization")
        shift = 1e-9 * max(1.0, float(np.trace(H_red)) / H_red.shape[0])
        w = np.linalg.solve(H_red + shift * np.eye(H_red.shape[0]), -b_red)
    u = w if Z is None else Z @ w

    speed_sq = float(u @ Ku @ u)
    if speed_sq > gains.max_speed**2:
        u = u * (gains.max_speed / np.sqrt(speed_sq))
    return u


@dataclass
class StepRecord:
    time: float
    path_index: int
    status: str
    x: np.ndarray
    q: np.ndarray
    u: np.ndarray
    min_clearance: float
    costs: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "time": self.time,
            "path_index": self.path_index,
            "status": self.status,
            "x": self.x.tolist(),
            "q": self.q.tolist(),
            "u": self.u.tolist(),
            "min_clearance": self.min_clearance,
            "costs": dict(self.costs),
        }


@dataclass
class ExecutionReport:
    status: str  # done | stuck | replan-failed | replan-limit | budget-exhausted
    final_error: float
    steps: int
    collision_time: float
    replan_count: int
    records: list[StepRecord]
    paths: list[PlanPath]
    wall_time_s: float = field(compare=False, default=0.0)

    @property
    def succeeded(self) -> bool:
        return self.status == "done"


Replanner = Callable[[np.ndarray, np.ndarray], Optional[PlanPath]]


def execute_path(
    path: PlanPath,
    plant: SimWorld,
    settings: ExecutionSettings,
    gains: ControllerGains,
    replanner: Optional[Replanner] = None,
    dof_constraint: Optional[np.ndarray] = None,
    jacobian_mode: str = "rls",
) -> ExecutionReport:
    """Track the planned path on the plant until done, stuck, or out of budget.

    Node switching advances the target once the DLO is within the switch
    threshold; the final node must be reached to the success threshold.
    While targeting the final node the arm attraction is dropped so only
    the DLO error drives the grippers. A sustained near-zero input declares
    the controller stuck and triggers a re-plan from the current state when
    a ``replanner`` is available.
    """
    if jacobian_mode not in ("rls", "oracle"):
        raise ValueError("jacobian_mode must be 'rls' or 'oracle'")
    start_wall = time.perf_counter()
    model = plant.model
    goal_x = path.nodes[-1].x
    estimator = DloJacobianEstimator(plant.params.num_features)
    records: list[StepRecord] = []
    paths = [path]
    replans = 0
    idx = min(1, len(path.nodes) - 1)
    stuck_run = 0
    status = "budget-exhausted"
    prev_x = prev_q = None
    prev_ends = None

    step_count = 0
    while step_count < settings.max_steps:
        x, q, clearance = plant.observe()
        ends = kin.forward_kinematics(model, q)
        if prev_x is not None:
            estimator.update(kin.twist_between(prev_ends, ends), (x - prev_x).ravel())
        prev_x, prev_q, prev_ends = x, q, ends

        while idx < len(path.nodes) - 1 and config_distance(x, path.nodes[idx].x) < settings.switch_threshold:
            idx += 1
        final = idx == len(path.nodes) - 1
        final_error = config_distance(x, goal_x)
        if final and final_error < settings.success_threshold:
            status = "done"
            break

        target = path.nodes[idx]
        gains_eff = replace(gains, attract_arm=0.0) if final else gains
        if jacobian_mode == "oracle":
            dlo_jac = plant.ground_truth_jacobian()
        else:
            dlo_jac = estimator.matrix
        u = mpc_step(
            x, q, target.x, target.q, plant.scene, model, gains_eff, dlo_jac, dof_constraint
        )

        if float(np.linalg.norm(u)) < settings.stuck_speed:
            stuck_run += 1
        else:
            stuck_run = 0
        if stuck_run >= settings.stuck_window:
            if replanner is None:
                status = "stuck"
                break
            if replans >= settings.replan_limit:
                status = "replan-limit"
                break
            replans += 1
            new_path = replanner(x, q)
            if new_path is None:
                status = "replan-failed"
                break
            path = new_path
            paths.append(new_path)
            goal_x = path.nodes[-1].x
            idx = min(1, len(path.nodes) - 1)
            stuck_run = 0
            continue

        plant.step(u, gains.dt)
        step_count += 1
        rep_dlo, _ = repulsive_potential_dlo(plant.scene, x, gains.influence_distance)
        rep_arm, _ = repulsive_potential_arm(plant.scene, q, model, gains.influence_distance)
        records.append(
            StepRecord(
                time=plant.time,
                path_index=idx,
                status="final-approach" if final else "tracking",
                x=x,
                q=q,
                u=u,
                min_clearance=clearance,
                costs={
                    "attract_dlo": attractive_potential_dlo(x, target.x),
                    "attract_arm": attractive_potential_arm(q, target.q),
                    "repel_dlo": rep_dlo,
                    "repel_arm": rep_arm,
                    "input": 0.5 * float(u @ gains.input_weight_matrix(q.size) @ u),
                },
            )
        )

    x, _, _ = plant.observe()
    return ExecutionReport(
        status=status,
        final_error=config_distance(x, goal_x),
        steps=step_count,
        collision_time=plant.collision_time,
        replan_count=replans,
        records=records,
        paths=paths,
        wall_time_s=time.perf_counter() - start_wall,
    )


def planar_dof_constraint() -> np.ndarray:
    """Selection rows pinning each gripper's vertical velocity, roll, and pitch."""
    C = np.zeros((6, kin.TWIST_DIM))
    for arm in range(2):
        C[3 * arm + 0, 6 * arm + 2] = 1.0  # vertical translation
        C[3 * arm + 1, 6 * arm + 3] = 1.0  # roll rate
        C[3 * arm + 2, 6 * arm + 4] = 1.0  # pitch rate
    return C
