"""Dual-arm serial-chain kinematics and the gripper/DLO grasp mapping.

The robot is two serial arms with revolute joints. Each joint is described
by a fixed pre-transform (translation + rpy rotation in the parent frame)
followed by a rotation about a local axis. Link ``i`` is the body rigidly
attached to joint ``i``'s output frame; it carries one control point and a
collision capsule reaching to the next joint (or to the tool for the last
link).

End-effector twists and Jacobian rows are stacked as
``[v_left, w_left, v_right, w_right]`` with angular velocities expressed in
the world frame.

Grasp convention: the gripper-frame x-axis is aligned with the DLO tangent
pointing from the left end toward the right end. The outermost feature of
each end sits at its gripper origin and the second feature is offset one
rest length into the body along that axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial.transform import Rotation

from .dlo_model import DloParams
from .geometry import Scene, segments_clearance

TWIST_DIM = 12


def rotation_about_axis(axis: np.ndarray, angle: float) -> np.ndarray:
    """Rodrigues rotation matrix about a unit axis."""
    c = np.cos(angle)
    s = np.sin(angle)
    x, y, z = axis
    cross = np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    return c * np.eye(3) + s * cross + (1.0 - c) * np.outer(axis, axis)


def _pose_matrix(xyz, rpy) -> np.ndarray:
    T = np.eye(4)
    T[:3, :3] = Rotation.from_euler("xyz", rpy).as_matrix()
    T[:3, 3] = xyz
    return T


@dataclass(frozen=True)
class Joint:
    axis: np.ndarray
    origin_xyz: np.ndarray
    origin_rpy: np.ndarray
    lower: float
    upper: float
    pre_transform: np.ndarray = field(init=False, compare=False, repr=False)

    def __post_init__(self):
        axis = np.asarray(self.axis, dtype=float).reshape(3)
        norm = np.linalg.norm(axis)
        if norm < 1e-12:
            raise ValueError("joint axis must be nonzero")
        object.__setattr__(self, "axis", axis / norm)
        object.__setattr__(self, "origin_xyz", np.asarray(self.origin_xyz, dtype=float).reshape(3))
        object.__setattr__(self, "origin_rpy", np.asarray(self.origin_rpy, dtype=float).reshape(3))
        if self.lower >= self.upper:
            raise ValueError("joint limits must satisfy lower < upper")
        object.__setattr__(self, "pre_transform", _pose_matrix(self.origin_xyz, self.origin_rpy))


@dataclass(frozen=True)
class SerialArm:
    name: str
    base_xyz: np.ndarray
    base_rpy: np.ndarray
    joints: tuple[Joint, ...]
    tool_xyz: np.ndarray
    tool_rpy: np.ndarray
    link_radii: tuple[float, ...]
    control_points: tuple[np.ndarray, ...]  # one per link, in link frame
    base_transform: np.ndarray = field(init=False, compare=False, repr=False)
    tool_transform: np.ndarray = field(init=False, compare=False, repr=False)

    def __post_init__(self):
        if len(self.joints) < 3:
            raise ValueError("each arm needs at least 3 joints")
        if len(self.link_radii) != len(self.joints):
            raise ValueError("need one capsule radius per link")
        if len(self.control_points) != len(self.joints):
            raise ValueError("need one control point per link")
        object.__setattr__(self, "joints", tuple(self.joints))
        object.__setattr__(self, "link_radii", tuple(float(r) for r in self.link_radii))
        object.__setattr__(
            self,
            "control_points",
            tuple(np.asarray(p, dtype=float).reshape(3) for p in self.control_points),
        )
        object.__setattr__(self, "base_xyz", np.asarray(self.base_xyz, dtype=float).reshape(3))
        object.__setattr__(self, "base_rpy", np.asarray(self.base_rpy, dtype=float).reshape(3))
        object.__setattr__(self, "tool_xyz", np.asarray(self.tool_xyz, dtype=float).reshape(3))
        object.__setattr__(self, "tool_rpy", np.asarray(self.tool_rpy, dtype=float).reshape(3))
        object.__setattr__(self, "base_transform", _pose_matrix(self.base_xyz, self.base_rpy))
        object.__setattr__(self, "tool_transform", _pose_matrix(self.tool_xyz, self.tool_rpy))

    @property
    def dof(self) -> int:
        return len(self.joints)

    def frames(self, q_arm: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """World transforms of each link frame plus the tool frame."""
        frames = np.empty((self.dof, 4, 4))
        T = self.base_transform
        for i, joint in enumerate(self.joints):
            T = T @ joint.pre_transform
            Tq = np.eye(4)
            Tq[:3, :3] = rotation_about_axis(joint.axis, float(q_arm[i]))
            T = T @ Tq
            frames[i] = T
        return frames, T @ self.tool_transform


@dataclass(frozen=True)
class ArmModel:
    """Two serial arms sharing one stacked joint vector (left first)."""

    left: SerialArm
    right: SerialArm
    home: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "home", np.asarray(self.home, dtype=float).reshape(-1))
        if self.home.size != self.dof:
            raise ValueError("home configuration length must match total dof")

    @property
    def dof(self) -> int:
        return self.left.dof + self.right.dof

    @property
    def arms(self) -> tuple[SerialArm, SerialArm]:
        return (self.left, self.right)

    def split(self, q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        q = np.asarray(q, dtype=float).reshape(-1)
        if q.size != self.dof:
            raise ValueError(f"expected {self.dof} joints, got {q.size}")
        return q[: self.left.dof], q[self.left.dof :]

    def joint_limits(self) -> tuple[np.ndarray, np.ndarray]:
        lower = np.array([j.lower for j in self.left.joints + self.right.joints])
        upper = np.array([j.upper for j in self.left.joints + self.right.joints])
        return lower, upper

    def within_limits(self, q: np.ndarray, slack: float = 1e-9) -> bool:
        lower, upper = self.joint_limits()
        q = np.asarray(q, dtype=float).reshape(-1)
        return bool(np.all(q >= lower - slack) and np.all(q <= upper + slack))

    def clamp_to_limits(self, q: np.ndarray) -> np.ndarray:
        lower, upper = self.joint_limits()
        return np.clip(np.asarray(q, dtype=float).reshape(-1), lower, upper)

    @property
    def control_point_count(self) -> int:
        return self.left.dof + self.right.dof


@dataclass(frozen=True)
class EndEffectorState:
    """Poses of both grippers: positions ``(2, 3)``, quaternions ``(2, 4)`` xyzw."""

    positions: np.ndarray
    quaternions: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "positions", np.asarray(self.positions, dtype=float).reshape(2, 3))
        quats = np.asarray(self.quaternions, dtype=float).reshape(2, 4)
        norms = np.linalg.norm(quats, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ValueError("quaternions must be unit norm")
        object.__setattr__(self, "quaternions", quats / norms[:, None])

    @classmethod
    def from_matrices(cls, p_left, R_left, p_right, R_right) -> "EndEffectorState":
        quats = np.stack(
            [Rotation.from_matrix(R_left).as_quat(), Rotation.from_matrix(R_right).as_quat()]
        )
        return cls(np.stack([p_left, p_right]), quats)

    def rotation_matrices(self) -> np.ndarray:
        return Rotation.from_quat(self.quaternions).as_matrix()


def forward_kinematics(model: ArmModel, q) -> EndEffectorState:
    """End-effector poses of both arms."""
    ql, qr = model.split(q)
    _, tool_l = model.left.frames(ql)
    _, tool_r = model.right.frames(qr)
    return EndEffectorState.from_matrices(
        tool_l[:3, 3], tool_l[:3, :3], tool_r[:3, 3], tool_r[:3, :3]
    )


def _arm_chain(arm: SerialArm, q_arm: np.ndarray):
    """Per-joint world axes and origins plus the tool transform."""
    frames, tool = arm.frames(q_arm)
    axes = np.einsum("kij,kj->ki", frames[:, :3, :3], np.stack([j.axis for j in arm.joints]))
    origins = frames[:, :3, 3]
    return frames, axes, origins, tool


def _point_jacobian(axes: np.ndarray, origins: np.ndarray, point: np.ndarray, upto: int):
    """Linear-velocity Jacobian of a point on link ``upto`` (3 x dof columns)."""
    cols = np.zeros((3, len(axes)))
    for j in range(upto + 1):
        cols[:, j] = np.cross(axes[j], point - origins[j])
    return cols


def arm_jacobian(model: ArmModel, q) -> np.ndarray:
    """Geometric Jacobian mapping joint velocity to the stacked gripper twist."""
    ql, qr = model.split(q)
    J = np.zeros((TWIST_DIM, model.dof))
    offset = 0
    row = 0
    for arm, q_arm in ((model.left, ql), (model.right, qr)):
        _, axes, origins, tool = _arm_chain(arm, q_arm)
        p = tool[:3, 3]
        for j in range(arm.dof):
            J[row : row + 3, offset + j] = np.cross(axes[j], p - origins[j])
            J[row + 3 : row + 6, offset + j] = axes[j]
        offset += arm.dof
        row += 6
    return J


def pose_error_twist(current: EndEffectorState, target: EndEffectorState) -> np.ndarray:
    """12-vector [dp_l, dtheta_l, dp_r, dtheta_r] moving ``current`` to ``target``."""
    e = np.zeros(TWIST_DIM)
    R_cur = current.rotation_matrices()
    R_tgt = target.rotation_matrices()
    for i in range(2):
        e[6 * i : 6 * i + 3] = target.positions[i] - current.positions[i]
        e[6 * i + 3 : 6 * i + 6] = Rotation.from_matrix(R_tgt[i] @ R_cur[i].T).as_rotvec()
    return e


def twist_between(before: EndEffectorState, after: EndEffectorState) -> np.ndarray:
    """Finite pose increment from ``before`` to ``after`` as a 12-vector."""
    return pose_error_twist(before, after)


@dataclass(frozen=True)
class IkSettings:
    damping: float = 1e-3
    max_iterations: int = 200
    position_tolerance: float = 1e-4
    orientation_tolerance: float = 1e-3  # radians
    max_step: float = 0.5  # per-iteration joint-space cap, radians


def inverse_kinematics(
    model: ArmModel,
    target: EndEffectorState,
    seed,
    settings: IkSettings = IkSettings(),
) -> Optional[np.ndarray]:
    """Damped-least-squares IK seeded at ``seed``; the converged branch is
    whichever local solution the seed flows to.

    Returns the joint vector, or None on non-convergence or a joint-limit
    violation at the solution.
    """
    q = np.asarray(seed, dtype=float).reshape(-1).copy()
    if q.size != model.dof:
        raise ValueError(f"seed must have {model.dof} joints")
    lam_sq = settings.damping**2
    for _ in range(settings.max_iterations):
        current = forward_kinematics(model, q)
        e = pose_error_twist(current, target)
        pos_ok = (
            np.linalg.norm(e[0:3]) <= settings.position_tolerance
            and np.linalg.norm(e[6:9]) <= settings.position_tolerance
        )
        rot_ok = (
            np.linalg.norm(e[3:6]) <= settings.orientation_tolerance
            and np.linalg.norm(e[9:12]) <= settings.orientation_tolerance
        )
        if pos_ok and rot_ok:
            return q if model.within_limits(q) else None
        J = arm_jacobian(model, q)
        dq = J.T @ np.linalg.solve(J @ J.T + lam_sq * np.eye(TWIST_DIM), e)
        step = np.max(np.abs(dq))
        if step > settings.max_step:
            dq *= settings.max_step / step
        q = q + dq
    return None


def control_point_positions(model: ArmModel, q) -> np.ndarray:
    """World positions of all link control points, shape ``(y, 3)``."""
    ql, qr = model.split(q)
    points = []
    for arm, q_arm in ((model.left, ql), (model.right, qr)):
        frames, _ = arm.frames(q_arm)
        for i in range(arm.dof):
            points.append(frames[i, :3, :3] @ arm.control_points[i] + frames[i, :3, 3])
    return np.array(points)


def control_point_jacobians(model: ArmModel, q) -> np.ndarray:
    """Position Jacobian of each control point, shape ``(y, 3, n)``."""
    ql, qr = model.split(q)
    jac = np.zeros((model.control_point_count, 3, model.dof))
    idx = 0
    offset = 0
    for arm, q_arm in ((model.left, ql), (model.right, qr)):
        frames, _ = arm.frames(q_arm)
        _, axes, origins, _ = _arm_chain(arm, q_arm)
        for i in range(arm.dof):
            point = frames[i, :3, :3] @ arm.control_points[i] + frames[i, :3, 3]
            jac[idx, :, offset : offset + arm.dof] = _point_jacobian(axes, origins, point, i)
            idx += 1
        offset += arm.dof
    return jac


def arm_capsules(model: ArmModel, q) -> list[tuple[np.ndarray, np.ndarray, float]]:
    """Collision capsules ``(a, b, radius)`` for every link at configuration q."""
    ql, qr = model.split(q)
    capsules = []
    for arm, q_arm in ((model.left, ql), (model.right, qr)):
        frames, tool = arm.frames(q_arm)
        origins = frames[:, :3, 3]
        for i in range(arm.dof):
            end = origins[i + 1] if i + 1 < arm.dof else tool[:3, 3]
            capsules.append((origins[i], end, arm.link_radii[i]))
    return capsules


def arm_min_clearance(scene: Scene, model: ArmModel, q, resolution: float = 0.005) -> float:
    return segments_clearance(scene, arm_capsules(model, q), resolution)


def arm_in_collision(scene: Scene, model: ArmModel, q, resolution: float = 0.005) -> bool:
    return arm_min_clearance(scene, model, q, resolution) <= 0.0


def grasp_map(ends: EndEffectorState, params: DloParams) -> np.ndarray:
    """Positions of the four boundary features implied by the gripper poses.

    Rows are features ``(0, 1, m-2, m-1)``. The outer features sit at the
    gripper origins; the inner ones are one rest length along the grasp
    axis, which points from the left end toward the right end.
    """
    R = ends.rotation_matrices()
    rest = params.rest_length
    left_axis = R[0, :, 0]
    right_axis = R[1, :, 0]
    return np.array(
        [
            ends.positions[0],
            ends.positions[0] + rest * left_axis,
            ends.positions[1] - rest * right_axis,
            ends.positions[1],
        ]
    )


def _frame_from_tangent(tangent: np.ndarray) -> np.ndarray:
    """Rotation with x-axis = tangent, z-axis as vertical as possible."""
    x = tangent / np.linalg.norm(tangent)
    z = np.array([0.0, 0.0, 1.0]) - (np.array([0.0, 0.0, 1.0]) @ x) * x
    if np.linalg.norm(z) < 1e-6:
        z = np.array([0.0, 1.0, 0.0]) - (np.array([0.0, 1.0, 0.0]) @ x) * x
    z /= np.linalg.norm(z)
    y = np.cross(z, x)
    return np.column_stack([x, y, z])


def end_poses_from_config(x, params: DloParams) -> EndEffectorState:
    """Gripper poses estimated from a DLO configuration's boundary features."""
    x = np.asarray(x, dtype=float)
    if x.shape[0] != params.num_features:
        raise ValueError("configuration feature count does not match params")
    left_tangent = x[1] - x[0]
    right_tangent = x[-1] - x[-2]
    if np.linalg.norm(left_tangent) < 1e-9 or np.linalg.norm(right_tangent) < 1e-9:
        raise ValueError("boundary features coincide; end poses undefined")
    return EndEffectorState.from_matrices(
        x[0], _frame_from_tangent(left_tangent), x[-1], _frame_from_tangent(right_tangent)
    )


def grasp_consistency_error(model: ArmModel, q, x, params: DloParams) -> float:
    """Largest feature mismatch between FK-implied and actual boundary features."""
    x = np.asarray(x, dtype=float)
    implied = grasp_map(forward_kinematics(model, q), params)
    actual = np.array([x[0], x[1], x[-2], x[-1]])
    return float(np.max(np.linalg.norm(implied - actual, axis=1)))


def arm_model_from_dict(data: dict) -> ArmModel:
    """Build an ArmModel from the parsed robot-description mapping."""
    arms = data.get("arms")
    if not isinstance(arms, list) or len(arms) != 2:
        raise ValueError("robot description needs exactly two arms")
    built = []
    for arm in arms:
        joints = tuple(
            Joint(
                axis=j["axis"],
                origin_xyz=j.get("xyz", (0.0, 0.0, 0.0)),
                origin_rpy=j.get("rpy", (0.0, 0.0, 0.0)),
                lower=float(j["limits"][0]),
                upper=float(j["limits"][1]),
            )
            for j in arm["joints"]
        )
        tool = arm.get("tool", {})
        radii = arm.get("link_radii")
        if radii is None:
            radii = [float(arm.get("link_radius", 0.03))] * len(joints)
        built.append(
            SerialArm(
                name=str(arm.get("name", "arm")),
                base_xyz=arm.get("base", {}).get("xyz", (0.0, 0.0, 0.0)),
                base_rpy=arm.get("base", {}).get("rpy", (0.0, 0.0, 0.0)),
                joints=joints,
                tool_xyz=tool.get("xyz", (0.0, 0.0, 0.0)),
                tool_rpy=tool.get("rpy", (0.0, 0.0, 0.0)),
                link_radii=radii,
                control_points=arm["control_points"],
            )
        )
    left, right = built
    home = data.get("home")
    if home is None:
        home = np.zeros(left.dof + right.dof)
    return ArmModel(left=left, right=right, home=home)
