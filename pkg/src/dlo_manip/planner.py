"""Constrained bidirectional RRT over paired (DLO, robot) configurations.

Two trees grow toward each other from the start and goal. Every candidate
node goes through the same validation pipeline: interpolate toward the
target shape, re-pin the boundary features to the implied gripper poses,
project the interior onto the stable manifold, solve IK for the gripper
poses seeded at the parent's joints, and check DLO plus arm collisions.
Node distance is the Euclidean distance between stacked DLO configuration
vectors. Found paths are shortcut-smoothed with the same validation.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import kinematics as kin
from .dlo_model import (
    DloParams,
    ProjectionSettings,
    boundary_indices,
    config_distance,
    energy_value_and_grad,
    interpolate_config,
    project_stable_config,
)
from .geometry import Scene, dlo_in_collision
from .kinematics import ArmModel, IkSettings


class PlanningError(RuntimeError):
    """Invalid planning inputs (bad start node, unreachable goal poses)."""


class SamplingBudgetError(RuntimeError):
    """No valid sample found within the per-iteration rejection budget."""


@dataclass(frozen=True)
class PlannerSettings:
    max_iterations: int = 1000
    step_size: float = 0.05  # configuration-vector norm per extension step
    connect_threshold: float = 0.05
    smoothing_iterations: int = 100
    seed: int = 0
    dlo_radius: float = 0.005
    goal_bias: float = 0.1
    goal_noise: float = 0.05
    max_extend_steps: int = 50
    sample_budget: int = 100
    bend_angle: float = math.pi / 4  # heuristic sampler's max bend per feature
    plane_height: Optional[float] = None  # sample in this z-plane when set

    def __post_init__(self):
        if min(self.max_iterations, self.smoothing_iterations + 1, self.max_extend_steps) <= 0:
            raise ValueError("iteration budgets must be positive")
        if min(self.step_size, self.connect_threshold, self.dlo_radius) <= 0.0:
            raise ValueError("step size, connect threshold, and radius must be > 0")
        if not 0.0 <= self.goal_bias < 1.0:
            raise ValueError("goal bias must be in [0, 1)")


@dataclass(frozen=True)
class PlanningModels:
    arm: ArmModel
    dlo: DloParams
    projection: ProjectionSettings = ProjectionSettings()
    ik: IkSettings = IkSettings()


@dataclass
class PlanNode:
    x: np.ndarray  # stable DLO configuration (m, 3)
    q: np.ndarray  # joint vector
    parent: Optional["PlanNode"] = None
    residual: float = 0.0


@dataclass
class PlanStats:
    iterations: int = 0
    projections: int = 0
    nodes: int = 0
    wall_time_s: float = field(default=0.0, compare=False)


@dataclass
class PlanPath:
    nodes: list[PlanNode]
    stats: PlanStats

    @property
    def length(self) -> float:
        return sum(
            config_distance(a.x, b.x) for a, b in zip(self.nodes[:-1], self.nodes[1:])
        )


def sample_raw_config(
    params: DloParams,
    bounds_min,
    bounds_max,
    rng: np.random.Generator,
    bend_angle: float = math.pi / 4,
    plane_height: Optional[float] = None,
) -> np.ndarray:
    """Draw a raw chain that already looks like a DLO.

    The first feature is uniform in the workspace box; each next feature is
    one rest length away, with the direction bent at most ``bend_angle``
    from the previous one. With ``plane_height`` set the chain stays in
    that horizontal plane.
    """
    bounds_min = np.asarray(bounds_min, dtype=float)
    bounds_max = np.asarray(bounds_max, dtype=float)
    m = params.num_features
    rest = params.rest_length
    x = np.empty((m, 3))
    x[0] = rng.uniform(bounds_min, bounds_max)
    if plane_height is not None:
        x[0, 2] = plane_height
        heading = rng.uniform(0.0, 2.0 * math.pi)
        direction = np.array([math.cos(heading), math.sin(heading), 0.0])
    else:
        direction = _random_unit(rng)
    for k in range(1, m):
        x[k] = x[k - 1] + rest * direction
        if k < m - 1:
            if plane_height is not None:
                heading += rng.uniform(-bend_angle, bend_angle)
                direction = np.array([math.cos(heading), math.sin(heading), 0.0])
            else:
                direction = _bend_direction(direction, bend_angle, rng)
    return x


def _random_unit(rng: np.random.Generator) -> np.ndarray:
    v = rng.normal(size=3)
    n = np.linalg.norm(v)
    while n < 1e-12:
        v = rng.normal(size=3)
        n = np.linalg.norm(v)
    return v / n


def _bend_direction(direction: np.ndarray, bend_angle: float, rng: np.random.Generator):
    """Unit vector uniform in the cone of half-angle ``bend_angle`` around ``direction``."""
    if bend_angle <= 0.0:
        return direction
    cos_a = rng.uniform(math.cos(bend_angle), 1.0)
    sin_a = math.sqrt(max(0.0, 1.0 - cos_a * cos_a))
    phi = rng.uniform(0.0, 2.0 * math.pi)
    # Orthonormal frame around the previous direction.
    helper = np.array([1.0, 0.0, 0.0]) if abs(direction[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    u = np.cross(direction, helper)
    u /= np.linalg.norm(u)
    v = np.cross(direction, u)
    return cos_a * direction + sin_a * (math.cos(phi) * u + math.sin(phi) * v)


def sample_node(
    scene: Scene,
    models: PlanningModels,
    settings: PlannerSettings,
    rng: np.random.Generator,
    goal_x: Optional[np.ndarray] = None,
    stats: Optional[PlanStats] = None,
) -> np.ndarray:
    """Sample a stable, collision-free DLO configuration (the node's x part).

    A fraction of the draws resample around the goal configuration when one
    is given. Raises :class:`SamplingBudgetError` after ``sample_budget``
    rejections.
    """
    for _ in range(settings.sample_budget):
        if goal_x is not None and rng.uniform() < settings.goal_bias:
            noise = rng.normal(0.0, settings.goal_noise, goal_x.shape)
            if settings.plane_height is not None:
                noise[:, 2] = 0.0
            raw = goal_x + noise
        else:
            raw = sample_raw_config(
                models.dlo,
                scene.workspace_min,
                scene.workspace_max,
                rng,
                settings.bend_angle,
                settings.plane_height,
            )
        stable = project_stable_config(models.dlo, raw, models.projection)
        if stats is not None:
            stats.projections += 1
        if not stable.converged:
            continue
        if dlo_in_collision(scene, stable.config, settings.dlo_radius):
            continue
        return stable.config
    raise SamplingBudgetError(f"no valid sample in {settings.sample_budget} draws")


def _make_node(
    x_raw: np.ndarray,
    q_seed: np.ndarray,
    parent: Optional[PlanNode],
    scene: Scene,
    models: PlanningModels,
    settings: PlannerSettings,
    stats: Optional[PlanStats],
) -> Optional[PlanNode]:
    """Full node validation: pin boundary, project, IK, collision checks."""
    try:
        ends = kin.end_poses_from_config(x_raw, models.dlo)
    except ValueError:
        return None
    pinned = x_raw.copy()
    pinned[list(boundary_indices(models.dlo.num_features))] = kin.grasp_map(ends, models.dlo)
    stable = project_stable_config(models.dlo, pinned, models.projection)
    if stats is not None:
        stats.projections += 1
    if not stable.converged:
        return None
    q = kin.inverse_kinematics(models.arm, ends, q_seed, models.ik)
    if q is None:
        return None
    if dlo_in_collision(scene, stable.config, settings.dlo_radius):
        return None
    if kin.arm_in_collision(scene, models.arm, q):
        return None
    return PlanNode(stable.config, q, parent, stable.residual)


def constrained_extend(
    tree: list[PlanNode],
    from_node: PlanNode,
    to_x: np.ndarray,
    scene: Scene,
    models: PlanningModels,
    settings: PlannerSettings,
    stats: Optional[PlanStats] = None,
) -> PlanNode:
    """Grow the tree from ``from_node`` toward the configuration ``to_x``.

    Steps of at most ``step_size`` are interpolated, projected, and
    validated until a step fails, the new node stops getting closer to the
    target, or the step cap is reached. Returns the last node appended
    (``from_node`` if no step succeeded).
    """
    reached = from_node
    dist = config_distance(reached.x, to_x)
    for _ in range(settings.max_extend_steps):
        if dist < 1e-12:
            break
        t = min(1.0, settings.step_size / dist)
        candidate = interpolate_config(reached.x, to_x, t)
        node = _make_node(candidate, reached.q, reached, scene, models, settings, stats)
        if node is None:
            break
        step_len = config_distance(node.x, reached.x)
        if step_len > settings.step_size * (1.0 + 1e-6):
            break  # projection pushed the node out of the step budget
        new_dist = config_distance(node.x, to_x)
        if new_dist >= dist:
            break
        tree.append(node)
        reached = node
        dist = new_dist
        if t >= 1.0:
            break
    return reached


def _chain_to_root(node: PlanNode) -> list[PlanNode]:
    chain = []
    while node is not None:
        chain.append(node)
        node = node.parent
    chain.reverse()
    return chain


def validate_node(
    node: PlanNode, scene: Scene, models: PlanningModels, settings: PlannerSettings
) -> bool:
    """Re-check every node invariant; used by tests and start validation."""
    free = np.setdiff1d(
        np.arange(models.dlo.num_features), boundary_indices(models.dlo.num_features)
    )
    _, grad = energy_value_and_grad(models.dlo, node.x)
    residual = float(np.linalg.norm(grad[free].ravel()))
    if residual > models.projection.gradient_tolerance * (1.0 + 1e-9):
        return False
    if kin.grasp_consistency_error(models.arm, node.q, node.x, models.dlo) > 1e-3:
        return False
    if not models.arm.within_limits(node.q):
        return False
    if dlo_in_collision(scene, node.x, settings.dlo_radius):
        return False
    if kin.arm_in_collision(scene, models.arm, node.q):
        return False
    return True


def _nearest(tree: list[PlanNode], x: np.ndarray) -> PlanNode:
    stacked = np.stack([node.x.ravel() for node in tree])
    return tree[int(np.argmin(np.linalg.norm(stacked - x.ravel(), axis=1)))]


def plan(
    scene: Scene,
    models: PlanningModels,
    start_x,
    start_q,
    goal_x,
    settings: PlannerSettings = PlannerSettings(),
) -> Optional[PlanPath]:
    """Plan a path of paired (DLO, robot) configurations from start to goal.

    The goal node's joints come from IK on the goal shape's end poses
    seeded at the robot home configuration. Returns None when no path is
    found within the iteration budget; raises :class:`PlanningError` for an
    invalid start or an unreachable goal.
    """
    t0 = time.perf_counter()
    rng = np.random.default_rng(settings.seed)
    stats = PlanStats()
    start_x = np.asarray(start_x, dtype=float)
    start_q = np.asarray(start_q, dtype=float)
    goal_x = np.asarray(goal_x, dtype=float)

    start = PlanNode(start_x.copy(), start_q.copy())
    if not validate_node(start, scene, models, settings):
        raise PlanningError("start node violates stability, grasp, or collision invariants")

    goal_ends = kin.end_poses_from_config(goal_x, models.dlo)
    goal_q = kin.inverse_kinematics(models.arm, goal_ends, models.arm.home, models.ik)
    if goal_q is None:
        raise PlanningError("no IK solution for the goal end poses from the home seed")
    goal = PlanNode(goal_x.copy(), goal_q)
    if dlo_in_collision(scene, goal.x, settings.dlo_radius) or kin.arm_in_collision(
        scene, models.arm, goal.q
    ):
        raise PlanningError("goal configuration is in collision")

    if config_distance(start.x, goal.x) <= settings.connect_threshold:
        stats.nodes = 1
        stats.wall_time_s = time.perf_counter() - t0
        return PlanPath([start], stats)

    tree_start = [start]
    tree_goal = [goal]
    tree_a, tree_b = tree_start, tree_goal

    for iteration in range(1, settings.max_iterations + 1):
        stats.iterations = iteration
        try:
            x_rand = sample_node(scene, models, settings, rng, goal.x, stats)
        except SamplingBudgetError:
            continue
        near_a = _nearest(tree_a, x_rand)
        reached_a = constrained_extend(tree_a, near_a, x_rand, scene, models, settings, stats)
        near_b = _nearest(tree_b, reached_a.x)
        reached_b = constrained_extend(tree_b, near_b, reached_a.x, scene, models, settings, stats)

        if config_distance(reached_a.x, reached_b.x) <= settings.connect_threshold:
            if tree_a is tree_start:
                reached_s, reached_g = reached_a, reached_b
            else:
                reached_s, reached_g = reached_b, reached_a
            nodes = _chain_to_root(reached_s) + list(reversed(_chain_to_root(reached_g)))
            stats.nodes = len(tree_start) + len(tree_goal)
            path = PlanPath(nodes, stats)
            path = smooth_path(path, scene, models, settings, rng=rng, stats=stats)
            stats.wall_time_s = time.perf_counter() - t0
            return path
        tree_a, tree_b = tree_b, tree_a

    stats.nodes = len(tree_start) + len(tree_goal)
    stats.wall_time_s = time.perf_counter() - t0
    return None


def smooth_path(
    path: PlanPath,
    scene: Scene,
    models: PlanningModels,
    settings: PlannerSettings,
    rng: Optional[np.random.Generator] = None,
    stats: Optional[PlanStats] = None,
) -> PlanPath:
    """Randomized shortcutting; never lengthens the path or breaks a node.

    Each attempt picks two non-adjacent nodes and tries to bridge them with
    a fresh constrained extension; the splice is kept only when it reaches
    the far node and strictly shortens the summed configuration distance.
    """
    if rng is None:
        rng = np.random.default_rng(settings.seed)
    nodes = list(path.nodes)
    for _ in range(settings.smoothing_iterations):
        if len(nodes) < 3:
            break
        i = int(rng.integers(0, len(nodes) - 2))
        j = int(rng.integers(i + 2, len(nodes)))
        scratch: list[PlanNode] = []
        reached = constrained_extend(
            scratch, nodes[i], nodes[j].x, scene, models, settings, stats
        )
        if config_distance(reached.x, nodes[j].x) > settings.connect_threshold:
            continue
        segment = []
        node = reached
        while node is not nodes[i]:
            segment.append(node)
            node = node.parent
        segment.reverse()
        candidate = nodes[: i + 1] + segment + nodes[j:]
        if _path_length(candidate) < _path_length(nodes):
            nodes = candidate
    return PlanPath(nodes, path.stats)


def _path_length(nodes: list[PlanNode]) -> float:
    return sum(config_distance(a.x, b.x) for a, b in zip(nodes[:-1], nodes[1:]))
