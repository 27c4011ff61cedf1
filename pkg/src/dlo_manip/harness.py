"""Task files, experiment runners, metrics, and artifact export.

File formats are versioned YAML documents (SI units throughout):

``dlo_scene/1``::

    schema: dlo_scene/1
    workspace: {min: [x, y, z], max: [x, y, z]}
    obstacles:
      - {kind: sphere, center: [...], radius: r}
      - {kind: box, center: [...], half_extents: [...]}
      - {kind: capsule, a: [...], b: [...], radius: r}

``dlo_robot/1``::

    schema: dlo_robot/1
    home: [q1, ...]                  # stacked left-then-right joints
    arms:                            # exactly two entries, left first
      - name: left
        base: {xyz: [...], rpy: [...]}
        joints:
          - {axis: [...], xyz: [...], rpy: [...], limits: [lo, hi]}
        tool: {xyz: [...], rpy: [...]}
        link_radius: 0.03            # or link_radii: [...] per link
        control_points: [[...], ...] # one per link, in link frame

``dlo_task/1``::

    schema: dlo_task/1
    name: pillar_gap
    scene: ../scenes/pillar_gap.yaml   # relative to the task file
    robot: ../robots/planar.yaml
    dlo: {length: 0.5, num_features: 10, stiffness1: 1.0, stiffness2: 1.0}
    start: {features: [[...], ...], joints: [...]}  # joints optional (IK from home)
    goal: {features: [[...], ...]}
    plane_height: 0.2                 # optional; makes it a 2-D task
    planner: {...}                    # PlannerSettings overrides
    controller: {...}                 # ControllerGains overrides
    execution: {...}                  # ExecutionSettings overrides
    mismatch: {...}                   # MismatchSpec overrides
    seed: 0

Start and goal feature arrays are projected to the stable manifold at load
time (boundary features re-pinned to the implied gripper poses first); a
goal that projection moves too far, or that ends up in collision, is
rejected as infeasible.

Run artifacts (plans, step logs, metric records) are JSON/CSV written
atomically. Wall-clock timing fields are measurements, not part of the
deterministic payload; :func:`strip_timing` removes them before
reproducibility comparisons.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from . import kinematics as kin
from .controller import (
    ControllerGains,
    ExecutionSettings,
    ExecutionReport,
    StepRecord,
    execute_path,
    planar_dof_constraint,
)
from .dlo_model import DloParams, ProjectionSettings, config_distance, project_stable_config
from .geometry import Box, Capsule, Scene, Sphere, dlo_in_collision
from .kinematics import ArmModel, arm_model_from_dict
from .planner import PlanPath, PlannerSettings, PlanningError, PlanningModels, plan
from .simulator import MismatchSpec, SimWorld

SUCCESS_ERROR_THRESHOLD = 0.05
"""Manipulation success bar: final task error below 5 cm."""

GOAL_PROJECTION_TOLERANCE = 0.05
"""Maximum distance the stability projection may move a task's start/goal."""

TIMING_KEYS = frozenset({"wall_time_s", "planning_time_s"})

OUTPUT_DIR_ENV = "DLO_MANIP_OUT"


class TaskFileError(ValueError):
    """Schema violation or infeasible start/goal in a task file."""


def data_dir() -> Path:
    """Directory with the bundled scenes/robots/tasks."""
    return Path(__file__).parent / "data"


def bundled_task(name: str) -> Path:
    path = data_dir() / "tasks" / f"{name}.yaml"
    if not path.exists():
        available = sorted(p.stem for p in (data_dir() / "tasks").glob("*.yaml"))
        raise FileNotFoundError(f"no bundled task {name!r}; available: {available}")
    return path


def _load_yaml(path: Path, expected_schema: str) -> dict:
    with open(path) as fh:
        data = yaml.safe_load(fh)
    if not isinstance(data, dict):
        raise TaskFileError(f"{path}: expected a mapping at top level")
    schema = data.get("schema")
    if schema != expected_schema:
        raise TaskFileError(f"{path}: schema {schema!r}, expected {expected_schema!r}")
    return data


def load_scene(path) -> Scene:
    path = Path(path)
    data = _load_yaml(path, "dlo_scene/1")
    workspace = data.get("workspace", {})
    obstacles = []
    for entry in data.get("obstacles", []):
        kind = entry.get("kind")
        try:
            if kind == "sphere":
                obstacles.append(Sphere(entry["center"], float(entry["radius"])))
            elif kind == "box":
                obstacles.append(Box(entry["center"], entry["half_extents"]))
            elif kind == "capsule":
                obstacles.append(Capsule(entry["a"], entry["b"], float(entry["radius"])))
            else:
                raise TaskFileError(f"{path}: unknown obstacle kind {kind!r}")
        except (KeyError, ValueError) as exc:
            raise TaskFileError(f"{path}: bad obstacle entry {entry!r}: {exc}") from exc
    try:
        return Scene(tuple(obstacles), workspace["min"], workspace["max"])
    except (KeyError, ValueError) as exc:
        raise TaskFileError(f"{path}: bad workspace bounds: {exc}") from exc


def load_robot(path) -> ArmModel:
    path = Path(path)
    data = _load_yaml(path, "dlo_robot/1")
    try:
        return arm_model_from_dict(data)
    except (KeyError, ValueError) as exc:
        raise TaskFileError(f"{path}: bad robot description: {exc}") from exc


def _settings_from(cls, data: Optional[dict], **overrides):
    values = dict(data or {})
    values.update(overrides)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise TaskFileError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    return cls(**values)


@dataclass
class TaskSpec:
    name: str
    scene: Scene
    robot: ArmModel
    dlo: DloParams
    start_x: np.ndarray
    start_q: np.ndarray
    goal_x: np.ndarray
    planner: PlannerSettings
    gains: ControllerGains
    execution: ExecutionSettings
    mismatch: MismatchSpec
    projection: ProjectionSettings
    seed: int
    dof_constraint: Optional[np.ndarray] = None

    def models(self) -> PlanningModels:
        return PlanningModels(arm=self.robot, dlo=self.dlo, projection=self.projection)


def _project_endpoint(
    x_raw: np.ndarray, dlo: DloParams, projection: ProjectionSettings, label: str
) -> np.ndarray:
    """Re-pin the boundary to the implied gripper poses and project to stability."""
    from .dlo_model import boundary_indices

    ends = kin.end_poses_from_config(x_raw, dlo)
    pinned = x_raw.copy()
    pinned[list(boundary_indices(dlo.num_features))] = kin.grasp_map(ends, dlo)
    stable = project_stable_config(dlo, pinned, projection)
    if not stable.converged:
        raise TaskFileError(f"{label} configuration does not project to a stable one")
    moved = config_distance(stable.config, x_raw)
    if moved > GOAL_PROJECTION_TOLERANCE:
        raise TaskFileError(
            f"{label} configuration is {moved:.3f} m from the stable manifold "
            f"(limit {GOAL_PROJECTION_TOLERANCE})"
        )
    return stable.config


def load_task(path) -> TaskSpec:
    """Load and fully validate a task file."""
    path = Path(path)
    data = _load_yaml(path, "dlo_task/1")
    base = path.parent
    try:
        scene = load_scene(base / data["scene"])
        robot = load_robot(base / data["robot"])
        dlo_cfg = data["dlo"]
        dlo = DloParams(
            length=float(dlo_cfg["length"]),
            num_features=int(dlo_cfg["num_features"]),
            stiffness1=float(dlo_cfg.get("stiffness1", 1.0)),
            stiffness2=float(dlo_cfg.get("stiffness2", 1.0)),
        )
    except KeyError as exc:
        raise TaskFileError(f"{path}: missing required field {exc}") from exc
    if dlo.num_features < 5:
        raise TaskFileError(f"{path}: need at least 5 features, got {dlo.num_features}")

    start_raw = np.asarray(data["start"]["features"], dtype=float)
    goal_raw = np.asarray(data["goal"]["features"], dtype=float)
    for label, arr in (("start", start_raw), ("goal", goal_raw)):
        if arr.shape != (dlo.num_features, 3):
            raise TaskFileError(
                f"{path}: {label} features must be shape ({dlo.num_features}, 3), got {arr.shape}"
            )

    seed = int(data.get("seed", 0))
    plane_height = data.get("plane_height")
    projection = _settings_from(ProjectionSettings, data.get("projection"))
    planner = _settings_from(
        PlannerSettings,
        data.get("planner"),
        seed=seed,
        plane_height=plane_height,
    )
    gains = _settings_from(ControllerGains, data.get("controller"))
    execution = _settings_from(ExecutionSettings, data.get("execution"))
    mismatch = _settings_from(MismatchSpec, data.get("mismatch"))

    start_x = _project_endpoint(start_raw, dlo, projection, "start")
    goal_x = _project_endpoint(goal_raw, dlo, projection, "goal")
    if dlo_in_collision(scene, goal_x, planner.dlo_radius):
        raise TaskFileError(f"{path}: goal configuration is in collision")
    if dlo_in_collision(scene, start_x, planner.dlo_radius):
        raise TaskFileError(f"{path}: start configuration is in collision")

    joints = data["start"].get("joints")
    if joints is not None:
        start_q = np.asarray(joints, dtype=float)
    else:
        ends = kin.end_poses_from_config(start_x, dlo)
        start_q = kin.inverse_kinematics(robot, ends, robot.home)
        if start_q is None:
            raise TaskFileError(f"{path}: no IK solution for the start configuration")
    if kin.grasp_consistency_error(robot, start_q, start_x, dlo) > 1e-3:
        raise TaskFileError(f"{path}: start joints do not grasp the start configuration")

    return TaskSpec(
        name=str(data.get("name", path.stem)),
        scene=scene,
        robot=robot,
        dlo=dlo,
        start_x=start_x,
        start_q=start_q,
        goal_x=goal_x,
        planner=planner,
        gains=gains,
        execution=execution,
        mismatch=mismatch,
        projection=projection,
        seed=seed,
        dof_constraint=planar_dof_constraint() if plane_height is not None else None,
    )


@dataclass
class MetricsReport:
    task_name: str
    mode: str
    seed: int
    planning_success: bool
    planning_iterations: int
    projection_count: int
    planning_time_s: float = field(compare=False)
    final_task_error: Optional[float] = None
    collision_time_s: Optional[float] = None
    manipulation_success: Optional[bool] = None
    replan_count: int = 0
    steps: int = 0
    status: str = ""

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class RunRecord:
    task_name: str
    mode: str
    seed: int
    metrics: MetricsReport
    plans: list[PlanPath]
    records: list[StepRecord]
    goal_x: np.ndarray


def _plan_to_dict(path: PlanPath) -> dict:
    return {
        "nodes": [
            {"x": node.x.tolist(), "q": node.q.tolist(), "residual": node.residual}
            for node in path.nodes
        ],
        "stats": {
            "iterations": path.stats.iterations,
            "projections": path.stats.projections,
            "nodes": path.stats.nodes,
            "wall_time_s": path.stats.wall_time_s,
        },
    }


def run_task(task: TaskSpec, mode: str = "closed-loop", seed: Optional[int] = None) -> RunRecord:
    """Plan the task and execute it on the mismatched simulator.

    ``closed-loop`` tracks the plan with the MPC controller; ``open-loop``
    replays the planned joint waypoints through trapezoidal interpolation
    with no feedback. Planner failure is reported in the metrics rather
    than raised. Both modes consume the identical plan for the same seed.
    """
    if mode not in ("closed-loop", "open-loop"):
        raise ValueError("mode must be 'closed-loop' or 'open-loop'")
    seed = task.seed if seed is None else int(seed)
    planner_settings = dataclasses.replace(task.planner, seed=seed)
    models = task.models()

    t0 = time.perf_counter()
    path = plan(task.scene, models, task.start_x, task.start_q, task.goal_x, planner_settings)
    planning_time = time.perf_counter() - t0

    metrics = MetricsReport(
        task_name=task.name,
        mode=mode,
        seed=seed,
        planning_success=path is not None,
        planning_iterations=0 if path is None else path.stats.iterations,
        projection_count=0 if path is None else path.stats.projections,
        planning_time_s=planning_time,
    )
    if path is None:
        metrics.status = "planning-failed"
        return RunRecord(task.name, mode, seed, metrics, [], [], task.goal_x)

    world = SimWorld(
        task.scene,
        task.robot,
        task.dlo,
        task.start_x,
        task.start_q,
        mismatch=task.mismatch,
        dlo_radius=planner_settings.dlo_radius,
        seed=seed,
    )

    if mode == "closed-loop":
        replan_counter = [0]

        def replanner(x_now: np.ndarray, q_now: np.ndarray) -> Optional[PlanPath]:
            replan_counter[0] += 1
            replan_settings = dataclasses.replace(
                planner_settings, seed=seed + 1_000_003 * replan_counter[0]
            )
            stable = project_stable_config(task.dlo, x_now, task.projection)
            if not stable.converged:
                return None
            try:
                return plan(
                    task.scene, models, stable.config, q_now, task.goal_x, replan_settings
                )
            except PlanningError:
                return None

        report = execute_path(
            path,
            world,
            task.execution,
            task.gains,
            replanner=replanner,
            dof_constraint=task.dof_constraint,
        )
        plans = report.paths
        records = report.records
        metrics.final_task_error = report.final_error
        metrics.collision_time_s = report.collision_time
        metrics.replan_count = report.replan_count
        metrics.steps = report.steps
        metrics.status = report.status
    else:
        records = replay_open_loop(path, world, task.gains)
        plans = [path]
        metrics.final_task_error = config_distance(world.x, task.goal_x)
        metrics.collision_time_s = world.collision_time
        metrics.steps = len(records)
        metrics.status = "replayed"

    metrics.manipulation_success = metrics.final_task_error < SUCCESS_ERROR_THRESHOLD
    return RunRecord(task.name, mode, seed, metrics, plans, records, task.goal_x)


def _trapezoid_position(tau: float, accel_fraction: float) -> float:
    """Normalized trapezoidal-velocity position profile, s(0)=0 to s(1)=1."""
    f = accel_fraction
    peak = 1.0 / (1.0 - f)
    if tau <= 0.0:
        return 0.0
    if tau >= 1.0:
        return 1.0
    if tau < f:
        return 0.5 * peak * tau * tau / f
    if tau <= 1.0 - f:
        return peak * (0.5 * f + (tau - f))
    rem = 1.0 - tau
    return 1.0 - 0.5 * peak * rem * rem / f


def replay_open_loop(
    path: PlanPath,
    world: SimWorld,
    gains: ControllerGains,
    accel_fraction: float = 0.25,
) -> list[StepRecord]:
    """Replay planned joint waypoints with no feedback.

    Each waypoint pair is followed with a trapezoidal joint-space velocity
    profile whose peak matches the controller's speed bound, ticked at the
    same control period for comparable collision timing.
    """
    records: list[StepRecord] = []
    n = world.model.dof
    Ku = gains.input_weight_matrix(n)
    for index, (a, b) in enumerate(zip(path.nodes[:-1], path.nodes[1:]), start=1):
        dq = b.q - a.q
        dist = math.sqrt(float(dq @ Ku @ dq))
        if dist < 1e-12:
            continue
        duration = dist / ((1.0 - accel_fraction) * gains.max_speed)
        ticks = max(1, math.ceil(duration / gains.dt))
        duration = ticks * gains.dt
        s_prev = 0.0
        for k in range(1, ticks + 1):
            s = _trapezoid_position(k / ticks, accel_fraction)
            u = dq * ((s - s_prev) / gains.dt)
            s_prev = s
            world.step(u, gains.dt)
            x, q, clearance = world.observe()
            records.append(
                StepRecord(
                    time=world.time,
                    path_index=index,
                    status="open-loop",
                    x=x,
                    q=q,
                    u=u,
                    min_clearance=clearance,
                )
            )
    return records


@dataclass
class BenchmarkRow:
    task_name: str
    queries: int
    planning_successes: int
    planning_times_s: list[float] = field(compare=False)
    manipulation_successes: int = 0
    final_errors: list[float] = field(default_factory=list)
    collision_times_s: list[float] = field(default_factory=list)
    replan_counts: list[int] = field(default_factory=list)


@dataclass
class BenchmarkReport:
    rows: list[BenchmarkRow]
    records: list[MetricsReport]

    def to_records(self) -> list[dict]:
        return [m.to_dict() for m in self.records]


def run_benchmark(
    tasks: list[TaskSpec], seeds: list[int], mode: str = "closed-loop"
) -> BenchmarkReport:
    """Run every task over every seed and aggregate per-task statistics."""
    rows = []
    all_metrics: list[MetricsReport] = []
    for task in tasks:
        row = BenchmarkRow(task.name, queries=0, planning_successes=0, planning_times_s=[])
        for seed in seeds:
            record = run_task(task, mode=mode, seed=seed)
            metrics = record.metrics
            all_metrics.append(metrics)
            row.queries += 1
            if metrics.planning_success:
                row.planning_successes += 1
                row.planning_times_s.append(metrics.planning_time_s)
                row.final_errors.append(metrics.final_task_error)
                row.collision_times_s.append(metrics.collision_time_s)
                row.replan_counts.append(metrics.replan_count)
                if metrics.manipulation_success:
                    row.manipulation_successes += 1
        rows.append(row)
    return BenchmarkReport(rows, all_metrics)


def _mean_std(values: list[float]) -> tuple[float, float]:
    if not values:
        return float("nan"), float("nan")
    arr = np.asarray(values, dtype=float)
    return float(arr.mean()), float(arr.std())


def format_benchmark_table(report: BenchmarkReport) -> str:
    """Fixed-width summary table, one row per task."""
    header = (
        f"{'task':<16} {'plan ok':>8} {'plan time (s)':>16} "
        f"{'manip ok':>9} {'error (cm)':>14} {'collision (s)':>14}"
    )
    lines = [header, "-" * len(header)]
    for row in report.rows:
        t_mean, t_std = _mean_std(row.planning_times_s)
        e_mean, e_std = _mean_std([e * 100.0 for e in row.final_errors])
        c_mean, _ = _mean_std(row.collision_times_s)
        lines.append(
            f"{row.task_name:<16} {row.planning_successes}/{row.queries:<6} "
            f"{t_mean:>8.2f} ± {t_std:<5.2f} "
            f"{row.manipulation_successes}/{row.planning_successes:<7} "
            f"{e_mean:>7.2f} ± {e_std:<4.2f} {c_mean:>13.3f}"
        )
    return "\n".join(lines)


def atomic_write_text(path: Path, text: str) -> None:
    """Write-then-rename so interrupted runs never leave partial files."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def run_record_to_dict(record: RunRecord) -> dict:
    return {
        "schema": "dlo_run/1",
        "task": record.task_name,
        "mode": record.mode,
        "seed": record.seed,
        "metrics": record.metrics.to_dict(),
        "goal": record.goal_x.tolist(),
        "plans": [_plan_to_dict(p) for p in record.plans],
        "log": [r.to_dict() for r in record.records],
    }


def save_run_record(record: RunRecord, path) -> Path:
    path = Path(path)
    atomic_write_text(path, json.dumps(run_record_to_dict(record), indent=1))
    return path


def export_artifacts(record, out_dir, stem: Optional[str] = None) -> dict[str, Path]:
    """Write the plan file, execution log, and DLO polyline dump for a run.

    ``record`` is a RunRecord or an already-serialized run mapping (as saved
    by :func:`save_run_record`). Returns the written paths.
    """
    if isinstance(record, RunRecord):
        record = run_record_to_dict(record)
    out_dir = Path(out_dir)
    stem = stem or f"{record['task']}_{record['mode']}_seed{record['seed']}"

    plan_path = out_dir / f"{stem}_plan.json"
    atomic_write_text(
        plan_path,
        json.dumps(
            {
                "schema": "dlo_plan/1",
                "task": record["task"],
                "seed": record["seed"],
                "segments": [
                    {"index": i, **plan_dict} for i, plan_dict in enumerate(record["plans"])
                ],
            },
            indent=1,
        ),
    )

    log_path = out_dir / f"{stem}_log.jsonl"
    atomic_write_text(log_path, "".join(json.dumps(r) + "\n" for r in record["log"]))

    csv_path = out_dir / f"{stem}_dlo.csv"
    lines = []
    if record["log"]:
        m = len(record["log"][0]["x"])
        header = ["time"] + [f"f{k}{axis}" for k in range(m) for axis in "xyz"]
        lines.append(",".join(header))
        for entry in record["log"]:
            flat = [coord for feature in entry["x"] for coord in feature]
            lines.append(",".join(repr(v) for v in [entry["time"], *flat]))
    atomic_write_text(csv_path, "\n".join(lines) + ("\n" if lines else ""))

    return {"plan": plan_path, "log": log_path, "polyline": csv_path}


def strip_timing(obj):
    """Recursively drop wall-clock measurement fields from a JSON-like object."""
    if isinstance(obj, dict):
        return {k: strip_timing(v) for k, v in obj.items() if k not in TIMING_KEYS}
    if isinstance(obj, list):
        return [strip_timing(v) for v in obj]
    return obj


def output_dir(explicit: Optional[str] = None) -> Path:
    """Resolve the output directory: flag, then environment, then ./runs."""
    if explicit:
        return Path(explicit)
    env = os.environ.get(OUTPUT_DIR_ENV)
    return Path(env) if env else Path("runs")
