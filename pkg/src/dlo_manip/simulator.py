"""Quasi-static ground-truth plant for closed-loop experiments.

The simulator advances the robot by commanded joint velocities, pins the
DLO's boundary features to the grippers, and settles the interior features
by minimizing its own energy. That energy deliberately differs from the
planner-side model (scaled spring stiffnesses plus a discrete bending
term), so planned paths are only approximately executable, which is what
the closed-loop controller has to compensate for.

Penetrations are detected and timed but not resolved.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kinematics as kin
from .dlo_model import (
    DloParams,
    ProjectionSettings,
    as_config,
    boundary_indices,
    minimize_pinned,
    spring_energy_fns,
    spring_residual_system,
)
from .geometry import Scene, dlo_min_clearance, segments_clearance
from .kinematics import ArmModel, EndEffectorState


class SimulationFault(RuntimeError):
    """The plant failed to settle; the world is unusable afterwards."""


@dataclass(frozen=True)
class MismatchSpec:
    """How the simulator's true DLO differs from the planner's model."""

    stiffness1_scale: float = 2.0
    stiffness2_scale: float = 0.5
    bending_stiffness: float = 0.1

    def __post_init__(self):
        if self.stiffness1_scale <= 0.0 or self.stiffness2_scale <= 0.0:
            raise ValueError("stiffness scale factors must be > 0")
        if self.bending_stiffness < 0.0:
            raise ValueError("bending stiffness must be >= 0")

    def true_params(self, params: DloParams) -> DloParams:
        return DloParams(
            length=params.length,
            num_features=params.num_features,
            stiffness1=params.stiffness1 * self.stiffness1_scale,
            stiffness2=params.stiffness2 * self.stiffness2_scale,
        )


def _bent_energy_value(params: DloParams, bending: float):
    """Spring energy plus ``bending * sum ||x[k-1] - 2 x[k] + x[k+1]||^2``."""
    spring_value, _ = spring_energy_fns(params)

    def value(x: np.ndarray) -> float:
        e = spring_value(x)
        if bending != 0.0:
            lap = x[:-2] - 2.0 * x[1:-1] + x[2:]
            e += bending * float(np.sum(lap * lap))
        return e

    return value


def _bent_residual_system(params: DloParams, bending: float):
    """Least-squares form of the true energy: spring residuals plus one
    linear residual per interior-feature Laplacian component."""
    springs = spring_residual_system(params)
    if bending == 0.0:
        return springs
    m = params.num_features
    w = np.sqrt(2.0 * bending)
    n_bend = 3 * (m - 2)
    J_bend = np.zeros((n_bend, 3 * m))
    for k in range(m - 2):
        for a in range(3):
            row = 3 * k + a
            J_bend[row, 3 * k + a] = w
            J_bend[row, 3 * (k + 1) + a] = -2.0 * w
            J_bend[row, 3 * (k + 2) + a] = w

    def system(x: np.ndarray):
        f_s, J_s = springs(x)
        lap = x[:-2] - 2.0 * x[1:-1] + x[2:]
        return np.concatenate([f_s, w * lap.ravel()]), np.vstack([J_s, J_bend])

    return system


class SimWorld:
    """Single-owner plant state; mutate only through :meth:`step`."""

    def __init__(
        self,
        scene: Scene,
        model: ArmModel,
        params: DloParams,
        x0,
        q0,
        mismatch: MismatchSpec = MismatchSpec(),
        dlo_radius: float = 0.005,
        settle: ProjectionSettings = ProjectionSettings(gradient_tolerance=1e-8, max_iterations=2000),
        observation_noise_std: float = 0.0,
        seed: int = 0,
    ):
        self.scene = scene
        self.model = model
        self.params = params
        self.mismatch = mismatch
        self.true_params = mismatch.true_params(params)
        self.dlo_radius = float(dlo_radius)
        self.settle_settings = settle
        self.observation_noise_std = float(observation_noise_std)
        self._rng = np.random.default_rng(seed)
        self._value = _bent_energy_value(self.true_params, mismatch.bending_stiffness)
        self._residual_system = _bent_residual_system(
            self.true_params, mismatch.bending_stiffness
        )
        self._boundary = list(boundary_indices(params.num_features))

        self.q = model.clamp_to_limits(np.asarray(q0, dtype=float))
        self.x = as_config(x0, params.num_features).copy()
        self.collision_time = 0.0
        self.collision_log: list[float] = []
        self.time = 0.0
        self.faulted = False
        self._pin_and_settle()
        self.last_clearance = self._min_clearance()

    def true_energy(self, x=None) -> float:
        return self._value(self.x if x is None else np.asarray(x, dtype=float))

    def _pin_and_settle(self):
        ends = kin.forward_kinematics(self.model, self.q)
        self.x[self._boundary] = kin.grasp_map(ends, self.params)
        x, residual, converged, _ = minimize_pinned(
            self._residual_system,
            self.x,
            self._boundary,
            self.settle_settings.gradient_tolerance,
            self.settle_settings.max_iterations,
        )
        if not converged:
            self.faulted = True
            raise SimulationFault(f"interior settle did not converge (residual {residual:.3e})")
        self.x = x

    def _min_clearance(self) -> float:
        dlo = dlo_min_clearance(self.scene, self.x, self.dlo_radius)
        arm = segments_clearance(self.scene, kin.arm_capsules(self.model, self.q))
        return min(dlo, arm)

    def step(self, u, dt: float) -> None:
        """Apply joint velocity ``u`` for ``dt`` seconds and re-settle the DLO."""
        if self.faulted:
            raise SimulationFault("world is faulted")
        u = np.asarray(u, dtype=float).reshape(-1)
        if u.size != self.model.dof or not np.all(np.isfinite(u)):
            raise ValueError("control input must be a finite joint-velocity vector")
        if dt <= 0.0:
            raise ValueError("dt must be > 0")
        self.q = self.model.clamp_to_limits(self.q + u * dt)
        self._pin_and_settle()
        self.last_clearance = self._min_clearance()
        if self.last_clearance <= 0.0:
            self.collision_time += dt
            self.collision_log.append(dt)
        self.time += dt

    def observe(self) -> tuple[np.ndarray, np.ndarray, float]:
        """Current ``(x, q, min_clearance)``; feature noise added if configured."""
        if self.faulted:
            raise SimulationFault("world is faulted")
        x = self.x.copy()
        if self.observation_noise_std > 0.0:
            x += self._rng.normal(0.0, self.observation_noise_std, x.shape)
        return x, self.q.copy(), self.last_clearance

    def ground_truth_jacobian(self, h: float = 1e-4) -> np.ndarray:
        """Finite-difference sensitivity of the settled DLO to gripper motion.

        Central differences of the settle map with respect to each of the 12
        end-effector DoFs (world-frame translations and rotations), probed
        around the current state without mutating it.
        """
        if self.faulted:
            raise SimulationFault("world is faulted")
        ends = kin.forward_kinematics(self.model, self.q)
        m = self.params.num_features
        J = np.zeros((3 * m, kin.TWIST_DIM))
        tolerance = min(self.settle_settings.gradient_tolerance, 1e-9)

        def settled(perturbed: EndEffectorState) -> np.ndarray:
            x = self.x.copy()
            x[self._boundary] = kin.grasp_map(perturbed, self.params)
            out, residual, converged, _ = minimize_pinned(
                self._residual_system,
                x,
                self._boundary,
                tolerance,
                self.settle_settings.max_iterations,
            )
            if not converged:
                raise SimulationFault(
                    f"settle failed while probing the Jacobian (residual {residual:.3e})"
                )
            return out

        for col in range(kin.TWIST_DIM):
            arm = col // 6
            local = col % 6
            plus = _perturb_ends(ends, arm, local, h)
            minus = _perturb_ends(ends, arm, local, -h)
            J[:, col] = (settled(plus) - settled(minus)).ravel() / (2.0 * h)
        return J


def _perturb_ends(ends: EndEffectorState, arm: int, dof: int, h: float) -> EndEffectorState:
    positions = ends.positions.copy()
    R = ends.rotation_matrices()
    if dof < 3:
        positions[arm, dof] += h
    else:
        axis = np.zeros(3)
        axis[dof - 3] = 1.0
        R = R.copy()
        R[arm] = kin.rotation_about_axis(axis, h) @ R[arm]
    return EndEffectorState.from_matrices(positions[0], R[0], positions[1], R[1])
