"""Discrete mass-spring model of a deformable linear object (DLO).

A DLO configuration is an ``(m, 3)`` float array of feature positions. The
elastic energy uses two spring families: adjacent features (rest length
``L/(m-1)``) and next-nearest features (rest length ``2L/(m-1)``). Stable
configurations locally minimize this energy with the two features at each
end held fixed; ``project_stable_config`` performs that minimization.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

_COINCIDENT_TOL = 1e-9


class DegenerateConfigError(ValueError):
    """Raised when coincident features make the spring gradient singular."""


@dataclass(frozen=True)
class DloParams:
    """Physical description of the DLO used by the planner-side model."""

    length: float
    num_features: int
    stiffness1: float = 1.0  # adjacent-pair springs
    stiffness2: float = 1.0  # next-nearest-pair springs

    def __post_init__(self):
        if self.length <= 0.0:
            raise ValueError("DLO length must be > 0")
        if self.num_features < 3:
            raise ValueError("need at least 3 features")
        if self.stiffness1 <= 0.0 or self.stiffness2 < 0.0:
            raise ValueError("stiffness1 must be > 0 and stiffness2 >= 0")

    @property
    def rest_length(self) -> float:
        return self.length / (self.num_features - 1)


@dataclass(frozen=True)
class ProjectionSettings:
    gradient_tolerance: float = 1e-6
    max_iterations: int = 500
    extra_fixed: tuple[int, ...] = ()

    def __post_init__(self):
        if self.gradient_tolerance <= 0.0 or self.max_iterations <= 0:
            raise ValueError("tolerance and max iterations must be > 0")


@dataclass(frozen=True)
class StableConfig:
    """Projection result: configuration plus achieved free-point residual."""

    config: np.ndarray
    residual: float
    converged: bool


def as_config(x, num_features: int | None = None) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[1] != 3:
        raise ValueError(f"expected configuration of shape (m, 3), got {x.shape}")
    if num_features is not None and x.shape[0] != num_features:
        raise ValueError(f"expected {num_features} features, got {x.shape[0]}")
    if not np.all(np.isfinite(x)):
        raise ValueError("configuration contains non-finite values")
    return x


def boundary_indices(num_features: int) -> tuple[int, int, int, int]:
    """Indices of the four end features held fixed during projection."""
    return (0, 1, num_features - 2, num_features - 1)


def _spring_deltas(x: np.ndarray):
    d1 = x[1:] - x[:-1]
    d2 = x[2:] - x[:-2]
    return d1, np.linalg.norm(d1, axis=1), d2, np.linalg.norm(d2, axis=1)


def energy(params: DloParams, x) -> float:
    """Total spring energy of the configuration; zero iff all springs at rest."""
    x = as_config(x, params.num_features)
    _, n1, _, n2 = _spring_deltas(x)
    r = params.rest_length
    e1 = n1 - r
    e2 = n2 - 2.0 * r
    return 0.5 * params.stiffness1 * float(e1 @ e1) + 0.5 * params.stiffness2 * float(e2 @ e2)


def energy_gradient(params: DloParams, x) -> np.ndarray:
    """Per-feature energy gradient, shape ``(m, 3)``."""
    _, grad = energy_value_and_grad(params, x)
    return grad


def energy_value_and_grad(params: DloParams, x) -> tuple[float, np.ndarray]:
    x = as_config(x, params.num_features)
    d1, n1, d2, n2 = _spring_deltas(x)
    if np.any(n1 < _COINCIDENT_TOL) or np.any(n2 < _COINCIDENT_TOL):
        raise DegenerateConfigError("coincident features: spring gradient undefined")
    r = params.rest_length
    e1 = n1 - r
    e2 = n2 - 2.0 * r
    value = 0.5 * params.stiffness1 * float(e1 @ e1) + 0.5 * params.stiffness2 * float(e2 @ e2)

    grad = np.zeros_like(x)
    f1 = (params.stiffness1 * e1 / n1)[:, None] * d1
    grad[1:] += f1
    grad[:-1] -= f1
    if params.stiffness2 != 0.0:
        f2 = (params.stiffness2 * e2 / n2)[:, None] * d2
        grad[2:] += f2
        grad[:-2] -= f2
    return value, grad


def spring_energy_fns(params: DloParams):
    """(value, value_and_grad) callables over raw ``(m, 3)`` arrays."""

    def value(x: np.ndarray) -> float:
        _, n1, _, n2 = _spring_deltas(x)
        r = params.rest_length
        e1 = n1 - r
        e2 = n2 - 2.0 * r
        return 0.5 * params.stiffness1 * float(e1 @ e1) + 0.5 * params.stiffness2 * float(e2 @ e2)

    def value_and_grad(x: np.ndarray) -> tuple[float, np.ndarray]:
        return energy_value_and_grad(params, x)

    return value, value_and_grad


def spring_residual_system(params: DloParams) -> Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]]:
    """Weighted least-squares form of the spring energy.

    Returns a callable mapping ``x (m, 3)`` to ``(f, J)`` with
    ``energy == 0.5 * f @ f`` and ``J`` the ``(n_res, 3m)`` Jacobian of the
    residuals. One residual per spring: ``sqrt(stiffness) * (length - rest)``.
    """
    m = params.num_features
    r = params.rest_length
    w1 = np.sqrt(params.stiffness1)
    w2 = np.sqrt(params.stiffness2)
    n1 = m - 1
    n2 = m - 2 if params.stiffness2 != 0.0 else 0
    rows1 = np.arange(n1)
    rows2 = np.arange(n2)

    def system(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        d1, len1, d2, len2 = _spring_deltas(x)
        if np.any(len1 < _COINCIDENT_TOL) or np.any(len2 < _COINCIDENT_TOL):
            raise DegenerateConfigError("coincident features: spring gradient undefined")
        f = np.empty(n1 + n2)
        f[:n1] = w1 * (len1 - r)
        J = np.zeros((n1 + n2, 3 * m))
        u1 = w1 * d1 / len1[:, None]
        for a in range(3):
            J[rows1, 3 * (rows1 + 1) + a] = u1[:, a]
            J[rows1, 3 * rows1 + a] = -u1[:, a]
        if n2:
            f[n1:] = w2 * (len2 - 2.0 * r)
            u2 = w2 * d2 / len2[:, None]
            for a in range(3):
                J[n1 + rows2, 3 * (rows2 + 2) + a] = u2[:, a]
                J[n1 + rows2, 3 * rows2 + a] = -u2[:, a]
        return f, J

    return system


def minimize_pinned(
    residual_fn: Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]],
    x0: np.ndarray,
    fixed_indices: Sequence[int],
    tolerance: float,
    max_iterations: int,
) -> tuple[np.ndarray, float, bool, int]:
    """Levenberg-Marquardt over the non-fixed features of a configuration.

    ``residual_fn`` maps a configuration to ``(f, J)`` so the objective is
    ``0.5 * f @ f``. Fixed rows of ``x0`` are never touched. Converges when
    the L2 norm of the free-coordinate gradient ``J^T f`` drops to
    ``tolerance``; steps are only accepted when they reduce the objective,
    so it never increases. On failure to converge the best iterate is
    returned with ``converged=False``.

    Returns ``(x, residual, converged, iterations)``.
    """
    x0 = np.asarray(x0, dtype=float)
    m = x0.shape[0]
    fixed = np.unique(np.asarray(fixed_indices, dtype=int))
    if np.any(fixed < 0) or np.any(fixed >= m):
        raise ValueError("fixed index out of range")
    free_features = np.setdiff1d(np.arange(m), fixed)
    x = x0.copy()
    if free_features.size == 0:
        return x, 0.0, True, 0
    free_cols = (3 * free_features[:, None] + np.arange(3)).ravel()

    f, J = residual_fn(x)
    Jf = J[:, free_cols]
    g = Jf.T @ f
    gnorm = float(np.linalg.norm(g))
    if gnorm <= tolerance:
        return x, gnorm, True, 0

    cost = 0.5 * float(f @ f)
    mu = 1e-3
    identity = np.eye(free_cols.size)
    converged = False
    iterations = 0

    for iterations in range(1, max_iterations + 1):
        A = Jf.T @ Jf
        accepted = False
        for _ in range(25):
            try:
                delta = np.linalg.solve(A + mu * identity, -g)
            except np.linalg.LinAlgError:
                mu *= 9.0
                continue
            x_try = x.copy()
            x_try[free_features] += delta.reshape(-1, 3)
            try:
                f_try, J_try = residual_fn(x_try)
            except DegenerateConfigError:
                mu *= 9.0
                continue
            cost_try = 0.5 * float(f_try @ f_try)
            if cost_try < cost:
                x, f, cost = x_try, f_try, cost_try
                Jf = J_try[:, free_cols]
                mu = max(mu / 3.0, 1e-12)
                accepted = True
                break
            mu *= 9.0
        if not accepted:
            break  # damping exhausted; current iterate is the best we have
        g = Jf.T @ f
        gnorm = float(np.linalg.norm(g))
        if gnorm <= tolerance:
            converged = True
            break

    return x, gnorm, converged, iterations


def project_stable_config(
    params: DloParams, x0, settings: ProjectionSettings = ProjectionSettings()
) -> StableConfig:
    """Project a raw configuration onto the stable-configuration manifold.

    Locally minimizes the spring energy over the interior features while the
    first two and last two features (plus any ``extra_fixed`` indices) keep
    their exact input values. The result never has higher energy than the
    input.
    """
    x0 = as_config(x0, params.num_features)
    if params.num_features < 5:
        raise ValueError("projection needs at least 5 features (no free interior otherwise)")
    fixed = boundary_indices(params.num_features) + tuple(settings.extra_fixed)
    x, residual, converged, _ = minimize_pinned(
        spring_residual_system(params),
        x0,
        fixed,
        settings.gradient_tolerance,
        settings.max_iterations,
    )
    return StableConfig(x, residual, converged)


def config_distance(xa, xb) -> float:
    """Euclidean distance between stacked configuration vectors."""
    xa = np.asarray(xa, dtype=float)
    xb = np.asarray(xb, dtype=float)
    if xa.shape != xb.shape:
        raise ValueError(f"configuration shapes differ: {xa.shape} vs {xb.shape}")
    return float(np.linalg.norm((xa - xb).ravel()))


def interpolate_config(x_from, x_to, t: float) -> np.ndarray:
    """Interpolate two configurations without over-compressing the shape.

    The centroid moves linearly. Each feature's centroid-relative offset
    rotates along the geodesic between its endpoint directions while its
    magnitude interpolates linearly, which preserves the overall shape of
    the chain. Near-antipodal (and near-zero) offset pairs fall back to
    plain linear interpolation.
    """
    x_from = np.asarray(x_from, dtype=float)
    x_to = np.asarray(x_to, dtype=float)
    if x_from.shape != x_to.shape:
        raise ValueError("configurations must share the feature count")
    if t <= 0.0:
        return x_from.copy()
    if t >= 1.0:
        return x_to.copy()

    c_from = x_from.mean(axis=0)
    c_to = x_to.mean(axis=0)
    c = (1.0 - t) * c_from + t * c_to

    u = x_from - c_from
    v = x_to - c_to
    nu = np.linalg.norm(u, axis=1)
    nv = np.linalg.norm(v, axis=1)

    offsets = np.empty_like(u)
    for k in range(len(u)):
        if nu[k] < 1e-12 or nv[k] < 1e-12:
            offsets[k] = (1.0 - t) * u[k] + t * v[k]
            continue
        du = u[k] / nu[k]
        dv = v[k] / nv[k]
        cos_angle = float(np.clip(du @ dv, -1.0, 1.0))
        angle = float(np.arccos(cos_angle))
        if angle > np.pi - 1e-6:
            offsets[k] = (1.0 - t) * u[k] + t * v[k]
            continue
        magnitude = (1.0 - t) * nu[k] + t * nv[k]
        if angle < 1e-12:
            direction = du
        else:
            sin_angle = np.sin(angle)
            direction = (
                np.sin((1.0 - t) * angle) * du + np.sin(t * angle) * dv
            ) / sin_angle
        offsets[k] = magnitude * direction
    return c + offsets
