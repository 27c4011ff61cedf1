"""Obstacle primitives, signed-distance queries, and collision predicates.

Distances are in meters and signed: positive outside an obstacle, negative
inside. Batch queries take ``(N, 3)`` float arrays and are vectorized over
points. Ties between obstacles are broken by scene order so every query,
including queries on a medial axis, is deterministic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import numpy as np

# Returned where the true gradient direction is undefined (empty scene,
# sphere center, capsule axis).
_FALLBACK_GRADIENT = np.array([1.0, 0.0, 0.0])

DEFAULT_SEGMENT_RESOLUTION = 0.005
"""Sampling step (m) used when checking segments against the scene."""


def _as_points(p) -> np.ndarray:
    pts = np.asarray(p, dtype=float)
    if pts.ndim == 1:
        pts = pts[None, :]
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"expected points of shape (N, 3), got {pts.shape}")
    return pts


def _unit_rows(v: np.ndarray) -> np.ndarray:
    """Normalize rows; rows with near-zero norm get the fallback direction."""
    norms = np.linalg.norm(v, axis=1)
    out = np.empty_like(v)
    ok = norms > 1e-12
    out[ok] = v[ok] / norms[ok, None]
    out[~ok] = _FALLBACK_GRADIENT
    return out


@dataclass(frozen=True)
class Sphere:
    center: np.ndarray
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float).reshape(3))
        if self.radius <= 0.0:
            raise ValueError("sphere radius must be > 0")

    def distances(self, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        delta = pts - self.center
        return np.linalg.norm(delta, axis=1) - self.radius, _unit_rows(delta)


@dataclass(frozen=True)
class Box:
    """Axis-aligned box given by center and half extents."""

    center: np.ndarray
    half_extents: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float).reshape(3))
        object.__setattr__(
            self, "half_extents", np.asarray(self.half_extents, dtype=float).reshape(3)
        )
        if np.any(self.half_extents <= 0.0):
            raise ValueError("box half extents must be > 0 componentwise")

    def distances(self, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        local = pts - self.center
        q = np.abs(local) - self.half_extents
        outside = np.maximum(q, 0.0)
        d_out = np.linalg.norm(outside, axis=1)
        d_in = np.minimum(q.max(axis=1), 0.0)
        dist = d_out + d_in

        sign = np.where(local < 0.0, -1.0, 1.0)
        grad = np.zeros_like(pts)
        out_mask = d_out > 1e-12
        grad[out_mask] = sign[out_mask] * outside[out_mask] / d_out[out_mask, None]
        # Inside (or exactly on a face): steepest increase is through the
        # least-deep face; argmax takes the first axis on ties.
        in_mask = ~out_mask
        if np.any(in_mask):
            axis = np.argmax(q[in_mask], axis=1)
            g = np.zeros((int(in_mask.sum()), 3))
            g[np.arange(len(axis)), axis] = sign[in_mask][np.arange(len(axis)), axis]
            grad[in_mask] = g
        return dist, grad


@dataclass(frozen=True)
class Capsule:
    """Capsule around segment ``a``-``b``; coincident endpoints degrade to a sphere."""

    a: np.ndarray
    b: np.ndarray
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "a", np.asarray(self.a, dtype=float).reshape(3))
        object.__setattr__(self, "b", np.asarray(self.b, dtype=float).reshape(3))
        if self.radius <= 0.0:
            raise ValueError("capsule radius must be > 0")

    def distances(self, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        axis = self.b - self.a
        length_sq = float(axis @ axis)
        rel = pts - self.a
        if length_sq < 1e-18:
            t = np.zeros(len(pts))
        else:
            t = np.clip(rel @ axis / length_sq, 0.0, 1.0)
        delta = rel - t[:, None] * axis
        return np.linalg.norm(delta, axis=1) - self.radius, _unit_rows(delta)


Obstacle = Union[Sphere, Box, Capsule]


@dataclass(frozen=True)
class Scene:
    """Obstacle set plus an axis-aligned workspace box (sampling bounds)."""

    obstacles: tuple[Obstacle, ...]
    workspace_min: np.ndarray
    workspace_max: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "obstacles", tuple(self.obstacles))
        object.__setattr__(
            self, "workspace_min", np.asarray(self.workspace_min, dtype=float).reshape(3)
        )
        object.__setattr__(
            self, "workspace_max", np.asarray(self.workspace_max, dtype=float).reshape(3)
        )
        if not np.all(self.workspace_min < self.workspace_max):
            raise ValueError("workspace bounds must satisfy min < max componentwise")


@dataclass(frozen=True)
class SignedDistanceResult:
    distance: float
    gradient: np.ndarray  # unit 3-vector pointing away from the closest surface


def signed_distance_batch(scene: Scene, pts) -> tuple[np.ndarray, np.ndarray]:
    """Minimum signed distance to any obstacle for each point.

    Returns ``(distances (N,), gradients (N, 3))``. With no obstacles the
    distance is +inf and the gradient is an arbitrary unit vector.
    """
    pts = _as_points(pts)
    n = len(pts)
    if not scene.obstacles:
        return np.full(n, np.inf), np.tile(_FALLBACK_GRADIENT, (n, 1))
    dists = np.empty((len(scene.obstacles), n))
    grads = np.empty((len(scene.obstacles), n, 3))
    for i, obstacle in enumerate(scene.obstacles):
        dists[i], grads[i] = obstacle.distances(pts)
    nearest = np.argmin(dists, axis=0)  # first obstacle wins ties
    cols = np.arange(n)
    return dists[nearest, cols], grads[nearest, cols]


def signed_distance(scene: Scene, p) -> SignedDistanceResult:
    """Signed distance from ``p`` to the closest obstacle in the scene."""
    d, g = signed_distance_batch(scene, np.asarray(p, dtype=float).reshape(1, 3))
    return SignedDistanceResult(float(d[0]), g[0])


def sample_segment_points(a, b, resolution: float) -> np.ndarray:
    """Points along segment a-b at most ``resolution`` apart, endpoints included."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    length = float(np.linalg.norm(b - a))
    count = max(2, int(math.ceil(length / resolution)) + 1)
    t = np.linspace(0.0, 1.0, count)
    return a + t[:, None] * (b - a)


def segment_clearance(
    scene: Scene, a, b, radius: float, resolution: float = DEFAULT_SEGMENT_RESOLUTION
) -> float:
    """Clearance of a capsule of the given radius around segment a-b.

    Sampled at ``resolution`` spacing; values <= 0 mean collision. Empty
    scenes return +inf.
    """
    if radius < 0.0:
        raise ValueError("radius must be >= 0")
    if not scene.obstacles:
        return float("inf")
    d, _ = signed_distance_batch(scene, sample_segment_points(a, b, resolution))
    return float(d.min()) - radius


def segments_clearance(
    scene: Scene,
    segments: list[tuple[np.ndarray, np.ndarray, float]],
    resolution: float = DEFAULT_SEGMENT_RESOLUTION,
) -> float:
    """Minimum clearance over ``(a, b, radius)`` capsules, batched in one query."""
    if not scene.obstacles or not segments:
        return float("inf")
    chunks = []
    radii = []
    for a, b, radius in segments:
        pts = sample_segment_points(a, b, resolution)
        chunks.append(pts)
        radii.append(np.full(len(pts), radius))
    d, _ = signed_distance_batch(scene, np.vstack(chunks))
    return float(np.min(d - np.concatenate(radii)))


def dlo_segments(x: np.ndarray, radius: float) -> list[tuple[np.ndarray, np.ndarray, float]]:
    x = np.asarray(x, dtype=float)
    return [(x[k], x[k + 1], radius) for k in range(len(x) - 1)]


def dlo_min_clearance(
    scene: Scene,
    x: np.ndarray,
    dlo_radius: float,
    resolution: float = DEFAULT_SEGMENT_RESOLUTION,
) -> float:
    """Minimum clearance of the feature-chain capsules against the scene."""
    return segments_clearance(scene, dlo_segments(x, dlo_radius), resolution)


def dlo_in_collision(
    scene: Scene,
    x: np.ndarray,
    dlo_radius: float = 0.005,
    resolution: float = DEFAULT_SEGMENT_RESOLUTION,
) -> bool:
    """True iff any inter-feature segment of the DLO intersects an obstacle."""
    x = np.asarray(x, dtype=float)
    if len(x) < 2:
        raise ValueError("DLO needs at least 2 features")
    return dlo_min_clearance(scene, x, dlo_radius, resolution) <= 0.0
