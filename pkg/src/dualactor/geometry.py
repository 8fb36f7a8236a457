"""Geometric kernel: rigid transforms, single-joint kinematics and point clouds.

All geometry is float64. Points are plain ``(3,)`` arrays and clouds are
``(N, 3)`` arrays wrapped in :class:`PointCloud` together with optional
per-point channels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

ORTHO_TOL = 1e-9


class GeometryError(ValueError):
    pass


def as_point(p) -> np.ndarray:
    arr = np.asarray(p, dtype=np.float64).reshape(3)
    if not np.all(np.isfinite(arr)):
        raise GeometryError(f"non-finite point {arr}")
    return arr


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        trans = as_point(self.translation)
        if np.abs(rot @ rot.T - np.eye(3)).max() > ORTHO_TOL or abs(np.linalg.det(rot) - 1.0) > ORTHO_TOL:
            raise GeometryError("rotation must be orthonormal with determinant +1")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)

    @classmethod
    def identity(cls) -> RigidTransform:
        return cls(np.eye(3), np.zeros(3))

    def inverse(self) -> RigidTransform:
        rt = self.rotation.T
        return RigidTransform(rt, -(rt @ self.translation))

    def compose(self, other: RigidTransform) -> RigidTransform:
        """``self ∘ other``: apply ``other`` first."""
        return RigidTransform(self.rotation @ other.rotation,
                              self.rotation @ other.translation + self.translation)

    def apply_points(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def apply_vectors(self, vecs: np.ndarray) -> np.ndarray:
        return np.asarray(vecs, dtype=np.float64) @ self.rotation.T

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m


def rotation_about_axis(axis: np.ndarray, angle: float) -> np.ndarray:
    """Rodrigues rotation matrix for a unit ``axis``."""
    x, y, z = axis
    c, s = math.cos(angle), math.sin(angle)
    k = np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    return c * np.eye(3) + s * k + (1.0 - c) * np.outer(axis, axis)


class JointKind(str, Enum):
    PRISMATIC = "prismatic"
    REVOLUTE = "revolute"


@dataclass(frozen=True)
class Joint:
    kind: JointKind
    axis: np.ndarray
    origin: np.ndarray
    limits: tuple[float, float]

    def __post_init__(self):
        axis = as_point(self.axis)
        if abs(np.linalg.norm(axis) - 1.0) > 1e-9:
            raise GeometryError(f"joint axis must be unit length, got |axis|={np.linalg.norm(axis)!r}")
        lo, hi = (float(v) for v in self.limits)
        if not lo < hi:
            raise GeometryError(f"joint limits must satisfy lo < hi, got {(lo, hi)}")
        object.__setattr__(self, "kind", JointKind(self.kind))
        object.__setattr__(self, "axis", axis)
        object.__setattr__(self, "origin", as_point(self.origin))
        object.__setattr__(self, "limits", (lo, hi))

    def clamp(self, value: float) -> tuple[float, bool]:
        lo, hi = self.limits
        v = min(max(float(value), lo), hi)
        return v, v != float(value)

    def axis_distance(self, pts: np.ndarray) -> np.ndarray:
        """Distance of each point to the joint's rotation axis line."""
        rel = np.asarray(pts, dtype=np.float64) - self.origin
        radial = rel - np.outer(rel @ self.axis, self.axis)
        return np.linalg.norm(radial, axis=-1)


def fk_transform(joint: Joint, value: float) -> RigidTransform:
    """Pose of the moving part at joint ``value`` relative to its rest pose.

    Values outside the joint limits are clamped; callers that need to know
    use :meth:`Joint.clamp` themselves.
    """
    value, _ = joint.clamp(value)
    if joint.kind is JointKind.PRISMATIC:
        return RigidTransform(np.eye(3), value * joint.axis)
    rot = rotation_about_axis(joint.axis, value)
    return RigidTransform(rot, joint.origin - rot @ joint.origin)


@dataclass
class PointCloud:
    points: np.ndarray
    channels: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise GeometryError(f"points must have shape (N, 3), got {pts.shape}")
        if np.isnan(pts).any():
            raise GeometryError("NaN in point cloud")
        self.points = pts
        for name, values in self.channels.items():
            values = np.asarray(values)
            if values.shape[0] != len(pts):
                raise GeometryError(f"channel {name!r} has {values.shape[0]} entries for {len(pts)} points")
            if values.dtype.kind == "f" and np.isnan(values).any():
                raise GeometryError(f"NaN in channel {name!r}")
            self.channels[name] = values

    def __len__(self) -> int:
        return len(self.points)

    def select(self, index) -> PointCloud:
        return PointCloud(self.points[index], {k: v[index] for k, v in self.channels.items()})

    def with_channel(self, name: str, values) -> PointCloud:
        return PointCloud(self.points, {**self.channels, name: np.asarray(values)})


def nearest_distance(p, cloud: PointCloud | np.ndarray) -> float:
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    if len(pts) == 0:
        raise GeometryError("empty key-part cloud")
    return float(np.min(np.linalg.norm(pts - as_point(p), axis=1)))


def nearest_distances(queries: np.ndarray, cloud: PointCloud | np.ndarray, block: int = 256) -> np.ndarray:
    """Vectorised exhaustive scan: ``nearest_distance`` for every query row.

    Queries are processed in blocks to bound memory; each distance is the
    same ``norm(p - k)`` computed by :func:`nearest_distance`.
    """
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    if len(pts) == 0:
        raise GeometryError("empty key-part cloud")
    queries = np.asarray(queries, dtype=np.float64)
    out = np.empty(len(queries))
    for start in range(0, len(queries), block):
        q = queries[start:start + block]
        out[start:start + block] = np.linalg.norm(q[:, None, :] - pts[None, :, :], axis=2).min(axis=1)
    return out


def farthest_point_indices(points: np.ndarray, n: int, start_index: int = 0) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    total = len(pts)
    if n < 1:
        raise GeometryError("farthest point sampling needs n >= 1")
    if n > total:
        raise GeometryError(f"cannot sample {n} points from a cloud of {total}")
    if not 0 <= start_index < total:
        raise GeometryError(f"start_index {start_index} out of range for {total} points")
    xs, ys, zs = (np.ascontiguousarray(pts[:, k]) for k in range(3))
    mind = np.full(total, np.inf)
    chosen = np.empty(n, dtype=np.int64)
    idx = start_index
    for k in range(n):
        chosen[k] = idx
        d = np.sqrt((xs - xs[idx]) ** 2 + (ys - ys[idx]) ** 2 + (zs - zs[idx]) ** 2)
        np.minimum(mind, d, out=mind)
        # argmax returns the first maximum, i.e. ties go to the lowest index
        idx = int(mind.argmax())
    return chosen


def farthest_point_sample(cloud: PointCloud, n: int, start_index: int = 0) -> PointCloud:
    return cloud.select(farthest_point_indices(cloud.points, n, start_index))


def apply_transform(transform: RigidTransform, cloud: PointCloud) -> PointCloud:
    pts = transform.apply_points(cloud.points)
    return PointCloud(pts, dict(cloud.channels))
