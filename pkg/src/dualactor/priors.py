"""Ground-truth visual priors: affordance maps, motion flow and stage labels."""

from __future__ import annotations

from enum import IntEnum

import numpy as np

from .geometry import GeometryError, Joint, JointKind, PointCloud, fk_transform, nearest_distances


class PriorError(ValueError):
    pass


class Stage(IntEnum):
    APPROACH = 0
    MANIPULATE = 1


class Gripper(IntEnum):
    OPEN = 0
    CLOSED = 1


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    # split by sign to stay exact at large |x|
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def affordance_from_distance(d, alpha: float) -> np.ndarray:
    if not alpha > 0:
        raise PriorError("scaling factor must be positive")
    return 3.0 - 4.0 * sigmoid(alpha * np.asarray(d, dtype=np.float64))


def affordance_map(scene: PointCloud, key_part: PointCloud, alpha: float) -> np.ndarray:
    """Per-point affordance ``3 - 4 * sigmoid(alpha * d(p))``.

    ``d(p)`` is the distance from each scene point to the closest key-part
    point, so the map is 1 exactly on the key part and decays towards -1.
    """
    if not alpha > 0:
        raise PriorError("scaling factor must be positive")
    try:
        d = nearest_distances(scene.points, key_part)
    except GeometryError as exc:
        raise PriorError(str(exc)) from exc
    return affordance_from_distance(d, alpha)


def motion_flow(scene: PointCloud, moving_mask, joint: Joint, j_now: float, j_next: float) -> np.ndarray:
    """Raw finite-difference flow of the masked points between two joint values.

    The frame interval is one step, so the flow is the chord
    ``T(j_next) T(j_now)^-1 p - p``. Unmasked points get exactly zero.
    """
    mask = np.asarray(moving_mask, dtype=bool)
    if mask.shape != (len(scene),):
        raise PriorError(f"mask has shape {mask.shape}, expected ({len(scene)},)")
    flow = np.zeros((len(scene), 3))
    if j_next == j_now or not mask.any():
        return flow
    step = fk_transform(joint, j_next).compose(fk_transform(joint, j_now).inverse())
    pts = scene.points[mask]
    flow[mask] = step.apply_points(pts) - pts
    return flow


def normalize_flow(raw: np.ndarray, joint: Joint, j_now: float, j_next: float,
                   moving_mask, moving_points: PointCloud | np.ndarray) -> tuple[np.ndarray, bool]:
    """Scale-invariant flow. Returns ``(field, degenerate)``.

    Prismatic (and free rigid translation): every nonzero vector becomes unit
    length. Revolute: divide by ``|j_next - j_now| * r_max`` where ``r_max``
    is the largest axis distance among ``moving_points`` (the masked points of
    the current frame).
    """
    raw = np.asarray(raw, dtype=np.float64)
    mask = np.asarray(moving_mask, dtype=bool)
    if j_next == j_now:
        return raw.copy(), True
    if joint.kind is JointKind.PRISMATIC:
        out = raw.copy()
        norms = np.linalg.norm(raw, axis=1)
        nz = norms > 0
        out[nz] = raw[nz] / norms[nz, None]
        return out, False
    pts = moving_points.points if isinstance(moving_points, PointCloud) else np.asarray(moving_points)
    r_max = float(joint.axis_distance(pts).max()) if len(pts) and mask.any() else 0.0
    if r_max == 0.0:
        raise PriorError("moving part lies on axis")
    v_max = abs(j_next - j_now) * r_max
    return raw / v_max, False


def gripper_states(widths, threshold: float = 0.5, hysteresis: float = 0.05,
                   initial: Gripper = Gripper.OPEN) -> list[Gripper]:
    """Debounced Open/Closed states from gripper widths in [0, 1]."""
    state = initial
    out = []
    for w in widths:
        if state is Gripper.OPEN and w < threshold - hysteresis:
            state = Gripper.CLOSED
        elif state is Gripper.CLOSED and w > threshold + hysteresis:
            state = Gripper.OPEN
        out.append(state)
    return out


def annotate_phases(gripper_sequence) -> list[Stage]:
    seq = [Gripper(g) for g in gripper_sequence]
    if not seq:
        raise PriorError("empty gripper sequence")
    if seq[0] is Gripper.CLOSED:
        raise PriorError("demonstration must begin pre-grasp")
    return [Stage.MANIPULATE if g is Gripper.CLOSED else Stage.APPROACH for g in seq]
