"""Desk-scale articulated-object environment with a point gripper.

A cabinet with either a drawer (prismatic) or a door (revolute) sits on a
table in front of the robot. The gripper is a free-floating point that
moves by clamped Cartesian deltas and grasps by closing near the handle or
the block. Everything is deterministic given ``(task, seed, actions)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum, IntEnum

import numpy as np

from .geometry import (
    Joint,
    JointKind,
    PointCloud,
    RigidTransform,
    farthest_point_sample,
    fk_transform,
    nearest_distances,
    rotation_about_axis,
)
from .priors import Gripper
from .rng import make_rng

MAX_DELTA = 0.05
GRIPPER_RATE = 0.25
GRIP_THRESHOLD = 0.5
GRIP_HYSTERESIS = 0.05
ATTACH_RADIUS = 0.02
DETACH_OFFSET = 0.03
SPAWN_ANNULUS = (0.15, 0.35)

BLOCK_HALF = 0.02
# drawer tray interior in the moving part's rest frame (cabinet-local axes)
TRAY_LO = np.array([0.0, -0.14, 0.11])
TRAY_HI = np.array([0.26, 0.14, 0.20])


class TaskId(IntEnum):
    OPEN_DRAWER = 0
    CLOSE_DRAWER = 1
    OPEN_DOOR = 2
    CLOSE_DOOR = 3
    PUT_BLOCK_SHORT = 4

    @property
    def slug(self) -> str:
        return self.name.lower()

    @classmethod
    def parse(cls, name: str | int | TaskId) -> TaskId:
        if isinstance(name, (int, TaskId)):
            return cls(name)
        key = name.strip().upper().replace("-", "_")
        try:
            return cls[key]
        except KeyError:
            raise ValueError(f"unknown task {name!r}; choose from {[t.slug for t in cls]}") from None

    @property
    def uses_door(self) -> bool:
        return self in (TaskId.OPEN_DOOR, TaskId.CLOSE_DOOR)

    @property
    def opens(self) -> bool:
        return self in (TaskId.OPEN_DRAWER, TaskId.OPEN_DOOR)


class Attached(str, Enum):
    NONE = "none"
    HANDLE = "handle"
    BLOCK = "block"


class Segment(IntEnum):
    STATIC = 0
    MOVING = 1
    KEY_PART = 2
    BLOCK = 3
    GRIPPER = 4


@dataclass(frozen=True)
class TaskSpec:
    task_id: TaskId
    success_threshold: float
    horizon: int
    yaw_range: tuple[float, float] = (-0.35, 0.35)
    x_range: tuple[float, float] = (0.45, 0.6)
    y_range: tuple[float, float] = (-0.15, 0.15)
    joint_init_range: tuple[float, float] = (0.0, 0.0)
    handle_offset_range: tuple[float, float] = (-0.08, 0.08)

    def __post_init__(self):
        if self.horizon < 0:
            raise ValueError("horizon must be non-negative")


def default_task(task: TaskId | str, horizon: int | None = None) -> TaskSpec:
    task = TaskId.parse(task)
    if task is TaskId.OPEN_DRAWER:
        spec = TaskSpec(task, 0.2, 60)
    elif task is TaskId.CLOSE_DRAWER:
        spec = TaskSpec(task, 0.03, 60, joint_init_range=(0.18, 0.28))
    elif task is TaskId.OPEN_DOOR:
        spec = TaskSpec(task, 0.9, 70, handle_offset_range=(0.10, 0.16))
    elif task is TaskId.CLOSE_DOOR:
        spec = TaskSpec(task, 0.15, 70, joint_init_range=(0.9, 1.3), handle_offset_range=(0.10, 0.16))
    else:
        spec = TaskSpec(task, 0.03, 120, joint_init_range=(0.2, 0.26))
    if horizon is not None:
        spec = replace(spec, horizon=horizon)
    return spec


@dataclass
class ArticulatedScene:
    task_id: TaskId
    static_cloud: PointCloud
    moving_cloud_rest: PointCloud
    key_part_rest: PointCloud
    joint: Joint
    block_position: np.ndarray | None
    block_cloud_local: np.ndarray | None
    cabinet_pose: RigidTransform
    # outward handle normal (world, rest pose)
    handle_normal: np.ndarray
    key_part_mask: np.ndarray = field(repr=False, default=None)

    def moving_cloud(self, q: float) -> np.ndarray:
        return fk_transform(self.joint, q).apply_points(self.moving_cloud_rest.points)

    def key_part(self, q: float) -> np.ndarray:
        return fk_transform(self.joint, q).apply_points(self.key_part_rest.points)

    def to_rest_frame(self, q: float, p: np.ndarray) -> np.ndarray:
        """World point -> cabinet-local coordinates of the moving part at rest."""
        world_rest = fk_transform(self.joint, q).inverse().apply_points(p)
        return self.cabinet_pose.inverse().apply_points(world_rest)

    def from_rest_frame(self, q: float, local: np.ndarray) -> np.ndarray:
        return fk_transform(self.joint, q).apply_points(self.cabinet_pose.apply_points(local))

    def block_in_drawer(self, q: float, block: np.ndarray | None) -> bool:
        if block is None or self.task_id.uses_door:
            return False
        local = self.to_rest_frame(q, block)
        return bool(np.all(local >= TRAY_LO) and np.all(local <= TRAY_HI))


@dataclass(frozen=True)
class EnvState:
    joint_value: float
    ee_position: np.ndarray
    gripper_width: float = 1.0
    attached: Attached = Attached.NONE
    clamped_flag: bool = False
    step_count: int = 0
    gripper: Gripper = Gripper.OPEN
    block_position: np.ndarray | None = None
    # grasp bookkeeping: handle anchor in the moving part's rest pose (world
    # coordinates at q=0), accumulated off-axis pull, block offset from EE
    anchor_rest: np.ndarray | None = None
    drag_offset: np.ndarray = field(default_factory=lambda: np.zeros(3))
    block_offset: np.ndarray | None = None

    def vector(self) -> np.ndarray:
        """Proprioception: end-effector position and gripper width."""
        return np.array([*self.ee_position, self.gripper_width])


@dataclass(frozen=True)
class Action:
    delta_ee: np.ndarray
    gripper_cmd: float

    @classmethod
    def from_vector(cls, vec) -> Action:
        vec = np.asarray(vec, dtype=np.float64)
        return cls(vec[:3].copy(), float(vec[3]))

    def vector(self) -> np.ndarray:
        return np.array([*self.delta_ee, self.gripper_cmd])


# ---------------------------------------------------------------- geometry

def _sample_box(rng, lo, hi, n, skip_face=None):
    """``n`` area-weighted samples on the surface of an axis-aligned box.

    ``skip_face`` is ``(axis, side, (a_lo, a_hi, b_lo, b_hi))``: points on that
    face inside the rectangle are rejected (an opening in the face).
    """
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    size = hi - lo
    faces = []
    for axis in range(3):
        u, v = [a for a in range(3) if a != axis]
        area = size[u] * size[v]
        for side in (0, 1):
            faces.append((axis, side, u, v, area))
    areas = np.array([f[4] for f in faces])
    out = []
    while len(out) < n:
        k = rng.choice(len(faces), p=areas / areas.sum())
        axis, side, u, v, _ = faces[k]
        p = lo + rng.random(3) * size
        p[axis] = hi[axis] if side else lo[axis]
        if skip_face is not None:
            s_axis, s_side, (a_lo, a_hi, b_lo, b_hi) = skip_face
            if axis == s_axis and side == s_side and a_lo <= p[u] <= a_hi and b_lo <= p[v] <= b_hi:
                continue
        out.append(p)
    return np.array(out)


def _sample_rect(rng, lo, hi, n):
    """Samples on a flat rectangle (one of ``hi - lo`` components is zero)."""
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    return lo + rng.random((n, 3)) * (hi - lo)


def reset(task: TaskSpec, seed: int) -> tuple[ArticulatedScene, EnvState]:
    rng = make_rng(seed, f"reset/{task.task_id.slug}")
    yaw = rng.uniform(*task.yaw_range)
    cx = rng.uniform(*task.x_range)
    cy = rng.uniform(*task.y_range)
    pose = RigidTransform(rotation_about_axis(np.array([0.0, 0.0, 1.0]), yaw), np.array([cx, cy, 0.0]))
    handle_y = rng.uniform(*task.handle_offset_range)
    lo, hi = task.joint_init_range
    q0 = float(rng.uniform(lo, hi)) if hi > lo else float(lo)

    body_lo, body_hi = np.array([0.0, -0.2, 0.0]), np.array([0.3, 0.2, 0.32])
    if task.task_id.uses_door:
        opening = (-0.2, 0.2, 0.0, 0.32)
        panel = _sample_box(rng, [-0.02, -0.2, 0.02], [0.0, 0.2, 0.30], 170)
        hz = rng.uniform(0.13, 0.19)
        handle = _sample_box(rng, [-0.05, handle_y - 0.01, hz - 0.05], [-0.03, handle_y + 0.01, hz + 0.05], 60)
        moving_local = np.vstack([panel, handle])
        joint_origin_local = np.array([-0.01, -0.2, 0.0])
        joint = Joint(JointKind.REVOLUTE, pose.apply_vectors(np.array([0.0, 0.0, 1.0])),
                      pose.apply_points(joint_origin_local), (0.0, math.pi / 2))
    else:
        opening = (-0.15, 0.15, 0.10, 0.22)
        front = _sample_box(rng, [-0.02, -0.15, 0.10], [0.0, 0.15, 0.22], 110)
        tray = np.vstack([
            _sample_rect(rng, [0.0, -0.14, 0.11], [0.26, 0.14, 0.11], 90),
            _sample_rect(rng, [0.0, -0.14, 0.11], [0.26, -0.14, 0.17], 30),
            _sample_rect(rng, [0.0, 0.14, 0.11], [0.26, 0.14, 0.17], 30),
            _sample_rect(rng, [0.26, -0.14, 0.11], [0.26, 0.14, 0.17], 20),
        ])
        hz = rng.uniform(0.15, 0.17)
        handle = _sample_box(rng, [-0.05, handle_y - 0.05, hz - 0.01], [-0.03, handle_y + 0.05, hz + 0.01], 60)
        moving_local = np.vstack([front, tray, handle])
        joint = Joint(JointKind.PRISMATIC, pose.apply_vectors(np.array([-1.0, 0.0, 0.0])),
                      pose.translation, (0.0, 0.3))
    # the opening is a (y, z) rectangle on the front (x = 0) face
    body = _sample_box(rng, body_lo, body_hi, 420, skip_face=(0, 0, opening))
    key_mask = np.zeros(len(moving_local), dtype=bool)
    key_mask[-len(handle):] = True

    block = block_local = None
    if task.task_id is TaskId.PUT_BLOCK_SHORT:
        side = 1.0 if rng.random() < 0.5 else -1.0
        bx = rng.uniform(-0.25, -0.14)
        by = side * rng.uniform(0.24, 0.32)
        block = pose.apply_points(np.array([bx, by, BLOCK_HALF]))
        block_local = _sample_box(rng, [-BLOCK_HALF] * 3, [BLOCK_HALF] * 3, 48)

    moving_world = pose.apply_points(moving_local)
    scene = ArticulatedScene(
        task_id=task.task_id,
        static_cloud=PointCloud(pose.apply_points(body)),
        moving_cloud_rest=PointCloud(moving_world),
        key_part_rest=PointCloud(moving_world[key_mask]),
        joint=joint,
        block_position=block,
        block_cloud_local=block_local,
        cabinet_pose=pose,
        handle_normal=pose.apply_vectors(np.array([-1.0, 0.0, 0.0])),
        key_part_mask=key_mask,
    )

    # spawn the gripper in front of the first thing it has to grasp
    target = block if block is not None else scene.key_part(q0).mean(axis=0)
    r = rng.uniform(*SPAWN_ANNULUS)
    az = rng.uniform(-1.0, 1.0)
    el = rng.uniform(0.2, 0.8) if block is not None else rng.uniform(-0.2, 0.6)
    d_local = np.array([-math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)])
    ee = target + r * pose.apply_vectors(d_local)
    state = EnvState(joint_value=q0, ee_position=ee, block_position=None if block is None else block.copy())
    return scene, state


# ---------------------------------------------------------------- dynamics

def _tangent(scene: ArticulatedScene, anchor_world: np.ndarray) -> tuple[np.ndarray, float]:
    """Feasible unit direction of motion at a point of the moving part and the
    joint-value change per metre along it."""
    joint = scene.joint
    if joint.kind is JointKind.PRISMATIC:
        return joint.axis.copy(), 1.0
    rel = anchor_world - joint.origin
    radial = rel - (rel @ joint.axis) * joint.axis
    r = float(np.linalg.norm(radial))
    return np.cross(joint.axis, radial) / r, 1.0 / r


def _move_block_with_drawer(scene, block, q_old, q_new):
    if block is None or q_old == q_new or not scene.block_in_drawer(q_old, block):
        return block
    step = fk_transform(scene.joint, q_new).compose(fk_transform(scene.joint, q_old).inverse())
    return step.apply_points(block)


def _release_block(scene, q, block):
    """Drop a released block into the drawer tray if above it, else onto the table."""
    local = scene.to_rest_frame(q, block)
    if (not scene.task_id.uses_door and TRAY_LO[0] + 0.02 <= local[0] <= TRAY_HI[0] - 0.02
            and abs(local[1]) <= TRAY_HI[1] - 0.02 and local[2] >= TRAY_LO[2]):
        local = np.array([local[0], local[1], TRAY_LO[2] + BLOCK_HALF])
        return scene.from_rest_frame(q, local)
    return np.array([block[0], block[1], BLOCK_HALF])


def step(scene: ArticulatedScene, state: EnvState, action: Action) -> EnvState:
    delta = np.clip(np.asarray(action.delta_ee, dtype=np.float64), -MAX_DELTA, MAX_DELTA)
    cmd = min(max(float(action.gripper_cmd), 0.0), 1.0)
    width = state.gripper_width + min(max(cmd - state.gripper_width, -GRIPPER_RATE), GRIPPER_RATE)
    grip = state.gripper
    if grip is Gripper.OPEN and width < GRIP_THRESHOLD - GRIP_HYSTERESIS:
        grip = Gripper.CLOSED
    elif grip is Gripper.CLOSED and width > GRIP_THRESHOLD + GRIP_HYSTERESIS:
        grip = Gripper.OPEN
    just_closed = grip is Gripper.CLOSED and state.gripper is Gripper.OPEN

    q = state.joint_value
    ee = state.ee_position.copy()
    attached = state.attached
    anchor, offset = state.anchor_rest, state.drag_offset.copy()
    block, block_offset = state.block_position, state.block_offset
    clamped = False

    if attached is not Attached.NONE and grip is Gripper.OPEN:
        if attached is Attached.BLOCK:
            block = _release_block(scene, q, block)
        attached, anchor, block_offset = Attached.NONE, None, None
        offset = np.zeros(3)

    if attached is Attached.HANDLE:
        anchor_world = fk_transform(scene.joint, q).apply_points(anchor)
        direction, rate = _tangent(scene, anchor_world)
        along = float(delta @ direction)
        q_new, clamped = scene.joint.clamp(q + along * rate)
        offset = offset + (delta - along * direction)
        block = _move_block_with_drawer(scene, block, q, q_new)
        q = q_new
        ee = fk_transform(scene.joint, q).apply_points(anchor) + offset
        if np.linalg.norm(offset) > DETACH_OFFSET:
            attached, anchor, offset = Attached.NONE, None, np.zeros(3)
    else:
        ee = ee + delta
        if attached is Attached.BLOCK:
            block = ee + block_offset

    if just_closed and attached is Attached.NONE:
        d_block = math.inf
        if block is not None and not scene.block_in_drawer(q, block):
            d_block = float(nearest_distances(ee[None], scene.block_cloud_local + block)[0])
        d_handle = float(nearest_distances(ee[None], scene.key_part(q))[0])
        if d_block <= ATTACH_RADIUS and d_block <= d_handle:
            attached, block_offset = Attached.BLOCK, block - ee
        elif d_handle <= ATTACH_RADIUS:
            attached = Attached.HANDLE
            anchor = fk_transform(scene.joint, q).inverse().apply_points(ee)
            offset = np.zeros(3)

    return EnvState(
        joint_value=q, ee_position=ee, gripper_width=width, attached=attached,
        clamped_flag=clamped, step_count=state.step_count + 1, gripper=grip,
        block_position=None if block is None else np.array(block, dtype=np.float64),
        anchor_rest=anchor, drag_offset=offset, block_offset=block_offset,
    )


# ---------------------------------------------------------------- sensing

def raw_cloud(scene: ArticulatedScene, state: EnvState) -> PointCloud:
    """Noise-free surface samples of the posed scene with segment labels."""
    moving = scene.moving_cloud(state.joint_value)
    seg_moving = np.where(scene.key_part_mask, Segment.KEY_PART, Segment.MOVING)
    parts = [scene.static_cloud.points, moving]
    segs = [np.full(len(scene.static_cloud), Segment.STATIC), seg_moving]
    if state.block_position is not None:
        parts.append(scene.block_cloud_local + state.block_position)
        segs.append(np.full(len(scene.block_cloud_local), Segment.BLOCK))
    parts.append(_gripper_marker(state))
    segs.append(np.full(len(parts[-1]), Segment.GRIPPER))
    return PointCloud(np.vstack(parts), {"segment": np.concatenate(segs).astype(np.int8)})


def _gripper_marker(state: EnvState) -> np.ndarray:
    """Two small fingers straddling the end effector, spread by the width."""
    half = 0.005 + 0.02 * state.gripper_width
    z = np.linspace(0.0, 0.03, 6)
    pts = []
    for s in (-1.0, 1.0):
        for dz in z:
            pts.append([0.0, s * half, dz])
            pts.append([0.0, s * half * 0.6, dz])
    return np.asarray(pts) + state.ee_position


def observe(scene: ArticulatedScene, state: EnvState, n_points: int = 512, seed: int = 0,
            noise: float = 0.002) -> PointCloud:
    raw = raw_cloud(scene, state)
    if noise > 0:
        rng = make_rng(seed, "observe", state.step_count)
        raw = PointCloud(raw.points + rng.normal(0.0, noise, raw.points.shape), raw.channels)
    return farthest_point_sample(raw, n_points, 0)


# ---------------------------------------------------------------- tasks

def is_success(scene: ArticulatedScene, state: EnvState, task: TaskSpec) -> bool:
    q = state.joint_value
    if task.task_id is TaskId.PUT_BLOCK_SHORT:
        return (state.attached is not Attached.BLOCK and scene.block_in_drawer(q, state.block_position)
                and q <= task.success_threshold)
    if task.task_id.opens:
        return q >= task.success_threshold
    return q <= task.success_threshold


def grasp_point(scene: ArticulatedScene, state: EnvState) -> np.ndarray:
    """Where the expert closes the gripper for the current sub-goal."""
    q = state.joint_value
    if (scene.task_id is TaskId.PUT_BLOCK_SHORT and state.block_position is not None
            and not scene.block_in_drawer(q, state.block_position)):
        return state.block_position + np.array([0.0, 0.0, BLOCK_HALF])
    normal = fk_transform(scene.joint, q).apply_vectors(scene.handle_normal)
    return scene.key_part(q).mean(axis=0) + 0.01 * normal


@dataclass(frozen=True)
class ExpertConfig:
    approach_speed: float = 0.03
    drag_speed: float = 0.025
    tolerance: float = 0.004
    prismatic_margin: float = 0.02
    revolute_margin: float = 0.06


def _toward(ee, goal, speed):
    d = goal - ee
    dist = float(np.linalg.norm(d))
    if dist <= speed:
        return d
    return d * (speed / dist)


def scripted_expert(scene: ArticulatedScene, state: EnvState, task: TaskSpec,
                    config: ExpertConfig = ExpertConfig()) -> Action:
    ee, q = state.ee_position, state.joint_value
    zero = np.zeros(3)
    if state.attached is Attached.HANDLE:
        lo, hi = scene.joint.limits
        margin = config.prismatic_margin if scene.joint.kind is JointKind.PRISMATIC else config.revolute_margin
        if task.task_id.opens:
            done = q >= min(task.success_threshold + margin, hi)
            sign = 1.0
        else:
            done = q <= max(task.success_threshold - margin, lo)
            sign = -1.0
        if done:
            return Action(zero, 1.0)
        anchor_world = fk_transform(scene.joint, q).apply_points(state.anchor_rest)
        direction, _ = _tangent(scene, anchor_world)
        return Action(sign * config.drag_speed * direction - state.drag_offset, 0.0)
    if state.attached is Attached.BLOCK:
        drop = scene.from_rest_frame(q, np.array([0.09, 0.0, TRAY_LO[2] + BLOCK_HALF + 0.01]))
        goal = drop - state.block_offset
        if np.linalg.norm(goal - ee) > config.tolerance:
            return Action(_toward(ee, goal, config.approach_speed), 0.0)
        return Action(zero, 1.0)
    # free gripper: finish releasing, then approach and close
    if state.gripper is Gripper.CLOSED:
        return Action(zero, 1.0)
    if is_success(scene, state, task):
        return Action(zero, 1.0)
    goal = grasp_point(scene, state)
    if np.linalg.norm(goal - ee) > config.tolerance:
        return Action(_toward(ee, goal, config.approach_speed), 1.0)
    return Action(zero, 0.0)


def expert_done(scene: ArticulatedScene, state: EnvState, task: TaskSpec) -> bool:
    """Expert episodes end once the task holds and the gripper is fully open."""
    return (is_success(scene, state, task) and state.attached is Attached.NONE
            and state.gripper_width >= 1.0)
