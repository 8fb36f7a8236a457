"""Demonstrations: recording, prior annotation, batching and persistence."""

from __future__ import annotations

import hashlib
import json
import logging
import struct
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator

import numpy as np

from .geometry import Joint, JointKind, PointCloud
from .priors import Gripper, Stage, affordance_map, annotate_phases, motion_flow, normalize_flow
from .rng import make_rng
from .toyenv import (
    Action,
    ArticulatedScene,
    Attached,
    EnvState,
    ExpertConfig,
    Segment,
    TaskId,
    TaskSpec,
    default_task,
    expert_done,
    observe,
    reset,
    scripted_expert,
    step,
)

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
EPISODE_MAGIC = b"DPOM"


class DatasetError(ValueError):
    pass


@dataclass
class Frame:
    obs: PointCloud
    state: np.ndarray
    action: np.ndarray
    gripper: Gripper
    joint_value: float
    stage: Stage | None = None
    block_position: np.ndarray | None = None
    gt_affordance: np.ndarray | None = None
    gt_flow: np.ndarray | None = None
    pred_affordance: np.ndarray | None = None
    pred_flow: np.ndarray | None = None

    @property
    def affordance(self) -> np.ndarray:
        """Prior used for conditioning: AFG prediction when present, else ground truth."""
        return self.pred_affordance if self.pred_affordance is not None else self.gt_affordance

    @property
    def flow(self) -> np.ndarray:
        return self.pred_flow if self.pred_flow is not None else self.gt_flow


@dataclass
class Demonstration:
    task_id: TaskId
    seed: int
    frames: list[Frame]
    success: bool
    scene: ArticulatedScene | None = None

    @property
    def annotated(self) -> bool:
        return all(f.gt_affordance is not None and f.stage is not None for f in self.frames)

    @property
    def has_predictions(self) -> bool:
        return all(f.pred_affordance is not None for f in self.frames)


@dataclass
class Manifest:
    version: int = FORMAT_VERSION
    config: dict = field(default_factory=dict)
    episodes: list[dict] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps({"version": self.version, "config": self.config, "episodes": self.episodes},
                          indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> Manifest:
        raw = json.loads(text)
        return cls(raw["version"], raw.get("config", {}), raw.get("episodes", []))


# ---------------------------------------------------------------- recording

def f32(x) -> np.ndarray:
    """Round to float32 precision and back; stored values replay exactly."""
    return np.asarray(x, dtype=np.float32).astype(np.float64)


def record_episode(task: TaskSpec | TaskId | str, seed: int, n_points: int = 512, obs_noise: float = 0.002,
                   expert: ExpertConfig = ExpertConfig()) -> Demonstration:
    if not isinstance(task, TaskSpec):
        task = default_task(task)
    scene, state = reset(task, seed)
    frames = []
    success = False
    for _ in range(task.horizon):
        if expert_done(scene, state, task):
            success = True
            break
        obs = observe(scene, state, n_points, seed, obs_noise)
        obs = PointCloud(f32(obs.points), obs.channels)
        action = f32(scripted_expert(scene, state, task, expert).vector())
        frames.append(Frame(obs=obs, state=f32(state.vector()), action=action, gripper=state.gripper,
                            joint_value=state.joint_value,
                            block_position=None if state.block_position is None else state.block_position.copy()))
        state = step(scene, state, Action.from_vector(action))
    else:
        success = expert_done(scene, state, task)
    return Demonstration(task.task_id, seed, frames, success, scene)


def replay_joint_values(demo: Demonstration, task: TaskSpec | None = None) -> None:
    """Recover per-frame joint values and block positions by replaying the
    stored actions (they are float32-exact, so the replay is bit-identical)."""
    task = task or default_task(demo.task_id)
    scene, state = reset(task, demo.seed)
    demo.scene = scene
    for frame in demo.frames:
        frame.joint_value = state.joint_value
        frame.block_position = None if state.block_position is None else state.block_position.copy()
        state = step(scene, state, Action.from_vector(frame.action))


# ---------------------------------------------------------------- annotation

def _key_part_points(scene: ArticulatedScene, frame: Frame) -> np.ndarray:
    seg = frame.obs.channels["segment"]
    if scene.task_id is TaskId.PUT_BLOCK_SHORT and not scene.block_in_drawer(frame.joint_value, frame.block_position):
        pts = frame.obs.points[seg == Segment.BLOCK]
        return pts if len(pts) else scene.block_cloud_local + frame.block_position
    pts = frame.obs.points[seg == Segment.KEY_PART]
    return pts if len(pts) else scene.key_part(frame.joint_value)


def frame_flow(scene: ArticulatedScene, frame: Frame, nxt: Frame) -> np.ndarray:
    """Normalised ground-truth flow of ``frame`` given the next frame."""
    seg = frame.obs.channels["segment"]
    n = len(frame.obs)
    if nxt.joint_value != frame.joint_value:
        mask = (seg == Segment.MOVING) | (seg == Segment.KEY_PART)
        if scene.block_in_drawer(frame.joint_value, frame.block_position):
            mask |= seg == Segment.BLOCK
        joint, j0, j1 = scene.joint, frame.joint_value, nxt.joint_value
    elif (frame.block_position is not None and nxt.block_position is not None
          and not np.array_equal(frame.block_position, nxt.block_position)):
        # free rigid translation of the block, as a one-off prismatic joint
        disp = nxt.block_position - frame.block_position
        length = float(np.linalg.norm(disp))
        joint = Joint(JointKind.PRISMATIC, disp / length, np.zeros(3), (0.0, length))
        mask, j0, j1 = seg == Segment.BLOCK, 0.0, length
    else:
        return np.zeros((n, 3))
    raw = motion_flow(frame.obs, mask, joint, j0, j1)
    flow, _ = normalize_flow(raw, joint, j0, j1, mask, frame.obs.points[mask])
    return flow


def annotate_ground_truth(demo: Demonstration, alpha: float = 10.0) -> Demonstration:
    if demo.scene is None:
        raise DatasetError("demonstration has no scene snapshot")
    scene = demo.scene
    frames = demo.frames
    stages = annotate_phases([f.gripper for f in frames])
    flows = [frame_flow(scene, f, nxt) for f, nxt in zip(frames[:-1], frames[1:])]
    if frames:
        flows.append(flows[-1].copy() if flows else np.zeros((len(frames[0].obs), 3)))
    new_frames = []
    for f, stage, flow in zip(frames, stages, flows):
        key = PointCloud(_key_part_points(scene, f))
        aff = affordance_map(f.obs, key, alpha)
        new_frames.append(replace(f, stage=stage, gt_affordance=f32(aff), gt_flow=f32(flow)))
    return replace(demo, frames=new_frames)


def afg_sample_seed(seed: int, demo: Demonstration) -> int:
    return zlib.crc32(f"{seed}/{demo.task_id.slug}/{demo.seed}".encode())


def annotate_with_afg(demo: Demonstration, afg_params: dict, afg_config, seed: int = 0,
                      steps: int = 10) -> Demonstration:
    """Fill the predicted prior channels with AFG-Net samples.

    Ground-truth channels are left untouched. One batched draw per episode,
    seeded from ``(seed, task, episode seed)`` so the result does not depend
    on which other episodes are annotated alongside it.
    """
    from .afgnet import sample_affordance, sample_flow

    if not demo.frames:
        return demo
    obs = np.stack([f.obs.points for f in demo.frames]).astype(np.float32)
    if obs.shape[1] != afg_config.n_points:
        raise DatasetError(f"episode {demo.task_id.slug}/{demo.seed} has {obs.shape[1]} points per frame, "
                           f"AFG-Net is configured for {afg_config.n_points}")
    s = afg_sample_seed(seed, demo)
    aff = sample_affordance(afg_params, afg_config, obs, int(demo.task_id), steps, s)
    flow = sample_flow(afg_params, afg_config, obs, int(demo.task_id), steps, s)
    frames = [replace(f, pred_affordance=f32(a), pred_flow=f32(fl)) for f, a, fl in zip(demo.frames, aff, flow)]
    return replace(demo, frames=frames)


# ---------------------------------------------------------------- persistence

_HEADER = struct.Struct("<4sIHQII")
_NO_STAGE = 255


def episode_filename(demo: Demonstration) -> str:
    return f"ep_{demo.seed}_{demo.task_id.slug}.dpm"


def _f32_block(values, shape) -> bytes:
    if values is None:
        return np.full(shape, np.nan, dtype="<f4").tobytes()
    arr = np.asarray(values, dtype="<f4")
    if arr.shape != shape:
        raise DatasetError(f"channel shape {arr.shape} does not match expected {shape}")
    return arr.tobytes()


def episode_bytes(demo: Demonstration) -> bytes:
    n = len(demo.frames[0].obs) if demo.frames else 0
    out = [_HEADER.pack(EPISODE_MAGIC, FORMAT_VERSION, int(demo.task_id), demo.seed, len(demo.frames), n)]
    for f in demo.frames:
        if len(f.obs) != n:
            raise DatasetError("frames of one episode must share a point count")
        out += [
            _f32_block(f.obs.points, (n, 3)),
            _f32_block(f.gt_affordance, (n,)),
            _f32_block(f.gt_flow, (n, 3)),
            _f32_block(f.pred_affordance, (n,)),
            _f32_block(f.pred_flow, (n, 3)),
            _f32_block(f.state, (4,)),
            _f32_block(f.action, (4,)),
            struct.pack("<BB", int(f.gripper), _NO_STAGE if f.stage is None else int(f.stage)),
        ]
    body = b"".join(out)
    return body + struct.pack("<I", zlib.crc32(body))


def parse_episode(data: bytes, name: str = "<bytes>", success: bool = True) -> Demonstration:
    if len(data) < _HEADER.size + 4:
        raise DatasetError(f"{name}: truncated episode file")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise DatasetError(f"{name}: checksum mismatch")
    magic, version, task, seed, n_frames, n = _HEADER.unpack_from(body)
    if magic != EPISODE_MAGIC:
        raise DatasetError(f"{name}: not an episode file")
    if version != FORMAT_VERSION:
        raise DatasetError(f"{name}: format version {version}, expected {FORMAT_VERSION}")
    pos = _HEADER.size

    def take(shape):
        nonlocal pos
        count = int(np.prod(shape))
        arr = np.frombuffer(body, dtype="<f4", count=count, offset=pos).reshape(shape)
        pos += 4 * count
        return None if np.isnan(arr).all() and count else arr.astype(np.float64)

    frames = []
    try:
        for _ in range(n_frames):
            pts, ga, gf, pa, pf, state, action = (take(s) for s in
                                                  ((n, 3), (n,), (n, 3), (n,), (n, 3), (4,), (4,)))
            gripper, stage = struct.unpack_from("<BB", body, pos)
            pos += 2
            frames.append(Frame(obs=PointCloud(pts), state=state, action=action, gripper=Gripper(gripper),
                                joint_value=float("nan"), stage=None if stage == _NO_STAGE else Stage(stage),
                                gt_affordance=ga, gt_flow=gf, pred_affordance=pa, pred_flow=pf))
    except (ValueError, struct.error) as exc:
        raise DatasetError(f"{name}: malformed payload ({exc})") from None
    if pos != len(body):
        raise DatasetError(f"{name}: {len(body) - pos} trailing bytes")
    return Demonstration(TaskId(task), seed, frames, success)


def save(demos: list[Demonstration], directory: str | Path, config: dict | None = None) -> Manifest:
    """Write ``manifest.json`` and one ``episodes/*.dpm`` file per demonstration."""
    directory = Path(directory)
    (directory / "episodes").mkdir(parents=True, exist_ok=True)
    manifest = Manifest(config=dict(config or {}))
    for demo in sorted(demos, key=lambda d: (int(d.task_id), d.seed)):
        data = episode_bytes(demo)
        name = episode_filename(demo)
        (directory / "episodes" / name).write_bytes(data)
        manifest.episodes.append({"task": demo.task_id.slug, "seed": demo.seed, "frames": len(demo.frames),
                                  "success": bool(demo.success), "file": f"episodes/{name}",
                                  "sha256": hashlib.sha256(data).hexdigest()})
    (directory / "manifest.json").write_text(manifest.to_json())
    return manifest


def load_manifest(directory: str | Path) -> Manifest:
    path = Path(directory) / "manifest.json"
    if not path.is_file():
        raise FileNotFoundError(f"no dataset manifest at {path}")
    manifest = Manifest.from_json(path.read_text())
    if manifest.version != FORMAT_VERSION:
        raise DatasetError(f"{path}: format version {manifest.version}, expected {FORMAT_VERSION}")
    return manifest


def load(directory: str | Path, replay: bool = True) -> tuple[list[Demonstration], Manifest]:
    """Read a dataset, verifying every file against the manifest checksum.

    With ``replay`` the scene snapshot, joint values and block positions are
    reconstructed by re-running the stored actions.
    """
    directory = Path(directory)
    manifest = load_manifest(directory)
    demos = []
    for entry in manifest.episodes:
        path = directory / entry["file"]
        if not path.is_file():
            raise DatasetError(f"{path}: listed in manifest but missing")
        data = path.read_bytes()
        if hashlib.sha256(data).hexdigest() != entry["sha256"]:
            raise DatasetError(f"{path}: checksum mismatch")
        demo = parse_episode(data, str(path), bool(entry.get("success", True)))
        if len(demo.frames) != entry["frames"]:
            raise DatasetError(f"{path}: {len(demo.frames)} frames, manifest says {entry['frames']}")
        if replay:
            replay_joint_values(demo)
        demos.append(demo)
    return demos, manifest


# ---------------------------------------------------------------- batching

@dataclass(frozen=True)
class BatchSpec:
    batch_size: int = 32
    horizon: int = 8
    include_failed: bool = False
    use_gt_priors: bool = False


@dataclass
class WindowSet:
    """All training windows of a dataset, stacked; one window per frame."""

    obs: np.ndarray        # (W, N, 3) float32
    state: np.ndarray      # (W, 4)
    actions: np.ndarray    # (W, H, 4) action chunk, tail-padded
    stage: np.ndarray      # (W,) int
    task: np.ndarray       # (W,) int
    affordance: np.ndarray  # (W, N)
    flow: np.ndarray       # (W, N, 3)
    skipped: int = 0

    def __len__(self) -> int:
        return len(self.stage)

    def take(self, index) -> dict:
        return {"obs": self.obs[index], "state": self.state[index], "actions": self.actions[index],
                "stage": self.stage[index], "task": self.task[index],
                "affordance": self.affordance[index], "flow": self.flow[index]}

    def batches(self, batch_size: int, seed: int, epoch: int = 0) -> Iterator[dict]:
        """Stage-homogeneous batches in an order shuffled per ``(seed, epoch)``."""
        rng = make_rng(seed, "batches", epoch)
        chunks = []
        for stage in (Stage.APPROACH, Stage.MANIPULATE):
            idx = np.flatnonzero(self.stage == stage)
            idx = idx[rng.permutation(len(idx))]
            chunks += [idx[i:i + batch_size] for i in range(0, len(idx), batch_size)]
        for k in rng.permutation(len(chunks)):
            batch = self.take(np.sort(chunks[k]))
            batch["stage_label"] = Stage(int(batch["stage"][0]))
            yield batch


def build_windows(demos: list[Demonstration], spec: BatchSpec = BatchSpec()) -> WindowSet:
    obs, state, actions, stage, task, aff, flow = [], [], [], [], [], [], []
    skipped = 0
    for demo in demos:
        if not demo.success and not spec.include_failed:
            continue
        if not demo.annotated:
            raise DatasetError(f"episode {demo.task_id.slug}/{demo.seed} is not annotated")
        if len(demo.frames) < spec.horizon:
            skipped += 1
            continue
        acts = np.stack([f.action for f in demo.frames])
        padded = np.concatenate([acts, np.repeat(acts[-1:], spec.horizon - 1, axis=0)])
        for i, f in enumerate(demo.frames):
            obs.append(f.obs.points)
            state.append(f.state)
            actions.append(padded[i:i + spec.horizon])
            stage.append(int(f.stage))
            task.append(int(demo.task_id))
            aff.append(f.gt_affordance if spec.use_gt_priors else f.affordance)
            flow.append(f.gt_flow if spec.use_gt_priors else f.flow)
    if skipped:
        log.warning("skipped %d episode(s) shorter than the action horizon %d", skipped, spec.horizon)
    if not obs:
        raise DatasetError("no usable episodes")
    return WindowSet(np.stack(obs).astype(np.float32), np.stack(state), np.stack(actions),
                     np.array(stage), np.array(task), np.stack(aff).astype(np.float32),
                     np.stack(flow).astype(np.float32), skipped)


def make_batches(demos: list[Demonstration], spec: BatchSpec = BatchSpec(), seed: int = 0,
                 epoch: int = 0) -> Iterator[dict]:
    return build_windows(demos, spec).batches(spec.batch_size, seed, epoch)
