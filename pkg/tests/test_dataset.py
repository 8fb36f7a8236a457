import numpy as np
import pytest

from dualactor import afgnet, dataset
from dualactor.dataset import (
    BatchSpec,
    DatasetError,
    annotate_ground_truth,
    annotate_with_afg,
    build_windows,
    load,
    make_batches,
    record_episode,
    save,
)
from dualactor.priors import Gripper, Stage
from dualactor.toyenv import Segment, TaskId


@pytest.fixture(scope="module")
def demos():
    out = [annotate_ground_truth(record_episode(t, s, n_points=128)) for t in ("open_drawer", "open_door")
           for s in range(3)]
    out.append(annotate_ground_truth(record_episode("put_block_short", 0, n_points=128)))
    return out


def _same_demo(a, b):
    assert (a.task_id, a.seed, len(a.frames)) == (b.task_id, b.seed, len(b.frames))
    for fa, fb in zip(a.frames, b.frames):
        np.testing.assert_array_equal(fa.obs.points, fb.obs.points)
        np.testing.assert_array_equal(fa.action, fb.action)
        np.testing.assert_array_equal(fa.state, fb.state)


def test_recording_is_deterministic():
    _same_demo(record_episode("open_door", 5, n_points=64), record_episode("open_door", 5, n_points=64))


def test_success_demo_has_grasp_release_cycle(demos):
    for d in demos:
        assert d.success
        g = [f.gripper for f in d.frames]
        assert Gripper.CLOSED in g
        assert g[0] is Gripper.OPEN and g[-1] is Gripper.OPEN


def test_expert_open_drawer_rate():
    wins = sum(dataset.record_episode("open_drawer", s, n_points=32).success for s in range(200))
    assert wins >= 190


def test_contact_frame_has_unit_affordance(demos):
    checked = 0
    for d in demos:
        first_closed = next(i for i, f in enumerate(d.frames) if f.gripper is Gripper.CLOSED)
        f = d.frames[first_closed]
        seg = f.obs.channels["segment"]
        key = seg == (Segment.BLOCK if d.task_id is TaskId.PUT_BLOCK_SHORT else Segment.KEY_PART)
        if key.any():
            checked += 1
            assert f.gt_affordance.max() == 1.0
            assert np.all(f.gt_affordance[key] == 1.0)
    assert checked >= 3


def test_stages_follow_gripper(demos):
    for d in demos:
        first_closed = next(i for i, f in enumerate(d.frames) if f.gripper is Gripper.CLOSED)
        assert all(f.stage is Stage.APPROACH for f in d.frames[:first_closed])
        runs = 1 + sum(a.stage != b.stage for a, b in zip(d.frames, d.frames[1:]))
        assert runs >= 2


def test_static_frames_have_zero_flow(demos):
    for d in demos:
        for f, nxt in zip(d.frames[:-1], d.frames[1:]):
            same_block = (f.block_position is None or np.array_equal(f.block_position, nxt.block_position))
            if f.joint_value == nxt.joint_value and same_block:
                assert not f.gt_flow.any()
        np.testing.assert_array_equal(d.frames[-1].gt_flow, d.frames[-2].gt_flow)


def test_moving_frames_have_unit_or_bounded_flow(demos):
    for d in demos:
        for f in d.frames:
            m = np.linalg.norm(f.gt_flow, axis=1)
            assert m.max() <= 1.0 + 1e-6


def test_annotation_idempotent(demos):
    d = demos[0]
    again = annotate_ground_truth(d)
    for a, b in zip(d.frames, again.frames):
        np.testing.assert_array_equal(a.gt_affordance, b.gt_affordance)
        np.testing.assert_array_equal(a.gt_flow, b.gt_flow)
        assert a.stage == b.stage


def test_save_load_save_byte_identical(tmp_path, demos):
    save(demos, tmp_path / "a", {"note": 1})
    back, manifest = load(tmp_path / "a")
    assert len(manifest.episodes) == len(list((tmp_path / "a" / "episodes").iterdir())) == len(demos)
    save(back, tmp_path / "b", manifest.config)
    for entry in manifest.episodes:
        assert (tmp_path / "a" / entry["file"]).read_bytes() == (tmp_path / "b" / entry["file"]).read_bytes()
    for a, b in zip(sorted(demos, key=lambda d: (int(d.task_id), d.seed)), back):
        _same_demo(a, b)
        assert [f.joint_value for f in a.frames] == [f.joint_value for f in b.frames]
        for fa, fb in zip(a.frames, b.frames):
            np.testing.assert_array_equal(fa.gt_affordance, fb.gt_affordance)
            assert fb.pred_affordance is None and fa.stage == fb.stage


def test_corrupted_payload_names_file(tmp_path, demos):
    save(demos[:2], tmp_path)
    victim = sorted((tmp_path / "episodes").iterdir())[1]
    data = bytearray(victim.read_bytes())
    data[100] ^= 0x40
    victim.write_bytes(bytes(data))
    with pytest.raises(DatasetError, match=victim.name):
        load(tmp_path)


def test_version_mismatch_rejected(tmp_path, demos):
    save(demos[:1], tmp_path)
    path = next((tmp_path / "episodes").iterdir())
    data = bytearray(path.read_bytes()[:-4])
    data[4] = 9
    with pytest.raises(DatasetError, match="version"):
        dataset.parse_episode(bytes(data) + __import__("struct").pack("<I", __import__("zlib").crc32(data)))


def test_episode_header_layout(demos):
    d = demos[0]
    data = dataset.episode_bytes(d)
    assert data[:4] == b"DPOM"
    assert int.from_bytes(data[4:8], "little") == 1
    assert int.from_bytes(data[8:10], "little") == int(d.task_id)
    assert int.from_bytes(data[10:18], "little") == d.seed
    assert int.from_bytes(data[18:22], "little") == len(d.frames)
    assert int.from_bytes(data[22:26], "little") == 128
    per_frame = 4 * (3 * 128 + 128 + 3 * 128 + 128 + 3 * 128 + 4 + 4) + 2
    assert len(data) == 26 + len(d.frames) * per_frame + 4


def test_windows_count_and_padding(demos):
    w = build_windows(demos, BatchSpec(horizon=8))
    assert len(w) == sum(len(d.frames) for d in demos)
    last = demos[0].frames[-1].action
    np.testing.assert_array_equal(w.actions[len(demos[0].frames) - 1], np.tile(last, (8, 1)))


def test_short_episodes_skipped(demos, caplog):
    with pytest.raises(DatasetError, match="no usable"):
        build_windows(demos, BatchSpec(horizon=10_000))
    w = build_windows(demos + [demos[0].__class__(demos[0].task_id, 99, demos[0].frames[:3], True)],
                      BatchSpec(horizon=8))
    assert w.skipped == 1


def test_batches_stage_homogeneous_and_deterministic(demos):
    spec = BatchSpec(batch_size=16)
    b1 = list(make_batches(demos, spec, seed=3))
    b2 = list(make_batches(demos, spec, seed=3))
    assert sum(len(b["stage"]) for b in b1) == sum(len(d.frames) for d in demos)
    for x, y in zip(b1, b2):
        assert len(set(x["stage"].tolist())) == 1
        np.testing.assert_array_equal(x["obs"], y["obs"])
        np.testing.assert_array_equal(x["actions"], y["actions"])
    other = list(make_batches(demos, spec, seed=4))
    assert any(not np.array_equal(x["stage"], y["stage"]) or not np.array_equal(x["obs"], y["obs"])
               for x, y in zip(b1, other))


def test_unannotated_rejected():
    raw = record_episode("open_drawer", 0, n_points=32)
    with pytest.raises(DatasetError, match="not annotated"):
        build_windows([raw])


def test_afg_annotation(demos):
    cfg = afgnet.AfgConfig(n_points=128)
    params = afgnet.init_afg(cfg, 0)
    subset = demos[:5]
    out = [annotate_with_afg(d, params, cfg, seed=2) for d in subset]
    again = [annotate_with_afg(d, params, cfg, seed=2) for d in subset]
    errs = []
    for d, a, b in zip(subset, out, again):
        for f, fa, fb in zip(d.frames, a.frames, b.frames):
            np.testing.assert_array_equal(fa.pred_affordance, fb.pred_affordance)
            np.testing.assert_array_equal(fa.pred_flow, fb.pred_flow)
            np.testing.assert_array_equal(fa.gt_affordance, f.gt_affordance)
            errs.append(np.abs(fa.pred_affordance - f.gt_affordance).mean())
    assert np.mean(errs) > 0.3
    assert out[0].has_predictions and out[0].frames[0].affordance is out[0].frames[0].pred_affordance
    with pytest.raises(DatasetError, match="points"):
        annotate_with_afg(subset[0], params, afgnet.AfgConfig(n_points=512))


def test_predictions_survive_round_trip(tmp_path, demos):
    cfg = afgnet.AfgConfig(n_points=128)
    d = annotate_with_afg(demos[0], afgnet.init_afg(cfg, 1), cfg, seed=0)
    save([d], tmp_path)
    (back,), _ = load(tmp_path)
    for a, b in zip(d.frames, back.frames):
        np.testing.assert_array_equal(a.pred_flow, b.pred_flow)
        np.testing.assert_array_equal(a.pred_affordance, b.pred_affordance)
