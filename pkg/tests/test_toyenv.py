import math

import numpy as np
import pytest

from dualactor.geometry import JointKind, fk_transform
from dualactor.priors import Gripper
from dualactor.toyenv import (
    SPAWN_ANNULUS,
    Action,
    Attached,
    Segment,
    TaskId,
    default_task,
    expert_done,
    grasp_point,
    is_success,
    observe,
    raw_cloud,
    reset,
    scripted_expert,
    step,
)
from dataclasses import replace


def _attach_to_handle(scene, state):
    anchor = fk_transform(scene.joint, state.joint_value).inverse().apply_points(state.ee_position)
    return replace(state, attached=Attached.HANDLE, anchor_rest=anchor, gripper=Gripper.CLOSED,
                   gripper_width=0.0)


def test_reset_deterministic():
    task = default_task("open_drawer")
    (s1, e1), (s2, e2) = reset(task, 3), reset(task, 3)
    np.testing.assert_array_equal(s1.static_cloud.points, s2.static_cloud.points)
    np.testing.assert_array_equal(s1.moving_cloud_rest.points, s2.moving_cloud_rest.points)
    np.testing.assert_array_equal(e1.ee_position, e2.ee_position)


def test_open_drawer_starts_closed():
    _, state = reset(default_task("open_drawer"), 0)
    assert state.joint_value == 0.0


@pytest.mark.parametrize("task", list(TaskId))
def test_spawn_annulus(task):
    spec = default_task(task)
    for seed in range(100):
        scene, state = reset(spec, seed)
        target = state.block_position if state.block_position is not None else \
            scene.key_part(state.joint_value).mean(axis=0)
        d = np.linalg.norm(state.ee_position - target)
        assert SPAWN_ANNULUS[0] - 1e-9 <= d <= SPAWN_ANNULUS[1] + 1e-9


def test_zero_action_is_identity_step():
    scene, state = reset(default_task("open_door"), 1)
    nxt = step(scene, state, Action(np.zeros(3), state.gripper_width))
    assert nxt.step_count == state.step_count + 1
    assert nxt.joint_value == state.joint_value and nxt.gripper_width == state.gripper_width
    np.testing.assert_array_equal(nxt.ee_position, state.ee_position)


def test_prismatic_drag_moves_joint_along_axis():
    scene, state = reset(default_task("open_drawer"), 2)
    state = _attach_to_handle(scene, replace(state, ee_position=scene.key_part(0.0).mean(axis=0)))
    nxt = step(scene, state, Action(0.04 * scene.joint.axis, 0.0))
    assert nxt.joint_value == pytest.approx(0.04, abs=1e-12)
    assert nxt.attached is Attached.HANDLE


def test_revolute_drag_arc_length_over_radius():
    scene, state = reset(default_task("open_door"), 2)
    j = scene.joint
    ee = j.origin + 0.3 * np.cross(j.axis, np.array([0.0, 0.0, 1.0]) if abs(j.axis[2]) < 0.9 else
                                   np.array([1.0, 0.0, 0.0]))
    ee = j.origin + 0.3 * (ee - j.origin) / np.linalg.norm(ee - j.origin)
    state = _attach_to_handle(scene, replace(state, ee_position=ee))
    radial = ee - j.origin
    tangent = np.cross(j.axis, radial) / np.linalg.norm(radial)
    nxt = step(scene, state, Action(0.03 * tangent, 0.0))
    assert nxt.joint_value == pytest.approx(0.1, abs=1e-12)


def test_actions_clamped_and_gripper_slews():
    scene, state = reset(default_task("open_drawer"), 0)
    nxt = step(scene, state, Action(np.array([1.0, -1.0, 0.0]), 0.0))
    np.testing.assert_allclose(nxt.ee_position - state.ee_position, [0.05, -0.05, 0.0])
    assert nxt.gripper_width == 0.75


def test_observe_size_and_noise_free_shift():
    spec = default_task("open_drawer")
    scene, state = reset(spec, 4)
    for k in range(100):
        obs = observe(scene, replace(state, step_count=k), 256, seed=k)
        assert len(obs) == 256
    raw0 = raw_cloud(scene, state)
    raw1 = raw_cloud(scene, replace(state, joint_value=0.1))
    moving = np.isin(raw0.channels["segment"], [Segment.MOVING, Segment.KEY_PART])
    np.testing.assert_allclose(raw0.points[moving], scene.moving_cloud_rest.points, atol=0)
    np.testing.assert_allclose(raw1.points[moving] - raw0.points[moving],
                               np.tile(0.1 * scene.joint.axis, (moving.sum(), 1)), atol=1e-12)


def test_success_predicates():
    spec = default_task("open_drawer")
    scene, state = reset(spec, 0)
    assert not is_success(scene, state, spec)
    assert is_success(scene, replace(state, joint_value=scene.joint.limits[1]), spec)
    put = default_task("put_block_short")
    scene, state = reset(put, 0)
    inside = scene.from_rest_frame(state.joint_value, np.array([0.1, 0.0, 0.13]))
    open_state = replace(state, block_position=inside)
    assert scene.block_in_drawer(state.joint_value, inside)
    assert not is_success(scene, open_state, put)
    shut = replace(open_state, joint_value=0.0,
                   block_position=scene.from_rest_frame(0.0, np.array([0.1, 0.0, 0.13])))
    assert is_success(scene, shut, put)


def test_expert_approach_points_at_grasp():
    spec = default_task("open_drawer")
    scene, state = reset(spec, 5)
    a = scripted_expert(scene, state, spec)
    goal = grasp_point(scene, state) - state.ee_position
    assert a.gripper_cmd == 1.0
    cos = a.delta_ee @ goal / (np.linalg.norm(a.delta_ee) * np.linalg.norm(goal))
    assert cos == pytest.approx(1.0, abs=1e-12)


def test_expert_drag_parallel_to_axis():
    spec = default_task("open_drawer")
    scene, state = reset(spec, 6)
    state = _attach_to_handle(scene, replace(state, ee_position=grasp_point(scene, state)))
    a = scripted_expert(scene, state, spec)
    assert np.linalg.norm(np.cross(a.delta_ee, scene.joint.axis)) < 1e-9


@pytest.mark.parametrize("task", list(TaskId))
def test_expert_success_rate(task):
    spec = default_task(task)
    wins = 0
    for seed in range(200 if task is TaskId.OPEN_DRAWER else 40):
        scene, state = reset(spec, seed)
        for _ in range(spec.horizon):
            if expert_done(scene, state, spec):
                break
            state = step(scene, state, scripted_expert(scene, state, spec))
        wins += expert_done(scene, state, spec)
    n = 200 if task is TaskId.OPEN_DRAWER else 40
    assert wins >= 0.95 * n


def test_task_parsing():
    assert TaskId.parse("open-drawer") is TaskId.OPEN_DRAWER
    assert TaskId.parse(4) is TaskId.PUT_BLOCK_SHORT
    with pytest.raises(ValueError):
        TaskId.parse("juggle")
    assert scene_joint_kinds() == {TaskId.OPEN_DOOR: JointKind.REVOLUTE, TaskId.OPEN_DRAWER: JointKind.PRISMATIC}


def scene_joint_kinds():
    return {t: reset(default_task(t), 0)[0].joint.kind for t in (TaskId.OPEN_DOOR, TaskId.OPEN_DRAWER)}
