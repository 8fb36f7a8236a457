import numpy as np
import pytest

from dualactor import afgnet, nn
from dualactor.afgnet import AfgConfig, encode_condition, init_afg, interpolate
from dualactor.rng import make_rng

CFG = AfgConfig(enc_width=16, global_dim=16, task_dim=8, noise_embed_dim=8, time_dim=8, head_width=32, n_points=40)


def _obs(seed=0, b=2, n=40):
    return np.random.default_rng(seed).normal(size=(b, n, 3)).astype(np.float32) * 0.2


def test_interpolation_endpoints_bit_exact():
    rng = np.random.default_rng(1)
    x0, x1 = rng.normal(size=(3, 5, 3)).astype(np.float32), rng.normal(size=(3, 5, 3)).astype(np.float32)
    out = interpolate(x0, x1, np.array([0.0, 1.0, 0.3]))
    np.testing.assert_array_equal(out[0], x0[0])
    np.testing.assert_array_equal(out[1], x1[1])
    np.testing.assert_allclose(out[2], 0.7 * x0[2] + 0.3 * x1[2], atol=1e-6)


def _initial(head, seed, shape):
    return make_rng(seed, f"afg/sample/{head}").standard_normal(shape).astype(np.float32)


@pytest.mark.parametrize("steps", [1, 3, 10, 17])
def test_constant_velocity_oracle_exact(steps):
    obs = _obs()
    v = np.float32(0.37)
    flow = afgnet.sample_flow(None, CFG, obs, [0, 1], steps, seed=5,
                              velocity_fn=lambda x, t: np.full(x.shape, v, np.float32))
    x0 = _initial("flow", 5, (2, 40, 3))
    np.testing.assert_array_equal(flow, (x0.astype(np.float64) + v).astype(np.float32))
    aff = afgnet.sample_affordance(None, CFG, obs[0], 0, steps, seed=5,
                                   velocity_fn=lambda x, t: np.full(x.shape, v, np.float32))
    a0 = _initial("affordance", 5, (1, 40, 1))[0, :, 0]
    np.testing.assert_array_equal(aff, np.clip((a0.astype(np.float64) + v).astype(np.float32), -1 + 1e-6, 1.0))


def test_single_step_is_one_network_call():
    params = init_afg(CFG, 0)
    obs = _obs(2, b=1)
    out = afgnet.sample_flow(params, CFG, obs[0], 3, steps=1, seed=9)
    rng = make_rng(9, "afg/sample/flow")
    x0 = rng.standard_normal((1, 40, 3)).astype(np.float32)
    noise = rng.standard_normal((1, CFG.noise_dim)).astype(np.float32)
    cond = encode_condition(params, CFG, obs, [3], noise)
    v = afgnet.velocity(params, CFG, "flow", cond, x0, 0.0).data
    np.testing.assert_array_equal(out, (x0.astype(np.float64) + v).astype(np.float32)[0])


def test_global_feature_permutation_invariant():
    params = init_afg(CFG, 1)
    obs = _obs(3, b=1)
    perm = np.random.default_rng(4).permutation(40)
    noise = np.zeros((1, CFG.noise_dim), np.float32)
    a = encode_condition(params, CFG, obs, [0], noise).global_feature.data
    b = encode_condition(params, CFG, obs[:, perm], [0], noise).global_feature.data
    np.testing.assert_allclose(a, b, atol=1e-6)


def test_condition_pure_and_tasks_distinct():
    params = init_afg(CFG, 2)
    obs, noise = _obs(5, b=1), np.ones((1, CFG.noise_dim), np.float32)
    c1 = encode_condition(params, CFG, obs, [1], noise)
    c2 = encode_condition(params, CFG, obs, [1], noise)
    np.testing.assert_array_equal(c1.global_feature.data, c2.global_feature.data)
    np.testing.assert_array_equal(c1.noise_embedding.data, c2.noise_embedding.data)
    t0 = encode_condition(params, CFG, obs, [0], noise).task_embedding.data
    assert not np.array_equal(t0, c1.task_embedding.data)
    with pytest.raises(ValueError, match="unknown task"):
        encode_condition(params, CFG, obs, [7], noise)


def test_zero_target_loss_is_mean_squared_output():
    params = init_afg(CFG, 3)
    obs = _obs(6)
    batch = {"obs": obs, "task": np.array([0, 2]), "affordance": np.zeros((2, 40), np.float32),
             "flow": np.zeros((2, 40, 3), np.float32)}
    draws = {"t": np.array([0.25, 0.8]), "a0": np.zeros((2, 40, 1), np.float32),
             "f0": np.zeros((2, 40, 3), np.float32), "noise": np.ones((2, CFG.noise_dim), np.float32)}
    la, lf = afgnet.afg_loss(params, CFG, batch, draws)
    cond = encode_condition(params, CFG, obs, batch["task"], draws["noise"])
    va = afgnet.velocity(params, CFG, "affordance", cond, draws["a0"], draws["t"]).data
    vf = afgnet.velocity(params, CFG, "flow", cond, draws["f0"], draws["t"]).data
    assert float(la.data) == pytest.approx(float((va.astype(np.float64) ** 2).sum(-1).mean()), rel=1e-6)
    assert float(lf.data) == pytest.approx(float((vf.astype(np.float64) ** 2).sum(-1).mean()), rel=1e-6)


def test_query_subset_matches_full_evaluation_on_those_points():
    params = init_afg(CFG, 4)
    obs = _obs(7)
    cond = encode_condition(params, CFG, obs, [0, 1], np.zeros((2, CFG.noise_dim), np.float32))
    x = np.random.default_rng(8).normal(size=(2, 40, 3)).astype(np.float32)
    q = np.array([[3, 7, 11], [0, 39, 5]])
    full = afgnet.velocity(params, CFG, "flow", cond, x, 0.5).data
    sub = afgnet.velocity(params, CFG, "flow", cond, np.take_along_axis(x, q[..., None], 1), 0.5, q).data
    np.testing.assert_allclose(sub, np.take_along_axis(full, q[..., None], 1), atol=1e-6)


def test_gradient_check_at_default_architecture():
    cfg = AfgConfig()
    params = init_afg(cfg, 0)
    obs = _obs(9, b=2, n=24)
    rng = np.random.default_rng(10)
    batch = {"obs": obs, "task": np.array([0, 2]), "affordance": rng.uniform(-1, 1, (2, 24)),
             "flow": rng.normal(size=(2, 24, 3))}
    draws = afgnet.draw_training_noise(cfg, batch, 0, 0, n_query=10)

    def fn(p):
        la, lf = afgnet.afg_loss(p, cfg, batch, draws)
        return la + lf
    assert nn.finite_difference_check(params, fn, probes=20, seed=1) < 1e-4


def test_training_reduces_loss_on_small_dataset():
    from dualactor.dataset import annotate_ground_truth, record_episode
    demos = [annotate_ground_truth(record_episode(t, s, n_points=128))
             for t in ("open_drawer", "open_door") for s in range(5)]
    frames = [(d, f) for d in demos for f in d.frames]
    data = afgnet.AfgData(np.stack([f.obs.points for _, f in frames]).astype(np.float32),
                          np.array([int(d.task_id) for d, _ in frames]),
                          np.stack([f.gt_affordance for _, f in frames]).astype(np.float32),
                          np.stack([f.gt_flow for _, f in frames]).astype(np.float32))
    cfg = AfgConfig(n_points=128)
    eval_batch = data.take(np.arange(0, len(data), 3))
    draws = afgnet.draw_training_noise(cfg, eval_batch, 123, 0)

    def total(p):
        la, lf = afgnet.afg_loss(p, cfg, eval_batch, draws)
        return float(la.data) + float(lf.data)
    p0 = init_afg(cfg, 0)
    before = total(p0)
    trained, curve = afgnet.train_afg(data, cfg, afgnet.AfgTrainConfig(steps=500, n_query=128), params=p0)
    assert total(trained) < 0.25 * before
    assert curve[0][0] == 0 and curve[-1][0] == 499
