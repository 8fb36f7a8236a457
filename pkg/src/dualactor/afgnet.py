"""Affordance-flow generation network.

A shared point encoder (per-point MLP + max pool) and a task embedding feed
two pointwise generative heads, one for the scalar affordance and one for
the 3-D motion flow. Both heads are trained by flow matching on straight
paths from Gaussian noise to the annotated priors and sampled by forward
Euler integration of the learned velocity field.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .nn import Mlp, Tensor, concat, max_pool, mse, take_rows
from .rng import make_rng

AFF_FLOOR = -1.0 + 1e-6


@dataclass(frozen=True)
class AfgConfig:
    n_tasks: int = 5
    enc_width: int = 64
    global_dim: int = 64
    task_dim: int = 16
    noise_dim: int = 8
    noise_embed_dim: int = 16
    time_dim: int = 16
    head_width: int = 128
    use_noise: bool = True
    n_points: int = 512
    coord_scale: float = 8.0

    def head_in(self, value_dim: int) -> int:
        return 3 + self.global_dim + self.task_dim + self.noise_embed_dim + self.time_dim + value_dim

    @property
    def encoder(self) -> Mlp:
        return Mlp("afg.enc", (3, self.enc_width, self.global_dim))

    @property
    def noise_mlp(self) -> Mlp:
        return Mlp("afg.noise", (self.noise_dim, self.noise_embed_dim))

    @property
    def affordance_head(self) -> Mlp:
        return Mlp("afg.aff", (self.head_in(1), self.head_width, self.head_width, 1))

    @property
    def flow_head(self) -> Mlp:
        return Mlp("afg.flow", (self.head_in(3), self.head_width, self.head_width, 3))


@dataclass
class Condition:
    """Conditioning for one batch of observations, kept unconcatenated."""

    global_feature: Tensor      # (B, G)
    task_embedding: Tensor      # (B, T)
    per_point_coords: np.ndarray  # (B, N, 3)
    noise_embedding: Tensor     # (B, E)


def init_afg(config: AfgConfig, seed: int) -> dict[str, np.ndarray]:
    rng = make_rng(seed, "init/afg")
    params = {}
    for mlp in (config.encoder, config.noise_mlp, config.affordance_head, config.flow_head):
        params.update(mlp.init(rng))
    params["afg.task"] = rng.normal(0.0, 1.0, (config.n_tasks, config.task_dim)).astype(np.float32)
    return params


def _as_tensor_params(params):
    return {k: v if isinstance(v, Tensor) else Tensor(v) for k, v in params.items()}


def encode_condition(params, config: AfgConfig, obs: np.ndarray, task_ids, noise: np.ndarray) -> Condition:
    """``obs`` is (B, N, 3) or (N, 3); ``noise`` is (B, noise_dim) or (noise_dim,)."""
    p = _as_tensor_params(params)
    dtype = p["afg.task"].data.dtype
    obs = np.asarray(obs, dtype=dtype)
    if obs.ndim == 2:
        obs = obs[None]
    task_ids = np.atleast_1d(np.asarray(task_ids, dtype=np.int64))
    if task_ids.min() < 0 or task_ids.max() >= config.n_tasks:
        raise ValueError(f"unknown task id in {task_ids.tolist()}")
    noise = np.asarray(noise, dtype=dtype).reshape(len(obs), config.noise_dim)
    if not config.use_noise:
        noise = np.zeros_like(noise)
    # translation-invariant frame: coordinates relative to the cloud centroid,
    # rescaled so that scene-sized clouds have roughly unit spread
    obs = (obs - obs.mean(axis=1, keepdims=True)) * dtype.type(config.coord_scale)
    per_point = config.encoder(p, Tensor(obs))
    return Condition(
        global_feature=max_pool(per_point, axis=1),
        task_embedding=take_rows(p["afg.task"], task_ids),
        per_point_coords=obs,
        noise_embedding=config.noise_mlp(p, Tensor(noise)),
    )


def velocity(params, config: AfgConfig, head: str, cond: Condition, xt: np.ndarray | Tensor, t,
             query: np.ndarray | None = None) -> Tensor:
    """Predicted velocity of ``head`` ('affordance' or 'flow') at state ``xt``.

    ``xt`` is (B, N, 1) or (B, N, 3); ``t`` is a scalar or (B,) array.
    ``query`` (B, Q) restricts the head to a subset of points; ``xt`` must
    then already be restricted to them.
    """
    p = _as_tensor_params(params)
    dtype = cond.per_point_coords.dtype
    b, n, _ = cond.per_point_coords.shape
    xt = xt if isinstance(xt, Tensor) else Tensor(np.asarray(xt, dtype=dtype))
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (b,))
    temb = nn.time_embed(t, config.time_dim, dtype)
    frame_feat = concat([cond.global_feature, cond.task_embedding, cond.noise_embedding, Tensor(temb)])
    coords = cond.per_point_coords if query is None else np.take_along_axis(cond.per_point_coords, query[..., None], 1)
    mlp = config.affordance_head if head == "affordance" else config.flow_head
    # pointwise head on [coords | global | task | noise | time | x_t]
    return nn.mlp_forward_parts(p, mlp, [Tensor(coords), frame_feat.reshape(b, 1, -1), xt])


def afg_loss(params, config: AfgConfig, batch: dict, draws: dict) -> tuple[Tensor, Tensor]:
    """Flow-matching losses of both heads for one batch.

    ``batch`` holds ``obs`` (B,N,3), ``task`` (B,), ``affordance`` (B,N),
    ``flow`` (B,N,3). ``draws`` holds the sampled ``t`` (B,), ``a0`` (B,N,1),
    ``f0`` (B,N,3) and ``noise`` (B, noise_dim), and optionally ``query``
    (B,Q) point indices; the losses then cover only those points.
    """
    p = _as_tensor_params(params)
    dtype = p["afg.task"].data.dtype
    cond = encode_condition(p, config, batch["obs"], batch["task"], draws["noise"])
    t = np.asarray(draws["t"], dtype=np.float64)
    a1 = np.asarray(batch["affordance"], dtype=dtype)[..., None]
    f1 = np.asarray(batch["flow"], dtype=dtype)
    a0 = np.asarray(draws["a0"], dtype=dtype)
    f0 = np.asarray(draws["f0"], dtype=dtype)
    query = draws.get("query")
    if query is not None:
        a1 = np.take_along_axis(a1, query[..., None], 1)
        f1 = np.take_along_axis(f1, query[..., None], 1)
    at = interpolate(a0, a1, t)
    ft = interpolate(f0, f1, t)
    loss_a = mse(velocity(p, config, "affordance", cond, at, t, query), a1 - a0, reduce_last=True)
    loss_f = mse(velocity(p, config, "flow", cond, ft, t, query), f1 - f0, reduce_last=True)
    return loss_a, loss_f


def interpolate(x0: np.ndarray, x1: np.ndarray, t) -> np.ndarray:
    """Straight path ``(1 - t) x0 + t x1``, broadcasting ``t`` over the batch axis.

    The endpoints are returned as-is so that t=0 and t=1 are exact.
    """
    t = np.asarray(t, dtype=np.float64).reshape((-1,) + (1,) * (np.ndim(x0) - 1))
    out = ((1.0 - t) * x0 + t * x1).astype(np.result_type(x0, x1))
    at0 = np.broadcast_to(t == 0.0, out.shape)
    at1 = np.broadcast_to(t == 1.0, out.shape)
    out = np.where(at0, x0, out)
    return np.where(at1, x1, out)


def draw_training_noise(config: AfgConfig, batch: dict, seed: int, counter: int,
                        n_query: int | None = None) -> dict:
    rng = make_rng(seed, "afg/train", counter)
    b, n = np.asarray(batch["obs"]).shape[:2]
    q = n if n_query is None or n_query >= n else n_query
    draws = {
        "t": rng.random(b),
        "a0": rng.standard_normal((b, q, 1)).astype(np.float32),
        "f0": rng.standard_normal((b, q, 3)).astype(np.float32),
        "noise": rng.standard_normal((b, config.noise_dim)).astype(np.float32),
    }
    if q < n:
        draws["query"] = np.argsort(rng.random((b, n)), axis=1)[:, :q]
    return draws


def afg_train_step(params: dict[str, np.ndarray], config: AfgConfig, batch: dict, opt: nn.AdamWState,
                   seed: int = 0, draws: dict | None = None, n_query: int | None = None) -> tuple[float, float]:
    """One AdamW step on ``L_affordance + L_flow``; returns both components.

    ``draws`` overrides the sampled ``t``/``x0``/noise (used by tests).
    """
    if draws is None:
        draws = draw_training_noise(config, batch, seed, opt.step, n_query)
    parts = {}

    def total(p):
        la, lf = afg_loss(p, config, batch, draws)
        parts["a"], parts["f"] = float(la.data), float(lf.data)
        return la + lf

    _, grads = nn.loss_and_grad(params, total, context=f"afg step {opt.step}")
    nn.adamw_step(params, grads, opt)
    return parts["a"], parts["f"]


def sample_prior(params, config: AfgConfig, head: str, obs: np.ndarray, task_id, steps: int = 10,
                 seed: int = 0, velocity_fn=None) -> np.ndarray:
    """Euler-integrate the learned velocity from t=0 to 1 for one head.

    ``obs`` may be a single cloud (N,3) or a batch (B,N,3); ``task_id`` is a
    scalar or (B,). Returns (N,) / (N,3) or batched equivalents. ``velocity_fn``
    replaces the network (``fn(x, t) -> velocity``) for oracle tests.
    """
    if steps < 1:
        raise ValueError("need at least one integration step")
    obs = np.asarray(obs, dtype=np.float32)
    single = obs.ndim == 2
    if single:
        obs = obs[None]
    b, n = obs.shape[:2]
    task_ids = np.broadcast_to(np.atleast_1d(np.asarray(task_id, dtype=np.int64)), (b,))
    dim = 1 if head == "affordance" else 3
    rng = make_rng(seed, f"afg/sample/{head}")
    x = rng.standard_normal((b, n, dim)).astype(np.float32)
    noise = rng.standard_normal((b, config.noise_dim)).astype(np.float32)
    cond = None if velocity_fn is not None else encode_condition(params, config, obs, task_ids, noise)
    # x_k = x_0 + (v_0 + ... + v_{k-1}) / steps: the Euler iterates with
    # dt = 1/steps. Sums of float32 velocities are exact in float64, so a
    # constant field lands on x_0 + v without rounding drift.
    x0 = x.astype(np.float64)
    travelled = np.zeros_like(x0)
    for k in range(steps):
        t = k / steps
        if velocity_fn is not None:
            v = np.asarray(velocity_fn(x, t), dtype=np.float32)
        else:
            v = velocity(params, config, head, cond, x, t).data
        travelled += v.astype(np.float64)
        x = (x0 + travelled / steps).astype(np.float32)
    if head == "affordance":
        x = np.clip(x[..., 0], AFF_FLOOR, 1.0)
    return x[0] if single else x


def sample_affordance(params, config: AfgConfig, obs, task_id, steps: int = 10, seed: int = 0,
                      velocity_fn=None) -> np.ndarray:
    return sample_prior(params, config, "affordance", obs, task_id, steps, seed, velocity_fn)


def sample_flow(params, config: AfgConfig, obs, task_id, steps: int = 10, seed: int = 0,
                velocity_fn=None) -> np.ndarray:
    return sample_prior(params, config, "flow", obs, task_id, steps, seed, velocity_fn)


@dataclass(frozen=True)
class AfgTrainConfig:
    steps: int = 8000
    batch_size: int = 16
    lr: float = 3e-3
    weight_decay: float = 0.0
    n_query: int = 256
    seed: int = 0


@dataclass
class AfgData:
    """Stacked training frames: ``obs`` (F,N,3), ``task`` (F,), ``affordance`` (F,N), ``flow`` (F,N,3)."""

    obs: np.ndarray
    task: np.ndarray
    affordance: np.ndarray
    flow: np.ndarray

    def __len__(self) -> int:
        return len(self.task)

    def take(self, index) -> dict:
        return {"obs": self.obs[index], "task": self.task[index],
                "affordance": self.affordance[index], "flow": self.flow[index]}


def train_afg(data: AfgData, config: AfgConfig = AfgConfig(), train: AfgTrainConfig = AfgTrainConfig(),
              params: dict | None = None, progress=None, log_every: int = 50) -> tuple[dict, list[tuple[int, float]]]:
    """AdamW with cosine learning-rate decay; returns parameters and the (step, loss) curve."""
    if len(data) == 0:
        raise ValueError("no training frames")
    params = init_afg(config, train.seed) if params is None else params
    opt = nn.AdamWState(lr=train.lr, weight_decay=train.weight_decay)
    rng = make_rng(train.seed, "afg/batches")
    curve = []
    for k in range(train.steps):
        opt.lr = train.lr * 0.5 * (1.0 + np.cos(np.pi * k / train.steps))
        idx = rng.integers(0, len(data), train.batch_size)
        la, lf = afg_train_step(params, config, data.take(idx), opt, train.seed, n_query=train.n_query)
        if k % log_every == 0 or k == train.steps - 1:
            curve.append((k, la + lf))
            if progress:
                progress(f"afg step {k}/{train.steps} loss {la + lf:.4f}")
    return params, curve
