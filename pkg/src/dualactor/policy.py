"""Dual-actor policy: DDIM action generators, the decision maker and rollout."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import afgnet, nn
from .nn import Mlp, Tensor, broadcast_to, concat, max_pool, mse, softmax_cross_entropy, take_rows
from .priors import Stage
from .rng import make_rng
from .toyenv import MAX_DELTA, Action, TaskId, TaskSpec, default_task, is_success, observe, reset, step

ACTION_DIM = 4
STATE_DIM = 4
PRIOR_DIM = 4  # per-point prior slot: [affordance, flow_x, flow_y, flow_z]


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------- schedule

@dataclass(frozen=True)
class DiffusionSchedule:
    """Cosine noise schedule; ``alpha_bar[t]`` for ``t = 0..T`` with ``alpha_bar[0] = 1``."""

    T: int
    alpha_bar: np.ndarray


def make_schedule(T: int, s: float = 0.0, max_beta: float = 0.999) -> DiffusionSchedule:
    if T < 1:
        raise ConfigError("diffusion schedule needs T >= 1")
    f = np.cos((np.arange(T + 1) / T + s) / (1 + s) * math.pi / 2) ** 2
    betas = np.minimum(1.0 - f[1:] / f[:-1], max_beta)
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    return DiffusionSchedule(T, alpha_bar)


def ddim_timesteps(T: int, steps: int) -> list[int]:
    """Descending strided sub-schedule ending above zero, e.g. T=50, 10 -> 50, 45, ..., 5."""
    if not 1 <= steps <= T:
        raise ConfigError(f"inference steps must lie in [1, {T}], got {steps}")
    return [int(round(T * (steps - i) / steps)) for i in range(steps)]


# ---------------------------------------------------------------- config

@dataclass(frozen=True)
class ActorConfig:
    n_tasks: int = 5
    horizon: int = 8
    enc_width: int = 64
    global_dim: int = 64
    task_dim: int = 8
    time_dim: int = 16
    width: int = 256
    coord_scale: float = 8.0

    @property
    def chunk_dim(self) -> int:
        return self.horizon * ACTION_DIM

    @property
    def encoder(self) -> Mlp:
        return Mlp("enc", (3 + PRIOR_DIM, self.enc_width, self.global_dim))

    @property
    def denoiser(self) -> Mlp:
        d_in = self.global_dim + STATE_DIM + self.task_dim + self.chunk_dim + self.time_dim
        return Mlp("den", (d_in, self.width, self.width, self.chunk_dim))


@dataclass(frozen=True)
class DecisionConfig:
    n_tasks: int = 5
    enc_width: int = 64
    global_dim: int = 64
    task_dim: int = 8
    width: int = 128
    coord_scale: float = 8.0

    @property
    def encoder(self) -> Mlp:
        return Mlp("enc", (3, self.enc_width, self.global_dim))

    @property
    def head(self) -> Mlp:
        return Mlp("head", (self.global_dim + STATE_DIM + self.task_dim, self.width, 2))


def init_actor(config: ActorConfig, seed: int, role: Stage) -> dict[str, np.ndarray]:
    rng = make_rng(seed, f"init/actor/{int(role)}")
    params = {**config.encoder.init(rng), **config.denoiser.init(rng)}
    params["task"] = rng.normal(0.0, 1.0, (config.n_tasks, config.task_dim)).astype(np.float32)
    return params


def init_decision(config: DecisionConfig, seed: int) -> dict[str, np.ndarray]:
    rng = make_rng(seed, "init/decision")
    params = {**config.encoder.init(rng), **config.head.init(rng)}
    params["task"] = rng.normal(0.0, 1.0, (config.n_tasks, config.task_dim)).astype(np.float32)
    return params


# ---------------------------------------------------------------- normalisation

def normalize_actions(actions: np.ndarray) -> np.ndarray:
    """Map raw (…, 4) actions to [-1, 1]: deltas / MAX_DELTA, gripper 2g - 1."""
    out = np.array(actions, dtype=np.float64)
    out[..., :3] /= MAX_DELTA
    out[..., 3] = 2.0 * out[..., 3] - 1.0
    return out


def denormalize_actions(z: np.ndarray) -> np.ndarray:
    out = np.array(z, dtype=np.float64)
    out[..., :3] *= MAX_DELTA
    out[..., 3] = (out[..., 3] + 1.0) / 2.0
    return out


def normalize_state(state: np.ndarray) -> np.ndarray:
    out = np.array(state, dtype=np.float64)
    out[..., 3] = 2.0 * out[..., 3] - 1.0
    return out


def prior_channel(affordance: np.ndarray | None, flow: np.ndarray | None, n_points: int,
                  batch_shape: tuple = ()) -> np.ndarray:
    """Assemble the per-point prior slot; an absent prior leaves zeros."""
    out = np.zeros(batch_shape + (n_points, PRIOR_DIM), dtype=np.float32)
    if affordance is not None:
        out[..., 0] = affordance
    if flow is not None:
        out[..., 1:] = flow
    return out


# ---------------------------------------------------------------- networks

def _tensors(params):
    return {k: v if isinstance(v, Tensor) else Tensor(v) for k, v in params.items()}


def _centered(obs, state, dtype, scale=1.0):
    """Express the cloud and the end-effector position relative to the cloud centroid, times ``scale``."""
    obs = np.asarray(obs, dtype=np.float64)
    centroid = obs.mean(axis=-2)
    state = np.array(state, dtype=np.float64)
    state[..., :3] = (state[..., :3] - centroid) * scale
    return ((obs - centroid[..., None, :]) * scale).astype(dtype), state.astype(dtype)


def actor_encode(params, config: ActorConfig, obs, prior, state, task) -> tuple[Tensor, Tensor]:
    """Observation part of the actor: (pooled point feature, [state | task])."""
    p = _tensors(params)
    dtype = p["task"].data.dtype
    obs, state = _centered(obs, state, dtype, config.coord_scale)
    points = np.concatenate([obs, np.asarray(prior, dtype=dtype)], axis=-1)
    feat = max_pool(config.encoder(p, Tensor(points)), axis=1)
    return feat, concat([Tensor(state), take_rows(p["task"], np.asarray(task))])


def actor_denoise(params, config: ActorConfig, encoded: tuple[Tensor, Tensor], z_t, t_frac) -> Tensor:
    p = _tensors(params)
    dtype = p["task"].data.dtype
    temb = nn.time_embed(np.asarray(t_frac), config.time_dim, dtype)
    x = concat([encoded[0], encoded[1], Tensor(np.asarray(z_t, dtype=dtype)), Tensor(temb)])
    return config.denoiser(p, x)


def actor_forward(params, config: ActorConfig, obs, prior, state, task, z_t, t_frac) -> Tensor:
    """Denoiser output for a batch.

    ``obs`` (B,N,3), ``prior`` (B,N,4), ``state`` (B,4) normalised, ``task``
    (B,), ``z_t`` (B,H*4), ``t_frac`` (B,) diffusion time in [0, 1].
    """
    p = _tensors(params)
    return actor_denoise(p, config, actor_encode(p, config, obs, prior, state, task), z_t, t_frac)


def decision_logits(params, config: DecisionConfig, obs, state, task) -> Tensor:
    p = _tensors(params)
    dtype = p["task"].data.dtype
    obs, state = _centered(obs, state, dtype, config.coord_scale)
    feat = max_pool(config.encoder(p, Tensor(obs)), axis=1)
    x = concat([feat, Tensor(state), take_rows(p["task"], np.asarray(task))])
    return config.head(p, x)


# ---------------------------------------------------------------- losses

def diffuse(schedule: DiffusionSchedule, z: np.ndarray, t: np.ndarray, eps: np.ndarray) -> np.ndarray:
    ab = schedule.alpha_bar[np.asarray(t)][:, None]
    return np.sqrt(ab) * z + np.sqrt(1.0 - ab) * eps


def draw_actor_noise(schedule: DiffusionSchedule, batch_size: int, chunk_dim: int, seed: int, counter: int,
                     stream: str = "actor/train") -> dict:
    rng = make_rng(seed, stream, counter)
    return {"t": rng.integers(1, schedule.T + 1, batch_size),
            "eps": rng.standard_normal((batch_size, chunk_dim))}


def actor_loss(params, config: ActorConfig, batch: dict, prior: np.ndarray, schedule: DiffusionSchedule,
               draws: dict, prediction: str = "sample", predictor: Callable | None = None) -> Tensor:
    """``mean ||z - z_hat||^2`` with ``z_hat = actor(z_t, t | I)``.

    With ``prediction='epsilon'`` the network regresses the injected noise
    instead. ``predictor(z_t, t) -> z_hat`` replaces the network in tests.
    """
    z = np.asarray(batch["chunk"], dtype=np.float64)
    t, eps = np.asarray(draws["t"]), np.asarray(draws["eps"])
    z_t = diffuse(schedule, z, t, eps)
    target = z if prediction == "sample" else eps
    if predictor is not None:
        pred = Tensor(np.asarray(predictor(z_t, t), dtype=np.float64))
    else:
        pred = actor_forward(params, config, batch["obs"], prior, batch["state"], batch["task"],
                             z_t, t / schedule.T)
    return mse(pred, target, reduce_last=True)


def stage_weights(stage: Stage, gamma: float) -> tuple[float, float]:
    """Weights of (approach loss, manipulation loss) for a batch of ``stage``."""
    return (gamma, 1.0 - gamma) if Stage(stage) is Stage.APPROACH else (1.0 - gamma, gamma)


def combine_stage_losses(l1, l2, stage: Stage, gamma: float):
    w1, w2 = stage_weights(stage, gamma)
    return w1 * l1 + w2 * l2


def validate_gamma(gamma: float) -> float:
    if not 0.5 < gamma < 1.0:
        raise ConfigError(f"gamma must lie in (0.5, 1), got {gamma}")
    return gamma


@dataclass
class DualStepResult:
    l_stage1: float
    l_stage2: float
    l_total: float
    grads1: dict = field(repr=False, default_factory=dict)
    grads2: dict = field(repr=False, default_factory=dict)


def dual_train_step(actor1: dict, actor2: dict, config: ActorConfig, batch: dict, stage: Stage, gamma: float,
                    schedule: DiffusionSchedule, opt1: nn.AdamWState, opt2: nn.AdamWState,
                    draws: dict, priors: tuple[np.ndarray, np.ndarray], prediction: str = "sample",
                    update: bool = True) -> DualStepResult:
    """Both actors see the same stage-homogeneous batch, each with its own prior
    channel; the losses are mixed with the on-stage weight ``gamma``."""
    validate_gamma(gamma)
    w1, w2 = stage_weights(stage, gamma)
    l1, g1 = nn.loss_and_grad(actor1, lambda p: actor_loss(p, config, batch, priors[0], schedule, draws, prediction),
                              context="approach actor")
    l2, g2 = nn.loss_and_grad(actor2, lambda p: actor_loss(p, config, batch, priors[1], schedule, draws, prediction),
                              context="manipulation actor")
    g1 = {k: (w1 * v).astype(v.dtype) for k, v in g1.items()}
    g2 = {k: (w2 * v).astype(v.dtype) for k, v in g2.items()}
    if update:
        nn.adamw_step(actor1, g1, opt1)
        nn.adamw_step(actor2, g2, opt2)
    return DualStepResult(l1, l2, w1 * l1 + w2 * l2, g1, g2)


def single_train_step(actor: dict, config: ActorConfig, batch: dict, schedule: DiffusionSchedule,
                      opt: nn.AdamWState, draws: dict, prior: np.ndarray, prediction: str = "sample") -> float:
    loss, grads = nn.loss_and_grad(actor, lambda p: actor_loss(p, config, batch, prior, schedule, draws, prediction),
                                   context="single actor")
    nn.adamw_step(actor, grads, opt)
    return loss


def decision_loss(params, config: DecisionConfig, batch: dict) -> Tensor:
    return softmax_cross_entropy(decision_logits(params, config, batch["obs"], batch["state"], batch["task"]),
                                 batch["stage"])


def decision_train_step(params: dict, config: DecisionConfig, batch: dict, opt: nn.AdamWState) -> float:
    loss, grads = nn.loss_and_grad(params, lambda p: decision_loss(p, config, batch), context="decision maker")
    nn.adamw_step(params, grads, opt)
    return loss


def select_from_logits(logits) -> Stage:
    logits = np.asarray(logits)
    return Stage.MANIPULATE if logits[1] > logits[0] else Stage.APPROACH


def select_actor(params, config: DecisionConfig, obs: np.ndarray, state: np.ndarray, task: int) -> Stage:
    logits = decision_logits(params, config, np.asarray(obs)[None], normalize_state(state)[None],
                             np.array([int(task)])).data[0]
    return select_from_logits(logits)


# ---------------------------------------------------------------- sampling

def ddim_sample(params, config: ActorConfig, schedule: DiffusionSchedule, obs, prior, state, task: int,
                inference_steps: int, seed: int, prediction: str = "sample",
                predictor: Callable | None = None) -> np.ndarray:
    """Deterministic (eta = 0) DDIM over a strided sub-schedule.

    Returns the normalised chunk (H*4,). ``state`` is already normalised.
    ``predictor(z_t, t) -> z0_hat`` replaces the network in tests.
    """
    rng = make_rng(seed, "actor/ddim")
    z = rng.standard_normal(config.chunk_dim)
    steps = ddim_timesteps(schedule.T, inference_steps)
    ab = schedule.alpha_bar
    encoded = None
    if predictor is None:
        encoded = actor_encode(params, config, np.asarray(obs)[None], np.asarray(prior)[None],
                               np.asarray(state)[None], np.array([task]))
    for i, t in enumerate(steps):
        t_next = steps[i + 1] if i + 1 < len(steps) else 0
        if predictor is not None:
            out = np.asarray(predictor(z, t), dtype=np.float64)
        else:
            out = actor_denoise(params, config, encoded, z[None],
                                np.array([t / schedule.T])).data[0].astype(np.float64)
        if prediction == "sample":
            z0 = out
            eps = (z - math.sqrt(ab[t]) * z0) / math.sqrt(1.0 - ab[t])
        else:
            eps = out
            z0 = (z - math.sqrt(1.0 - ab[t]) * eps) / math.sqrt(ab[t])
        z = math.sqrt(ab[t_next]) * z0 + math.sqrt(1.0 - ab[t_next]) * eps
    return z


# ---------------------------------------------------------------- variants

@dataclass(frozen=True)
class Variant:
    """Which ablation flags are on. A single actor with both priors fills both slots."""

    name: str
    dual: bool
    affordance: bool
    flow: bool

    def actor_priors(self, role: Stage | None) -> tuple[bool, bool]:
        """(affordance, flow) flags of the actor acting in ``role`` (None: the single actor)."""
        if not self.dual:
            return self.affordance, self.flow
        if Stage(role) is Stage.APPROACH:
            return self.affordance, False
        return False, self.flow

    @property
    def needs_priors(self) -> bool:
        return self.affordance or self.flow


VARIANTS: dict[str, Variant] = {v.name: v for v in (
    Variant("baseline", dual=False, affordance=False, flow=False),
    Variant("affordance", dual=False, affordance=True, flow=False),
    Variant("flow", dual=False, affordance=False, flow=True),
    Variant("dual_actor", dual=True, affordance=False, flow=False),
    Variant("both_priors", dual=False, affordance=True, flow=True),
    Variant("full", dual=True, affordance=True, flow=True),
)}


def get_variant(name: str | Variant) -> Variant:
    if isinstance(name, Variant):
        return name
    try:
        return VARIANTS[name]
    except KeyError:
        raise ConfigError(f"unknown variant {name!r}; choose from {sorted(VARIANTS)}") from None


# ---------------------------------------------------------------- training config

@dataclass(frozen=True)
class TrainConfig:
    gamma: float = 0.75
    alpha: float = 10.0
    diffusion_steps: int = 50
    inference_steps: int = 10
    horizon: int = 8
    execute: int = 4
    lr: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int = 80
    epochs: int = 30
    policy_points: int = 256
    prediction: str = "sample"
    decision_epochs: int = 10
    seed: int = 0
    width: int = 256
    enc_width: int = 64
    global_dim: int = 64
    lr_schedule: str = "cosine"

    def __post_init__(self):
        validate_gamma(self.gamma)
        if self.lr_schedule not in ("cosine", "constant"):
            raise ConfigError(f"lr_schedule must be 'cosine' or 'constant', got {self.lr_schedule!r}")
        if not 1 <= self.execute <= self.horizon:
            raise ConfigError(f"need 1 <= execute <= horizon, got execute={self.execute}, horizon={self.horizon}")
        if self.prediction not in ("sample", "epsilon"):
            raise ConfigError(f"prediction must be 'sample' or 'epsilon', got {self.prediction!r}")
        ddim_timesteps(self.diffusion_steps, self.inference_steps)
        if self.batch_size < 1 or self.epochs < 0 or self.policy_points < 1:
            raise ConfigError("batch_size and policy_points must be positive, epochs non-negative")

    @property
    def actor(self) -> ActorConfig:
        return ActorConfig(horizon=self.horizon, enc_width=self.enc_width, global_dim=self.global_dim,
                           width=self.width)

    @property
    def decision(self) -> DecisionConfig:
        return DecisionConfig(enc_width=self.enc_width, global_dim=self.global_dim)

    @property
    def schedule(self) -> DiffusionSchedule:
        return make_schedule(self.diffusion_steps)


# ---------------------------------------------------------------- training loops

def policy_batch(windows: dict, n_points: int) -> dict:
    """Network-ready arrays from a window batch: normalised state and flattened chunk."""
    b = len(windows["stage"])
    return {
        "obs": windows["obs"][:, :n_points],
        "state": normalize_state(windows["state"]),
        "chunk": normalize_actions(windows["actions"]).reshape(b, -1),
        "task": np.asarray(windows["task"]),
        "stage": np.asarray(windows["stage"]),
        "affordance": windows["affordance"][:, :n_points],
        "flow": windows["flow"][:, :n_points],
    }


def batch_prior(batch: dict, flags: tuple[bool, bool]) -> np.ndarray:
    b, n = batch["obs"].shape[:2]
    return prior_channel(batch["affordance"] if flags[0] else None, batch["flow"] if flags[1] else None,
                         n, (b,))


@dataclass
class PolicyBundle:
    """Trained parameters of one variant; ``actors`` is keyed by role, or by None for a single actor."""

    variant: Variant
    config: TrainConfig
    actors: dict
    decision: dict | None = None

    def checkpoint_params(self) -> dict[str, np.ndarray]:
        out = {}
        if self.variant.dual:
            out.update(nn.with_prefix("actor1.", self.actors[Stage.APPROACH]))
            out.update(nn.with_prefix("actor2.", self.actors[Stage.MANIPULATE]))
            out.update(nn.with_prefix("decision.", self.decision))
        else:
            out.update(nn.with_prefix("actor.", self.actors[None]))
        return out

    @classmethod
    def from_checkpoint(cls, params: dict[str, np.ndarray], variant: Variant, config: TrainConfig) -> PolicyBundle:
        if variant.dual:
            actors = {Stage.APPROACH: nn.strip_prefix("actor1.", params),
                      Stage.MANIPULATE: nn.strip_prefix("actor2.", params)}
            return cls(variant, config, actors, nn.strip_prefix("decision.", params))
        return cls(variant, config, {None: nn.strip_prefix("actor.", params)})


@dataclass
class TrainLog:
    curves: dict[str, list[tuple[int, float]]] = field(default_factory=dict)

    def add(self, name: str, step: int, value: float) -> None:
        self.curves.setdefault(name, []).append((step, float(value)))


def epoch_lr(config: TrainConfig, epoch: int, epochs: int) -> float:
    """Learning rate for ``epoch``: constant, or a half cosine sampled at epoch midpoints."""
    if config.lr_schedule == "constant":
        return config.lr
    return config.lr * 0.5 * (1.0 + math.cos(math.pi * (epoch + 0.5) / epochs))


def train_decision(windows, config: TrainConfig, log: TrainLog | None = None, progress: Callable | None = None
                   ) -> dict[str, np.ndarray]:
    """Stage classifier on the same windows (labels from the phase annotation)."""
    params = init_decision(config.decision, config.seed)
    opt = nn.AdamWState(lr=config.lr, weight_decay=config.weight_decay)
    step_no = 0
    for epoch in range(config.decision_epochs):
        opt.lr = epoch_lr(config, epoch, config.decision_epochs)
        for wb in windows.batches(config.batch_size, config.seed, 1000 + epoch):
            batch = policy_batch(wb, config.policy_points)
            loss = decision_train_step(params, config.decision, batch, opt)
            if log is not None:
                log.add("decision", step_no, loss)
            step_no += 1
        if progress:
            progress(f"decision epoch {epoch + 1}/{config.decision_epochs}")
    return params


def train_policy(windows, variant: str | Variant, config: TrainConfig, decision: dict | None = None,
                 log: TrainLog | None = None, progress: Callable | None = None) -> PolicyBundle:
    """Train the actor(s) of ``variant``; dual variants also need a decision maker.

    ``decision`` reuses an already trained classifier (it does not depend on
    the variant); otherwise one is trained here for dual variants.
    """
    variant = get_variant(variant)
    acfg, schedule = config.actor, config.schedule
    roles = (Stage.APPROACH, Stage.MANIPULATE) if variant.dual else (None,)
    actors = {r: init_actor(acfg, config.seed, Stage.APPROACH if r is None else r) for r in roles}
    opts = {r: nn.AdamWState(lr=config.lr, weight_decay=config.weight_decay) for r in roles}
    step_no = 0
    for epoch in range(config.epochs):
        for opt in opts.values():
            opt.lr = epoch_lr(config, epoch, config.epochs)
        for wb in windows.batches(config.batch_size, config.seed, epoch):
            batch = policy_batch(wb, config.policy_points)
            draws = draw_actor_noise(schedule, len(batch["stage"]), acfg.chunk_dim, config.seed, step_no)
            if variant.dual:
                priors = (batch_prior(batch, variant.actor_priors(Stage.APPROACH)),
                          batch_prior(batch, variant.actor_priors(Stage.MANIPULATE)))
                res = dual_train_step(actors[Stage.APPROACH], actors[Stage.MANIPULATE], acfg, batch,
                                      wb["stage_label"], config.gamma, schedule, opts[Stage.APPROACH],
                                      opts[Stage.MANIPULATE], draws, priors, config.prediction)
                loss = res.l_total
                if log is not None:
                    log.add("actor1", step_no, res.l_stage1)
                    log.add("actor2", step_no, res.l_stage2)
            else:
                loss = single_train_step(actors[None], acfg, batch, schedule, opts[None], draws,
                                         batch_prior(batch, variant.actor_priors(None)), config.prediction)
            if log is not None:
                log.add("actor", step_no, loss)
            step_no += 1
        if progress:
            progress(f"{variant.name} epoch {epoch + 1}/{config.epochs}")
    if variant.dual and decision is None:
        decision = train_decision(windows, config, log, progress)
    return PolicyBundle(variant, config, actors, decision if variant.dual else None)


# ---------------------------------------------------------------- rollout

@dataclass
class EpisodeResult:
    task: TaskId
    seed: int
    success: bool
    steps: int
    stages: list[Stage] = field(default_factory=list)

    @property
    def switches(self) -> int:
        return sum(a != b for a, b in zip(self.stages, self.stages[1:]))


def _sub_seed(seed: int, *parts) -> int:
    import zlib
    return zlib.crc32("/".join(str(p) for p in (seed,) + parts).encode())


def expert_chunk_fn(horizon: int) -> Callable:
    """Test hook standing in for a trained actor: the scripted expert's next
    ``horizon`` actions, simulated on a copy of the environment."""
    from .toyenv import scripted_expert

    def chunk(scene, state, task: TaskSpec, stage: Stage) -> np.ndarray:
        out, s = [], state
        for _ in range(horizon):
            a = scripted_expert(scene, s, task)
            out.append(a.vector())
            s = step(scene, s, a)
        return np.array(out)
    return chunk


def rollout(bundle: PolicyBundle | None, afg_params: dict | None, afg_config, task: TaskSpec | TaskId | str,
            seed: int, config: TrainConfig | None = None, n_points: int = 512, obs_noise: float = 0.002,
            chunk_fn: Callable | None = None) -> EpisodeResult:
    """Closed-loop episode: observe, predict priors, pick an actor, sample a chunk, execute E steps.

    ``chunk_fn(scene, state, task, stage) -> (H, 4)`` replaces the actors
    (and the decision maker, which then reports Approach) for tests.
    """
    if not isinstance(task, TaskSpec):
        task = default_task(TaskId.parse(task))
    config = config or (bundle.config if bundle is not None else TrainConfig())
    scene, state = reset(task, seed)
    result = EpisodeResult(task.task_id, seed, False, 0)
    if task.horizon <= 0:
        return result
    variant = bundle.variant if bundle is not None else None
    acfg, schedule = config.actor, config.schedule
    k = config.policy_points
    replan = 0
    while result.steps < task.horizon and not is_success(scene, state, task):
        obs = observe(scene, state, n_points, seed, obs_noise)
        pts = obs.points.astype(np.float32)
        stage = Stage.APPROACH
        if chunk_fn is not None:
            chunk = np.asarray(chunk_fn(scene, state, task, stage))
        else:
            if variant.dual:
                stage = select_actor(bundle.decision, config.decision, pts[:k], state.vector(), int(task.task_id))
            role = stage if variant.dual else None
            flags = variant.actor_priors(role)
            aff = flow = None
            if any(flags):
                s = _sub_seed(seed, "afg", replan)
                if flags[0]:
                    aff = afgnet.sample_affordance(afg_params, afg_config, pts, int(task.task_id), seed=s)[:k]
                if flags[1]:
                    flow = afgnet.sample_flow(afg_params, afg_config, pts, int(task.task_id), seed=s)[:k]
            prior = prior_channel(aff, flow, k)
            z = ddim_sample(bundle.actors[role], acfg, schedule, pts[:k], prior, normalize_state(state.vector()),
                            int(task.task_id), config.inference_steps, _sub_seed(seed, "ddim", replan),
                            config.prediction)
            chunk = denormalize_actions(z.reshape(acfg.horizon, ACTION_DIM))
        for a in chunk[:config.execute]:
            state = step(scene, state, Action.from_vector(a))
            result.steps += 1
            result.stages.append(stage)
            if result.steps >= task.horizon or is_success(scene, state, task):
                break
        replan += 1
    result.success = bool(is_success(scene, state, task))
    return result
