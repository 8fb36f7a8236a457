"""A small reverse-mode autodiff kernel over numpy arrays.

Only the handful of operations the networks in this package need are
supported: affine maps, elementwise arithmetic, SiLU, concatenation, max
pooling, row gathers and the two registered losses. Parameters live in flat
``{name: ndarray}`` dictionaries so they can be checkpointed and optimised
without any module machinery.
"""

from __future__ import annotations

import io
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np


class ShapeError(ValueError):
    pass


class DivergenceError(FloatingPointError):
    pass


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """An array node on the tape. ``backward`` fills ``.grad`` of every leaf."""

    __slots__ = ("data", "grad", "_parents", "_backward", "requires_grad")

    def __init__(self, data, parents: tuple[Tensor, ...] = (), backward=None, requires_grad=False):
        self.data = np.asarray(data)
        self.grad = None
        self._parents = parents
        self._backward = backward
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"

    def _accumulate(self, g):
        if not self.requires_grad:
            return
        self.grad = g if self.grad is None else self.grad + g

    def backward(self):
        if self.data.size != 1:
            raise ShapeError(f"backward needs a scalar, got shape {self.data.shape}")
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            stack.extend((p, False) for p in node._parents if p.requires_grad)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # arithmetic ----------------------------------------------------------
    def __add__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(np.asarray(other, self.data.dtype))
        out = Tensor(self.data + other.data, (self, other))

        def bw(g):
            self._accumulate(_unbroadcast(g, self.data.shape))
            other._accumulate(_unbroadcast(g, other.data.shape))
        out._backward = bw
        return out

    __radd__ = __add__

    def __neg__(self):
        out = Tensor(-self.data, (self,))
        out._backward = lambda g: self._accumulate(-g)
        return out

    def __sub__(self, other):
        return self + (-(other if isinstance(other, Tensor) else Tensor(np.asarray(other, self.data.dtype))))

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(np.asarray(other, self.data.dtype))
        out = Tensor(self.data * other.data, (self, other))

        def bw(g):
            self._accumulate(_unbroadcast(g * other.data, self.data.shape))
            other._accumulate(_unbroadcast(g * self.data, other.data.shape))
        out._backward = bw
        return out

    __rmul__ = __mul__

    def __matmul__(self, w):
        if self.data.shape[-1] != w.data.shape[0]:
            raise ShapeError(f"cannot multiply input of shape {self.data.shape} by weight of shape {w.data.shape}")
        out = Tensor(self.data @ w.data, (self, w))

        def bw(g):
            x = self.data
            if self.requires_grad:
                self._accumulate(g @ w.data.T)
            if w.requires_grad:
                x2 = x.reshape(-1, x.shape[-1])
                g2 = g.reshape(-1, g.shape[-1])
                w._accumulate(x2.T @ g2)
        out._backward = bw
        return out

    def reshape(self, *shape):
        out = Tensor(self.data.reshape(*shape), (self,))
        out._backward = lambda g: self._accumulate(g.reshape(self.data.shape))
        return out


def tensor(data, dtype=None) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype))


def silu(x: Tensor) -> Tensor:
    # sigmoid via tanh: no overflow and cheaper than exp
    s = np.tanh(x.data * 0.5)
    s *= 0.5
    s += 0.5
    y = x.data * s
    out = Tensor(y, (x,))

    def bw(g):
        # d/dx x*s(x) = s + y*(1 - s)
        d = y * s
        np.subtract(s, d, out=d)
        d += y
        d *= g
        x._accumulate(d)
    out._backward = bw
    return out


def concat(parts: list[Tensor], axis: int = -1) -> Tensor:
    datas = [p.data for p in parts]
    out = Tensor(np.concatenate(datas, axis=axis), tuple(parts))
    sizes = np.cumsum([d.shape[axis] for d in datas])[:-1]

    def bw(g):
        for p, gp in zip(parts, np.split(g, sizes, axis=axis)):
            p._accumulate(gp)
    out._backward = bw
    return out


def broadcast_to(x: Tensor, shape) -> Tensor:
    out = Tensor(np.broadcast_to(x.data, shape), (x,))
    out._backward = lambda g: x._accumulate(_unbroadcast(g, x.data.shape))
    return out


def max_pool(x: Tensor, axis: int) -> Tensor:
    """Max over ``axis``; the gradient goes to the first maximal entry."""
    idx = np.argmax(x.data, axis=axis)
    out = Tensor(np.take_along_axis(x.data, np.expand_dims(idx, axis), axis).squeeze(axis), (x,))

    def bw(g):
        full = np.zeros_like(x.data)
        np.put_along_axis(full, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis)
        x._accumulate(full)
    out._backward = bw
    return out


def take_rows(table: Tensor, index) -> Tensor:
    index = np.asarray(index, dtype=np.int64)
    out = Tensor(table.data[index], (table,))

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, index, g)
        table._accumulate(full)
    out._backward = bw
    return out


def row_slice(table: Tensor, start: int, stop: int) -> Tensor:
    out = Tensor(table.data[start:stop], (table,))

    def bw(g):
        full = np.zeros_like(table.data)
        full[start:stop] = g
        table._accumulate(full)
    out._backward = bw
    return out


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    out = Tensor(np.asarray(x.data.mean(dtype=np.float64), dtype=x.data.dtype), (x,))
    out._backward = lambda g: x._accumulate(np.full_like(x.data, g / n))
    return out


def mse(pred: Tensor, target, reduce_last: bool = False) -> Tensor:
    """Mean squared error. With ``reduce_last`` the squared error is summed
    over the last axis (a squared vector norm) before averaging."""
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=pred.data.dtype)
    if pred.data.shape != target.shape:
        raise ShapeError(f"prediction shape {pred.data.shape} does not match target shape {target.shape}")
    diff = pred.data - target
    denom = diff.size / diff.shape[-1] if reduce_last else diff.size
    value = (diff.astype(np.float64) ** 2).sum() / denom
    out = Tensor(np.asarray(value, dtype=pred.data.dtype), (pred,))
    out._backward = lambda g: pred._accumulate((2.0 * g / denom) * diff)
    return out


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    labels = np.asarray(labels, dtype=np.int64)
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    n = len(labels)
    value = -logp[np.arange(n), labels].astype(np.float64).sum() / n
    out = Tensor(np.asarray(value, dtype=logits.data.dtype), (logits,))

    def bw(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        logits._accumulate(p * (g / n))
    out._backward = bw
    return out


LOSSES: dict[str, Callable] = {"mse": mse, "softmax_cross_entropy": softmax_cross_entropy}


# ---------------------------------------------------------------- layers

@dataclass(frozen=True)
class Mlp:
    """Architecture of a SiLU multilayer perceptron stored under ``prefix``."""

    prefix: str
    sizes: tuple[int, ...]

    @property
    def n_layers(self) -> int:
        return len(self.sizes) - 1

    def init(self, rng: np.random.Generator, dtype=np.float32) -> dict[str, np.ndarray]:
        params = {}
        for i, (fan_in, fan_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            bound = 1.0 / math.sqrt(fan_in)
            params[f"{self.prefix}.l{i}.w"] = rng.uniform(-bound, bound, (fan_in, fan_out)).astype(dtype)
            params[f"{self.prefix}.l{i}.b"] = rng.uniform(-bound, bound, fan_out).astype(dtype)
        return params

    def __call__(self, params: dict[str, Tensor], x: Tensor) -> Tensor:
        return mlp_forward(params, self, x)


def mlp_forward(params: dict, mlp: Mlp, x: Tensor) -> Tensor:
    """Affine + SiLU stack with a linear output layer, batched over leading axes."""
    if not isinstance(x, Tensor):
        x = Tensor(np.asarray(x))
    for i in range(mlp.n_layers):
        w = params[f"{mlp.prefix}.l{i}.w"]
        b = params[f"{mlp.prefix}.l{i}.b"]
        w = w if isinstance(w, Tensor) else Tensor(w)
        b = b if isinstance(b, Tensor) else Tensor(b)
        if x.data.shape[-1] != w.data.shape[0]:
            raise ShapeError(f"input of shape {x.data.shape} does not fit layer "
                             f"{mlp.prefix}.l{i} with weight shape {w.data.shape}")
        x = x @ w + b
        if i < mlp.n_layers - 1:
            x = silu(x)
    return x


def mlp_forward_parts(params: dict, mlp: Mlp, parts: list[Tensor]) -> Tensor:
    """``mlp_forward`` on the concatenation of ``parts`` without materialising it.

    Each part multiplies its own row block of the first weight matrix and the
    products are summed with broadcasting, so a per-frame part of shape
    (B, 1, d) is projected once instead of once per point.
    """
    params = {k: v if isinstance(v, Tensor) else Tensor(v) for k, v in params.items()
              if k.startswith(mlp.prefix + ".")}
    w0 = params[f"{mlp.prefix}.l0.w"]
    total = sum(p.data.shape[-1] for p in parts)
    if total != w0.data.shape[0]:
        raise ShapeError(f"parts with widths {[p.data.shape[-1] for p in parts]} do not fit layer "
                         f"{mlp.prefix}.l0 with weight shape {w0.data.shape}")
    x, start = None, 0
    for part in parts:
        width = part.data.shape[-1]
        term = part @ row_slice(w0, start, start + width)
        x = term if x is None else x + term
        start += width
    x = x + params[f"{mlp.prefix}.l0.b"]
    for i in range(1, mlp.n_layers):
        x = silu(x)
        x = x @ params[f"{mlp.prefix}.l{i}.w"] + params[f"{mlp.prefix}.l{i}.b"]
    return x


def time_embed(t, dim: int, dtype=np.float64) -> np.ndarray:
    """Interleaved ``sin``/``cos`` features of ``t`` at frequencies ``10**(4k/dim)``.

    ``t`` may be a scalar or an array; the feature axis is appended last.
    """
    if dim % 2:
        raise ValueError(f"time embedding dimension must be even, got {dim}")
    t = np.asarray(t, dtype=np.float64)
    freqs = 10.0 ** (4.0 * np.arange(dim // 2) / dim)
    ang = t[..., None] * freqs
    out = np.empty(t.shape + (dim,))
    out[..., 0::2] = np.sin(ang)
    out[..., 1::2] = np.cos(ang)
    return out.astype(dtype)


# ---------------------------------------------------------------- training

def loss_and_grad(params: dict[str, np.ndarray], fn: Callable[..., Tensor], *args, context: str = "",
                  **kwargs) -> tuple[float, dict[str, np.ndarray]]:
    """Evaluate ``fn(tensor_params, *args)`` and its exact gradient.

    ``fn`` must return a scalar :class:`Tensor` built from one of the
    registered losses.
    """
    leaves = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
    loss = fn(leaves, *args, **kwargs)
    value = float(loss.data)
    if not math.isfinite(value):
        raise DivergenceError(f"divergence detected{' at ' + context if context else ''}: loss={value}")
    loss.backward()
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)).astype(params[k].dtype, copy=False)
             for k, t in leaves.items()}
    return value, grads


def as_tensors(params: dict[str, np.ndarray]) -> dict[str, Tensor]:
    return {k: Tensor(v) for k, v in params.items()}


@dataclass
class AdamWState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamWState,
               scale: float = 1.0):
    """One AdamW update (decoupled weight decay, bias-corrected moments).

    Parameters are updated in place; ``params`` and ``state`` are returned for
    convenience. ``scale`` multiplies the gradients first.
    """
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match parameter {name} of shape {p.shape}")
        if scale != 1.0:
            g = g * scale
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if state.weight_decay:
            p *= 1.0 - state.lr * state.weight_decay
        p -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype, copy=False)
    return params, state


def finite_difference_check(params: dict[str, np.ndarray], fn: Callable[..., Tensor], *args,
                            probes: int = 10, h: float = 1e-3, seed: int = 0, **kwargs) -> float:
    """Max relative error between reverse-mode and central-difference
    gradients at ``probes`` randomly chosen scalar parameters (float64)."""
    p64 = {k: v.astype(np.float64) for k, v in params.items()}
    _, grads = loss_and_grad(p64, fn, *args, **kwargs)
    rng = np.random.default_rng(seed)
    names = sorted(p64)
    worst = 0.0
    for _ in range(probes):
        name = names[rng.integers(len(names))]
        idx = tuple(int(rng.integers(s)) for s in p64[name].shape)
        orig = p64[name][idx]
        p64[name][idx] = orig + h
        up = float(fn(as_tensors(p64), *args, **kwargs).data)
        p64[name][idx] = orig - h
        down = float(fn(as_tensors(p64), *args, **kwargs).data)
        p64[name][idx] = orig
        numeric = (up - down) / (2 * h)
        analytic = float(grads[name][idx])
        scale = max(abs(numeric), abs(analytic), 1e-8)
        worst = max(worst, abs(numeric - analytic) / scale)
    return worst


# ---------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"DAPC"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def checkpoint_bytes(params: dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<I", CKPT_VERSION))
    for name in sorted(params):
        arr = np.asarray(params[name])
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


def parse_checkpoint(data: bytes) -> dict[str, np.ndarray]:
    if len(data) < 12 or data[:4] != CKPT_MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("checkpoint CRC mismatch")
    (version,) = struct.unpack_from("<I", body, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        return _parse_entries(body)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"malformed checkpoint entry table ({exc})") from None


def _parse_entries(body: bytes) -> dict[str, np.ndarray]:
    pos, out = 8, {}
    while pos < len(body):
        (nlen,) = struct.unpack_from("<H", body, pos)
        pos += 2
        name = body[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<B", body, pos)
        pos += 1
        dims = struct.unpack_from(f"<{rank}I", body, pos)
        pos += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        out[name] = np.frombuffer(body, dtype="<f4", count=count, offset=pos).reshape(dims).astype(np.float32)
        pos += 4 * count
    return out


def save_checkpoint(path: str | Path, params: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(checkpoint_bytes(params))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    return parse_checkpoint(Path(path).read_bytes())


def with_prefix(prefix: str, params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {f"{prefix}{k}": v for k, v in params.items()}


def strip_prefix(prefix: str, params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}


def param_count(params: dict[str, np.ndarray]) -> int:
    return int(sum(v.size for v in params.values()))
