"""Small dense-tensor engine with a reverse-mode tape and Adam.

Everything is float64. Operations return new :class:`Tensor` objects and never
mutate their inputs. When a :class:`Tape` is active (``with Tape() as tape``)
and at least one input requires a gradient, the operation appends a node to
the tape; :func:`backward` then walks the tape in reverse exactly once.

Image tensors use the NCHW layout.
"""
from __future__ import annotations

import json
import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor", "Tape", "AdamState", "backward", "adam_step",
    "matmul", "conv2d", "maxpool2d", "avgpool2d", "tanh", "sigmoid", "relu",
    "add", "sub", "mul", "scale", "neg", "log", "sqrt", "clamp", "flatten",
    "reshape", "take", "total", "mean", "squared_euclidean",
    "save_checkpoint", "load_checkpoint",
]

_state = threading.local()


class Tensor:
    """An n-dimensional float64 array that may take part in differentiation."""

    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64, copy=True)
        if not np.all(np.isfinite(arr)):
            raise FloatingPointError(f"non-finite values in tensor {name or ''}".strip())
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool, op: str) -> "Tensor":
        t = cls.__new__(cls)
        if not np.all(np.isfinite(arr)):
            raise FloatingPointError(f"{op} produced non-finite values")
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        arr.setflags(write=False)
        t.data = arr
        t.requires_grad = requires_grad
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def assign(self, values) -> None:
        """Rebind the payload (used by optimizers on parameter leaves)."""
        arr = np.array(values, dtype=np.float64, copy=True)
        if arr.shape != self.data.shape:
            raise ValueError(f"assign: shape {arr.shape} != {self.data.shape}")
        if not np.all(np.isfinite(arr)):
            raise FloatingPointError(f"non-finite values assigned to {self.name or 'tensor'}")
        arr.setflags(write=False)
        self.data = arr

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _scalar_error(self)

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    # identity hashing: tensors are used as dict keys for gradients
    __hash__ = object.__hash__

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _scalar_error(t: Tensor):
    raise ValueError(f"item() needs a single-element tensor, got shape {t.shape}")


@dataclass
class _Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    grad_fn: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


class Tape:
    """Append-only record of differentiable operations."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._prev: Tape | None = None

    def __enter__(self) -> "Tape":
        self._prev = getattr(_state, "tape", None)
        _state.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _state.tape = self._prev
        self._prev = None

    def __len__(self) -> int:
        return len(self.nodes)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(op: str, inputs: Sequence[Tensor], out: np.ndarray, grad_fn) -> Tensor:
    tape = getattr(_state, "tape", None)
    needs = tape is not None and any(t.requires_grad for t in inputs)
    result = Tensor._wrap(out, needs, op)
    if needs:
        tape.nodes.append(_Node(op, tuple(inputs), result, grad_fn))
    return result


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ----------------------------------------------------------------------------
# elementwise and linear-algebra ops

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return _record("add", (a, b), a.data + b.data,
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape
    return _record("sub", (a, b), a.data - b.data,
                   lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("mul", a, b)
    ad, bd = a.data, b.data
    return _record("mul", (a, b), ad * bd,
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _record("scale", (a,), a.data * c, lambda g: (g * c,))


def neg(a: Tensor) -> Tensor:
    return _record("neg", (a,), -a.data, lambda g: (-g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _record("matmul", (a, b), ad @ bd, lambda g: (g @ bd.T, ad.T @ g))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _record("tanh", (a,), y, lambda g: (g * (1.0 - y * y),))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _record("sigmoid", (a,), y, lambda g: (g * y * (1.0 - y),))


def relu(a: Tensor) -> Tensor:
    keep = a.data > 0
    return _record("relu", (a,), np.where(keep, a.data, 0.0), lambda g: (g * keep,))


def log(a: Tensor) -> Tensor:
    x = a.data
    if np.any(x <= 0):
        raise FloatingPointError("log of non-positive value")
    return _record("log", (a,), np.log(x), lambda g: (g / x,))


def sqrt(a: Tensor) -> Tensor:
    """Square root; the derivative at exactly 0 is taken as 0 (subgradient)."""
    x = a.data
    if np.any(x < 0):
        raise FloatingPointError("sqrt of negative value")
    y = np.sqrt(x)
    safe = np.where(y > 0, y, 1.0)

    def grad_fn(g):
        return (np.where(y > 0, g * 0.5 / safe, 0.0),)

    return _record("sqrt", (a,), y, grad_fn)


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    x = a.data
    inside = (x >= lo) & (x <= hi)
    return _record("clamp", (a,), np.clip(x, lo, hi), lambda g: (g * inside,))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ValueError(f"reshape: cannot view {src} as {shape}") from None
    return _record("reshape", (a,), out, lambda g: (g.reshape(src),))


def flatten(a: Tensor) -> Tensor:
    """Flatten every axis after the first (batch) axis."""
    if a.data.ndim < 2:
        raise ValueError("flatten expects a batched tensor")
    return reshape(a, (a.shape[0], -1))


def take(a: Tensor, index) -> Tensor:
    """Gather rows ``a[index]`` along axis 0; repeated indices accumulate."""
    idx = np.asarray(index, dtype=np.intp)
    src = a.shape

    def grad_fn(g):
        out = np.zeros(src)
        np.add.at(out, idx, g)
        return (out,)

    return _record("take", (a,), a.data[idx], grad_fn)


def total(a: Tensor) -> Tensor:
    src = a.shape
    return _record("sum", (a,), np.array(a.data.sum()), lambda g: (np.full(src, np.asarray(g).item()),))


def mean(a: Tensor) -> Tensor:
    src, n = a.shape, a.size
    if n == 0:
        raise ValueError("mean of empty tensor")
    return _record("mean", (a,), np.array(a.data.mean()), lambda g: (np.full(src, np.asarray(g).item() / n),))


def squared_euclidean(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise squared distance over the last axis."""
    if a.shape != b.shape:
        raise ValueError(f"squared_euclidean: shapes differ {a.shape} vs {b.shape}")
    diff = a.data - b.data

    def grad_fn(g):
        gd = 2.0 * diff * np.expand_dims(g, -1)
        return gd, -gd

    return _record("squared_euclidean", (a, b), np.sum(diff * diff, axis=-1), grad_fn)


# ----------------------------------------------------------------------------
# convolution and pooling (NCHW)

def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Stride-1, valid-padding cross-correlation.

    x: (N, C, H, W), w: (F, C, kh, kw), b: (F,) -> (N, F, H-kh+1, W-kw+1)
    """
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ValueError(f"conv2d: expected 4-d input and kernel, got {x.shape}, {w.shape}")
    n, c, h, wd = x.shape
    f, cw, kh, kw = w.shape
    if c != cw:
        raise ValueError(f"conv2d: input has {c} channels, kernel expects {cw}")
    if kh > h or kw > wd:
        raise ValueError(f"conv2d: kernel {kh}x{kw} larger than input {h}x{wd}")
    if b is not None and b.shape != (f,):
        raise ValueError(f"conv2d: bias shape {b.shape} != ({f},)")

    xd, wdat = x.data, w.data
    ho, wo = h - kh + 1, wd - kw + 1
    # im2col once: rows (n, i, j), columns (c, di, dj)
    win = sliding_window_view(xd, (kh, kw), axis=(2, 3))  # N,C,Ho,Wo,kh,kw
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    wmat = wdat.reshape(f, c * kh * kw)
    out = (cols @ wmat.T).reshape(n, ho, wo, f).transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b.data[None, :, None, None]
    need_x = x.requires_grad

    def grad_fn(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, f)
        gw = (gmat.T @ cols).reshape(f, c, kh, kw)
        gx = None
        if need_x:
            gp = np.pad(g, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
            gwin = sliding_window_view(gp, (kh, kw), axis=(2, 3))  # N,F,H,W,kh,kw
            gcols = gwin.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * wd, f * kh * kw)
            wflip = wdat[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c, f * kh * kw)
            gx = (gcols @ wflip.T).reshape(n, h, wd, c).transpose(0, 3, 1, 2)
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    inputs = (x, w) if b is None else (x, w, b)
    return _record("conv2d", inputs, out, grad_fn)


def _pool_view(x: Tensor, op: str) -> np.ndarray:
    if x.data.ndim != 4:
        raise ValueError(f"{op}: expected NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"{op}: spatial size {h}x{w} is not divisible by 2")
    return x.data.reshape(n, c, h // 2, 2, w // 2, 2)


def maxpool2d(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2. Ties route the gradient to the first maximum."""
    v = _pool_view(x, "maxpool2d")
    n, c, h2, _, w2, _ = v.shape
    flat = v.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def grad_fn(g):
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, arg[..., None], g[..., None], axis=-1)
        gx = gflat.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (gx.reshape(n, c, 2 * h2, 2 * w2),)

    return _record("maxpool2d", (x,), out, grad_fn)


def avgpool2d(x: Tensor) -> Tensor:
    """2x2 average pooling with stride 2."""
    v = _pool_view(x, "avgpool2d")
    shape = x.shape

    def grad_fn(g):
        gx = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25
        return (gx.reshape(shape),)

    return _record("avgpool2d", (x,), v.mean(axis=(3, 5)), grad_fn)


# ----------------------------------------------------------------------------
# reverse pass

def backward(tape: Tape, loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Gradients of a scalar ``loss`` for every tensor on ``tape`` that requires one.

    Returns a mapping keyed by tensor identity. Leaves that received no gradient
    flow are absent from the mapping.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    owners: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(tape.nodes):
        g = grads.get(id(node.output))
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.grad_fn(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = np.asarray(gi, dtype=np.float64)
                owners[key] = inp
    return {owners[k]: v for k, v in grads.items()}


# ----------------------------------------------------------------------------
# Adam

@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray],
              state: AdamState) -> tuple[list[np.ndarray], AdamState]:
    """One bias-corrected Adam update. Pure: returns new arrays and a new state."""
    if len(params) != len(grads):
        raise ValueError(f"adam_step: {len(params)} params but {len(grads)} grads")
    m_prev = state.m or [np.zeros_like(p, dtype=np.float64) for p in params]
    v_prev = state.v or [np.zeros_like(p, dtype=np.float64) for p in params]
    if len(m_prev) != len(params):
        raise ValueError("adam_step: optimizer state does not match parameter list")

    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, m_prev, v_prev):
        p = np.asarray(p, dtype=np.float64)
        g = np.asarray(g, dtype=np.float64)
        if p.shape != g.shape or m.shape != p.shape:
            raise ValueError(f"adam_step: shape mismatch {p.shape} vs {g.shape}")
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        step = state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        new_p.append(p - step)
        new_m.append(m)
        new_v.append(v)
    return new_p, AdamState(state.lr, b1, b2, state.eps, t, new_m, new_v)


# ----------------------------------------------------------------------------
# checkpoints

_MAGIC = b"MGRD"


def save_checkpoint(directory, named: Sequence[tuple[str, np.ndarray]], meta: dict | None = None) -> Path:
    """Write ``params.bin`` and ``params.json`` into ``directory``."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    chunks = [_MAGIC, struct.pack("<I", len(named))]
    for _, arr in named:
        arr = np.asarray(arr, dtype="<f8")
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr).tobytes())
    (out / "params.bin").write_bytes(b"".join(chunks))
    info = dict(meta or {})
    info["names"] = [n for n, _ in named]
    info["shapes"] = [list(np.shape(a)) for _, a in named]
    (out / "params.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
    return out


def load_checkpoint(directory) -> tuple[list[tuple[str, np.ndarray]], dict]:
    src = Path(directory)
    raw = (src / "params.bin").read_bytes()
    meta = json.loads((src / "params.json").read_text())
    if raw[:4] != _MAGIC:
        raise ValueError(f"{src}: not a parameter checkpoint")
    (count,) = struct.unpack_from("<I", raw, 4)
    pos = 8
    arrays = []
    for _ in range(count):
        (rank,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}I", raw, pos)
        pos += 4 * rank
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(raw, dtype="<f8", count=n, offset=pos).reshape(dims).astype(np.float64)
        pos += 8 * n
        arrays.append(arr)
    names = meta.get("names", [f"t{i}" for i in range(count)])
    if len(names) != count:
        raise ValueError(f"{src}: metadata lists {len(names)} tensors, payload has {count}")
    return list(zip(names, arrays)), meta
