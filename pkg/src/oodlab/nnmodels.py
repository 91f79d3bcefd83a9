"""LeNet-5 style encoder, the shared sigmoid classifier head, and both losses."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import microgrind as mg
from .microgrind import Tensor

EMBED_DIM = 84
INPUT_SIZE = 64
PROB_CLAMP = 1e-12

# (name, shape, fan_in) in forward order
ENCODER_LAYOUT = (
    ("conv1.w", (6, 1, 5, 5), 25), ("conv1.b", (6,), 25),
    ("conv2.w", (16, 6, 5, 5), 150), ("conv2.b", (16,), 150),
    ("fc1.w", (400, 120), 400), ("fc1.b", (120,), 400),
    ("fc2.w", (120, EMBED_DIM), 120), ("fc2.b", (EMBED_DIM,), 120),
)
HEAD_LAYOUT = (("cls.w", (EMBED_DIM, 1), EMBED_DIM), ("cls.b", (1,), EMBED_DIM))


class _ParamSet:
    layout: tuple = ()

    def __init__(self, tensors: dict[str, Tensor]):
        names = [n for n, _, _ in self.layout]
        if sorted(tensors) != sorted(names):
            raise ValueError(f"expected parameters {names}, got {sorted(tensors)}")
        for name, shape, _ in self.layout:
            if tensors[name].shape != shape:
                raise ValueError(f"{name}: shape {tensors[name].shape} != {shape}")
        self.tensors = {n: tensors[n] for n in names}

    @classmethod
    def init(cls, rng: np.random.Generator, zero_bias: bool = False):
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for every weight and bias."""
        tensors = {}
        for name, shape, fan_in in cls.layout:
            bound = 1.0 / np.sqrt(fan_in)
            values = rng.uniform(-bound, bound, size=shape)
            if zero_bias and name.endswith(".b"):
                values = np.zeros(shape)
            tensors[name] = Tensor(values, requires_grad=True, name=name)
        return cls(tensors)

    @classmethod
    def from_arrays(cls, named):
        return cls({n: Tensor(a, requires_grad=True, name=n) for n, a in named})

    def params(self) -> list[Tensor]:
        return list(self.tensors.values())

    def named_arrays(self) -> list[tuple[str, np.ndarray]]:
        return [(n, t.data) for n, t in self.tensors.items()]

    def layer_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        return [(n, t.shape) for n, t in self.tensors.items()]

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, arr in self.named_arrays():
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def copy(self):
        return type(self).from_arrays(self.named_arrays())

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]


class EncoderParams(_ParamSet):
    """conv(6@5x5) -> pool -> conv(16@5x5) -> pool -> fc 120 -> fc 84, tanh throughout."""

    layout = ENCODER_LAYOUT


class ClassifierParams(_ParamSet):
    layout = HEAD_LAYOUT


def _as_batch(x) -> Tensor:
    if isinstance(x, Tensor):
        t = x
    else:
        t = Tensor(np.asarray(x, dtype=np.float64))
    shape = t.shape
    if shape[-2:] != (INPUT_SIZE, INPUT_SIZE):
        raise ValueError(f"encoder expects {INPUT_SIZE}x{INPUT_SIZE} inputs, got shape {shape}")
    if len(shape) == 2:
        return mg.reshape(t, (1, 1, INPUT_SIZE, INPUT_SIZE))
    if len(shape) == 3:
        return mg.reshape(t, (shape[0], 1, INPUT_SIZE, INPUT_SIZE))
    if len(shape) == 4 and shape[1] == 1:
        return t
    raise ValueError(f"encoder expects (N, 64, 64) or (N, 1, 64, 64) input, got {shape}")


def encoder_forward(enc: EncoderParams, x) -> Tensor:
    """Embeddings (N, 84) for images of shape (64, 64), (N, 64, 64) or (N, 1, 64, 64)."""
    h = mg.avgpool2d(_as_batch(x))  # 64 -> 32
    h = mg.maxpool2d(mg.tanh(mg.conv2d(h, enc["conv1.w"], enc["conv1.b"])))  # 28 -> 14
    h = mg.maxpool2d(mg.tanh(mg.conv2d(h, enc["conv2.w"], enc["conv2.b"])))  # 10 -> 5
    h = mg.flatten(h)
    h = mg.tanh(mg.add(mg.matmul(h, enc["fc1.w"]), enc["fc1.b"]))
    return mg.tanh(mg.add(mg.matmul(h, enc["fc2.w"]), enc["fc2.b"]))


def _as_embeddings(e) -> Tensor:
    t = e if isinstance(e, Tensor) else Tensor(e)
    if t.data.ndim == 1:
        t = mg.reshape(t, (1, t.shape[0]))
    if t.shape[-1] != EMBED_DIM:
        raise ValueError(f"classifier expects {EMBED_DIM}-dim embeddings, got {t.shape}")
    return t


def classifier_score(cls: ClassifierParams, e) -> Tensor:
    """Pre-sigmoid score (N,)."""
    z = mg.add(mg.matmul(_as_embeddings(e), cls["cls.w"]), cls["cls.b"])
    return mg.reshape(z, (z.shape[0],))


def classifier_forward(cls: ClassifierParams, e) -> Tensor:
    """Malignancy probability (N,)."""
    return mg.sigmoid(classifier_score(cls, e))


def ce_loss(p, y) -> Tensor:
    """Mean binary cross-entropy; probabilities are clamped away from 0 and 1."""
    p = p if isinstance(p, Tensor) else Tensor(np.atleast_1d(p))
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    if y.shape != p.shape:
        raise ValueError(f"ce_loss: {p.shape} probabilities vs {y.shape} labels")
    p = mg.clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    pos = mg.mul(mg.log(p), y)
    negs = mg.mul(mg.log(mg.sub(1.0, p)), 1.0 - y)
    return mg.neg(mg.mean(mg.add(pos, negs)))


@dataclass(frozen=True)
class ContrastiveConfig:
    margin: float = 1.0
    distance: str = "euclidean"

    def __post_init__(self):
        if not self.margin > 0:
            raise ValueError(f"margin must be positive, got {self.margin}")
        if self.distance != "euclidean":
            raise ValueError(f"unsupported distance {self.distance!r}")


def pair_distance(e0, e1) -> Tensor:
    """Row-wise Euclidean distance; 1-d inputs give a single distance."""
    a, b = (x if isinstance(x, Tensor) else Tensor(x) for x in (e0, e1))
    if a.shape != b.shape:
        raise ValueError(f"pair_distance: dimension mismatch {a.shape} vs {b.shape}")
    return mg.sqrt(mg.squared_euclidean(a, b))


def contrastive_terms(e0, e1, same) -> tuple[Tensor, Tensor, np.ndarray]:
    a, b = (x if isinstance(x, Tensor) else Tensor(x) for x in (e0, e1))
    if a.shape != b.shape:
        raise ValueError(f"contrastive_loss: dimension mismatch {a.shape} vs {b.shape}")
    sq = mg.squared_euclidean(a, b)
    return sq, mg.sqrt(sq), np.atleast_1d(np.asarray(same, dtype=np.float64))


def contrastive_loss(e0, e1, y0, y1, cfg: ContrastiveConfig = ContrastiveConfig()) -> Tensor:
    """Mean over pairs of d^2 (same class) or max(0, m - d)^2 (different class)."""
    same = np.asarray(y0) == np.asarray(y1)
    sq, d, s = contrastive_terms(e0, e1, same)
    hinge = mg.relu(mg.sub(cfg.margin, d))
    per_pair = mg.add(mg.mul(sq, s), mg.mul(mg.mul(hinge, hinge), 1.0 - s))
    return mg.mean(per_pair)
