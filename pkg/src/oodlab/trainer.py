"""End-to-end CE training and two-stage siamese contrastive training."""
from __future__ import annotations

import csv
import enum
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from itertools import combinations
from pathlib import Path

import numpy as np

from . import microgrind as mg
from .nnmodels import (ClassifierParams, ContrastiveConfig, EncoderParams, ce_loss,
                       classifier_forward, contrastive_loss, encoder_forward)
from .synthgen import Dataset, Role

log = logging.getLogger(__name__)

# stream ids for SeedSequence so each consumer gets an independent generator
_INIT_STREAM, _SHUFFLE_STREAM, _SPLIT_STREAM, _HEAD_STREAM = 1, 2, 3, 4


class LossKind(str, enum.Enum):
    CE = "ce"
    CONTRASTIVE = "contrastive"


class TrainingError(RuntimeError):
    """Training aborted (non-finite loss or a broken invariant)."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    lr: float = 1e-4
    split: float = 0.85
    n_train_pool: int = 200
    n_test: int = 200
    seed: int = 0
    loss: LossKind = LossKind.CE
    margin: float = 1.0
    # frozen-encoder head stage only: a convex fit that 1e-4 cannot finish in 100 epochs
    head_lr: float = 1e-2

    def __post_init__(self):
        object.__setattr__(self, "loss", LossKind(self.loss))
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss"] = self.loss.value
        return d

    def overrides(self) -> dict:
        """Fields that differ from the defaults (seed and loss excluded)."""
        base = TrainConfig(seed=self.seed, loss=self.loss).to_dict()
        return {k: v for k, v in self.to_dict().items() if base[k] != v}


def config_hash(payload: dict) -> str:
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_acc: float


@dataclass
class TrainedModel:
    pipeline: str  # "ce" | "contrastive"
    encoder: EncoderParams
    head: ClassifierParams
    history: list[EpochRecord]
    config: TrainConfig
    best_epoch: int
    final_encoder: EncoderParams
    final_head: ClassifierParams
    stage1_history: list[EpochRecord] = field(default_factory=list)
    initial_train_loss: float = float("nan")

    @property
    def seed(self) -> int:
        return self.config.seed

    @property
    def config_hash(self) -> str:
        return config_hash(self.config.to_dict())

    def predict(self, images: np.ndarray) -> np.ndarray:
        return predict_proba(self.encoder, self.head, images)


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), stream]))


def split(dataset: Dataset, fraction: float = 0.85, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Stratified, deterministic train/validation split."""
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"split fraction must lie in (0, 1), got {fraction}")
    labels = dataset.labels
    rng = _rng(seed, _SPLIT_STREAM)
    train_idx, val_idx = [], []
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        idx = idx[rng.permutation(idx.size)]
        k = int(round(fraction * idx.size))
        train_idx.extend(idx[:k].tolist())
        val_idx.extend(idx[k:].tolist())
    return dataset.subset(sorted(train_idx), Role.TRAIN), dataset.subset(sorted(val_idx), Role.VAL)


def make_pairs(labels, rng: np.random.Generator | None = None) -> list[tuple[int, int, bool]]:
    """Every unordered within-batch pair with its same-class flag.

    Pairing is exhaustive, so ``rng`` is accepted for interface symmetry but unused.
    """
    labels = np.asarray(labels)
    if labels.size < 2:
        log.warning("batch of %d sample(s) has no pairs; skipped", labels.size)
        return []
    return [(i, j, bool(labels[i] == labels[j])) for i, j in combinations(range(labels.size), 2)]


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for lo in range(0, n, batch_size):
        yield order[lo:lo + batch_size]


def _step(params: list[mg.Tensor], loss_fn, state: mg.AdamState) -> tuple[float, mg.AdamState]:
    with mg.Tape() as tape:
        loss = loss_fn()
    value = loss.item()
    if not np.isfinite(value):
        raise TrainingError(f"non-finite loss {value}")
    grads = mg.backward(tape, loss)
    arrays = [p.data for p in params]
    gl = [grads.get(p, np.zeros_like(p.data)) for p in params]
    new, state = mg.adam_step(arrays, gl, state)
    for p, arr in zip(params, new):
        p.assign(arr)
    return value, state


def predict_proba(enc: EncoderParams, head: ClassifierParams, images: np.ndarray,
                  chunk: int = 256) -> np.ndarray:
    out = [classifier_forward(head, encoder_forward(enc, images[lo:lo + chunk])).data
           for lo in range(0, len(images), chunk)]
    return np.concatenate(out) if out else np.zeros(0)


def embed(enc: EncoderParams, images: np.ndarray, chunk: int = 256) -> np.ndarray:
    out = [encoder_forward(enc, images[lo:lo + chunk]).data for lo in range(0, len(images), chunk)]
    return np.concatenate(out) if out else np.zeros((0, 84))


def _ce_eval(enc, head, images, labels) -> tuple[float, float]:
    p = predict_proba(enc, head, images)
    loss = ce_loss(p, labels).item()
    acc = float(np.mean((p >= 0.5) == (labels == 1)))
    return loss, acc


def train_ce(train: Dataset, val: Dataset, cfg: TrainConfig) -> TrainedModel:
    """Encoder and head trained jointly with mean batch CE under Adam."""
    if cfg.loss != LossKind.CE:
        raise ValueError("train_ce needs a CE config")
    init = _rng(cfg.seed, _INIT_STREAM)
    enc, head = EncoderParams.init(init), ClassifierParams.init(init)
    x, y = train.images, train.labels.astype(np.float64)
    xv, yv = val.images, val.labels.astype(np.float64)
    params = enc.params() + head.params()
    state = mg.AdamState(lr=cfg.lr)
    shuffle = _rng(cfg.seed, _SHUFFLE_STREAM)
    initial, _ = _ce_eval(enc, head, x, y)

    history: list[EpochRecord] = []
    best = (-1.0, -1, enc.copy(), head.copy())
    for epoch in range(cfg.epochs):
        total, count = 0.0, 0
        for idx in _batches(len(x), cfg.batch_size, shuffle):
            xb, yb = x[idx], y[idx]
            value, state = _step(params, lambda: ce_loss(classifier_forward(head, encoder_forward(enc, xb)), yb), state)
            total += value * len(idx)
            count += len(idx)
        val_loss, val_acc = _ce_eval(enc, head, xv, yv)
        history.append(EpochRecord(epoch, total / count, val_loss, val_acc))
        if val_acc > best[0]:
            best = (val_acc, epoch, enc.copy(), head.copy())
    _, best_epoch, best_enc, best_head = best
    return TrainedModel("ce", best_enc, best_head, history, cfg, best_epoch,
                        enc, head, initial_train_loss=initial)


def _pair_arrays(labels: np.ndarray):
    pairs = make_pairs(labels)
    if not pairs:
        return None
    i0, i1, same = (np.array(v) for v in zip(*pairs))
    return i0, i1, same


def _contrastive_batch_loss(enc, xb, yb, ccfg):
    arrs = _pair_arrays(yb)
    e = encoder_forward(enc, xb)
    i0, i1, _ = arrs
    return contrastive_loss(mg.take(e, i0), mg.take(e, i1), yb[i0], yb[i1], ccfg)


def _contrastive_eval(enc, images, labels, ccfg) -> float:
    arrs = _pair_arrays(labels)
    if arrs is None:
        return float("nan")
    e = embed(enc, images)
    i0, i1, _ = arrs
    return contrastive_loss(e[i0], e[i1], labels[i0], labels[i1], ccfg).item()


@dataclass
class Stage1Result:
    encoder: EncoderParams
    final_encoder: EncoderParams
    history: list[EpochRecord]
    best_epoch: int
    margin: float
    initial_train_loss: float


def train_contrastive(train: Dataset, val: Dataset, cfg: TrainConfig) -> Stage1Result:
    """Siamese stage: one encoder, exhaustive within-batch pairs, mean pair loss."""
    if cfg.loss != LossKind.CONTRASTIVE:
        raise ValueError("train_contrastive needs a contrastive config")
    ccfg = ContrastiveConfig(cfg.margin)
    enc = EncoderParams.init(_rng(cfg.seed, _INIT_STREAM))
    x, y = train.images, train.labels
    xv, yv = val.images, val.labels
    params = enc.params()
    state = mg.AdamState(lr=cfg.lr)
    shuffle = _rng(cfg.seed, _SHUFFLE_STREAM)
    initial = _contrastive_eval(enc, x, y, ccfg)

    history: list[EpochRecord] = []
    best = (np.inf, -1, enc.copy())
    for epoch in range(cfg.epochs):
        total, count = 0.0, 0
        for idx in _batches(len(x), cfg.batch_size, shuffle):
            if len(idx) < 2:
                log.warning("skipping batch of size %d in contrastive stage", len(idx))
                continue
            xb, yb = x[idx], y[idx]
            value, state = _step(params, lambda: _contrastive_batch_loss(enc, xb, yb, ccfg), state)
            total += value * len(idx)
            count += len(idx)
        val_loss = _contrastive_eval(enc, xv, yv, ccfg)
        history.append(EpochRecord(epoch, total / max(count, 1), val_loss, float("nan")))
        if val_loss < best[0]:
            best = (val_loss, epoch, enc.copy())
    _, best_epoch, best_enc = best
    return Stage1Result(best_enc, enc, history, best_epoch, ccfg.margin, initial)


def train_head(encoder: EncoderParams, train: Dataset, val: Dataset, cfg: TrainConfig,
               stage1: Stage1Result | None = None) -> TrainedModel:
    """Fit only the classifier head with CE on top of a frozen encoder."""
    before = encoder.checksum()
    frozen = [p.requires_grad for p in encoder.params()]
    # embeddings are computed once; the encoder never sees a tape here
    for p in encoder.params():
        p.requires_grad = False
    try:
        e, y = embed(encoder, train.images), train.labels.astype(np.float64)
        ev, yv = embed(encoder, val.images), val.labels.astype(np.float64)
        model = fit_head(e, y, ev, yv, cfg)
    finally:
        for p, flag in zip(encoder.params(), frozen):
            p.requires_grad = flag
    if encoder.checksum() != before:
        raise TrainingError("encoder parameters changed during head training")
    head, final_head, history, best_epoch, initial = model
    return TrainedModel("contrastive", encoder, head, history, cfg, best_epoch, encoder, final_head,
                        stage1_history=stage1.history if stage1 else [], initial_train_loss=initial)


def fit_head(e: np.ndarray, y: np.ndarray, ev: np.ndarray, yv: np.ndarray, cfg: TrainConfig):
    """CE training of a classifier head on fixed embeddings."""
    head = ClassifierParams.init(_rng(cfg.seed, _HEAD_STREAM))
    params = head.params()
    state = mg.AdamState(lr=cfg.head_lr)
    shuffle = _rng(cfg.seed, _SHUFFLE_STREAM)

    def evaluate():
        p = classifier_forward(head, ev).data
        return ce_loss(p, yv).item(), float(np.mean((p >= 0.5) == (yv == 1)))

    initial = ce_loss(classifier_forward(head, e).data, y).item()
    history: list[EpochRecord] = []
    best = (-1.0, -1, head.copy())
    for epoch in range(cfg.epochs):
        total, count = 0.0, 0
        for idx in _batches(len(e), cfg.batch_size, shuffle):
            eb, yb = e[idx], y[idx]
            value, state = _step(params, lambda: ce_loss(classifier_forward(head, eb), yb), state)
            total += value * len(idx)
            count += len(idx)
        val_loss, val_acc = evaluate()
        history.append(EpochRecord(epoch, total / count, val_loss, val_acc))
        if val_acc > best[0]:
            best = (val_acc, epoch, head.copy())
    return best[2], head, history, best[1], initial


def train_pipeline(train: Dataset, val: Dataset, cfg: TrainConfig) -> TrainedModel:
    if cfg.loss == LossKind.CE:
        return train_ce(train, val, cfg)
    stage1 = train_contrastive(train, val, cfg)
    return train_head(stage1.encoder, train, val, cfg, stage1)


# ----------------------------------------------------------------------------
# persistence

def write_history(path, history: list[EpochRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss", "val_acc"])
        for r in history:
            w.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss), repr(r.val_acc)])


def save_model(model: TrainedModel, directory, extra: dict | None = None) -> Path:
    """``config.json``, ``history.csv`` and best/final checkpoints under ``directory``."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    meta = {"pipeline": model.pipeline, "seed": model.seed, "config_hash": model.config_hash}
    config = {"config": model.config.to_dict(), "overrides": model.config.overrides(),
              "best_epoch": model.best_epoch, **meta, **(extra or {})}
    if model.pipeline == "contrastive":
        config["margin"] = model.config.margin
    (out / "config.json").write_text(json.dumps(config, indent=2, sort_keys=True) + "\n")
    write_history(out / "history.csv", model.history)
    if model.stage1_history:
        write_history(out / "history-stage1.csv", model.stage1_history)
    for tag, enc, head in (("best", model.encoder, model.head), ("final", model.final_encoder, model.final_head)):
        stage = "contrastive_stage2" if model.pipeline == "contrastive" else "ce"
        mg.save_checkpoint(out / f"checkpoint-{tag}", enc.named_arrays() + head.named_arrays(),
                           {**meta, "stage": stage, "epoch": model.best_epoch if tag == "best" else model.config.epochs - 1})
    return out
