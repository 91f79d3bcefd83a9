"""Classification metrics, PCA feature projections and gradient saliency."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import microgrind as mg
from .nnmodels import ClassifierParams, EncoderParams, classifier_score, encoder_forward

log = logging.getLogger(__name__)


class DegenerateDataError(ValueError):
    """Features do not span two dimensions."""


# ----------------------------------------------------------------------------
# metrics

@dataclass(frozen=True)
class MetricsReport:
    """Malignant (label 1) is the positive class. Undefined ratios are NaN."""

    acc: float
    se: float
    sp: float
    tp: int
    tn: int
    fp: int
    fn: int
    dataset_id: str = ""
    model_id: str = ""

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    def check(self, tol: float = 1e-12) -> None:
        """acc must equal the class-weighted mean of sensitivity and specificity."""
        pos, neg = self.tp + self.fn, self.tn + self.fp
        if pos and neg:
            expect = (self.se * pos + self.sp * neg) / (pos + neg)
            if abs(expect - self.acc) > tol:
                raise AssertionError(f"metrics identity broken: {self.acc} vs {expect}")


def _ratio(num: int, den: int) -> float:
    return num / den if den else float("nan")


def confusion_metrics(predictions, labels, threshold: float = 0.5,
                      dataset_id: str = "", model_id: str = "") -> MetricsReport:
    p = np.asarray(predictions, dtype=np.float64)
    y = np.asarray(labels).astype(int)
    if p.shape != y.shape:
        raise ValueError(f"{p.size} predictions for {y.size} labels")
    pred = p >= threshold
    pos = y == 1
    tp = int(np.sum(pred & pos))
    tn = int(np.sum(~pred & ~pos))
    fp = int(np.sum(pred & ~pos))
    fn = int(np.sum(~pred & pos))
    report = MetricsReport(_ratio(tp + tn, tp + tn + fp + fn), _ratio(tp, tp + fn), _ratio(tn, tn + fp),
                           tp, tn, fp, fn, dataset_id, model_id)
    report.check()
    return report


# ----------------------------------------------------------------------------
# features and PCA

def extract_features(encoder: EncoderParams, images: np.ndarray, chunk: int = 256) -> np.ndarray:
    """One 84-dim embedding row per image."""
    images = np.asarray(images)
    rows = [encoder_forward(encoder, images[lo:lo + chunk]).data for lo in range(0, len(images), chunk)]
    return np.concatenate(rows) if rows else np.zeros((0, 84))


@dataclass(frozen=True)
class PCAFit:
    mean: np.ndarray  # (D,)
    basis: np.ndarray  # (2, D), orthonormal rows
    explained_variance: np.ndarray  # (2,)
    total_variance: float


def pca_fit(features: np.ndarray, n_components: int = 2) -> PCAFit:
    """Top principal directions of mean-centred features.

    Each component's largest-magnitude coordinate is made positive so the
    sign is reproducible.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 3:
        raise DegenerateDataError(f"PCA needs at least 3 samples, got shape {x.shape}")
    mean = x.mean(axis=0)
    centred = x - mean
    _, s, vt = np.linalg.svd(centred, full_matrices=False)
    scale = s[0] if s.size else 0.0
    rank = int(np.sum(s > max(x.shape) * np.finfo(float).eps * scale)) if scale > 0 else 0
    if rank < n_components:
        raise DegenerateDataError(f"feature matrix has rank {rank} < {n_components}")
    basis = vt[:n_components].copy()
    for row in basis:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1.0
    var = s[:n_components] ** 2 / (x.shape[0] - 1)
    total = float(np.sum(s ** 2) / (x.shape[0] - 1))
    return PCAFit(mean, basis, var, total)


def pca_project(fit: PCAFit, features: np.ndarray) -> np.ndarray:
    return (np.asarray(features, dtype=np.float64) - fit.mean) @ fit.basis.T


@dataclass(frozen=True)
class Ellipse:
    """Two-standard-deviation ellipse of a 2-D point group."""

    center: tuple[float, float]
    semi_axes: tuple[float, float]  # major, minor
    angle_deg: float  # major axis, counter-clockwise from +x

    def to_dict(self) -> dict:
        return {"center": list(self.center), "semi_axes": list(self.semi_axes), "angle_deg": self.angle_deg}


def ellipse_2std(points: np.ndarray, n_std: float = 2.0) -> Ellipse | None:
    pts = np.asarray(points, dtype=np.float64)
    if len(pts) < 3:
        log.warning("ellipse omitted: group has %d point(s)", len(pts))
        return None
    centre = pts.mean(axis=0)
    cov = np.cov(pts, rowvar=False)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1]
    vals, vecs = np.clip(vals[order], 0.0, None), vecs[:, order]
    major = vecs[:, 0]
    if major[np.argmax(np.abs(major))] < 0:
        major = -major
    angle = math.degrees(math.atan2(major[1], major[0]))
    return Ellipse((float(centre[0]), float(centre[1])),
                   (float(n_std * math.sqrt(vals[0])), float(n_std * math.sqrt(vals[1]))), angle)


@dataclass
class FeatureProjection:
    fit: PCAFit
    points: np.ndarray  # (n, 2)
    dataset_ids: list[str]
    labels: np.ndarray
    sample_ids: list[str] = field(default_factory=list)
    ellipses: dict[tuple[str, int], Ellipse] = field(default_factory=dict)

    @property
    def basis(self) -> np.ndarray:
        return self.fit.basis

    @property
    def mean(self) -> np.ndarray:
        return self.fit.mean


def project_groups(features: dict[str, np.ndarray], labels: dict[str, np.ndarray], fit_on: list[str]) -> FeatureProjection:
    """Fit PCA on the ``fit_on`` groups, project every group, attach per (group, class) ellipses."""
    fit = pca_fit(np.concatenate([features[k] for k in fit_on]))
    pts, ids, labs, sids = [], [], [], []
    ellipses: dict[tuple[str, int], Ellipse] = {}
    for key, feats in features.items():
        proj = pca_project(fit, feats)
        lab = np.asarray(labels[key]).astype(int)
        pts.append(proj)
        ids.extend([key] * len(proj))
        labs.append(lab)
        sids.extend(f"{key}#{i}" for i in range(len(proj)))
        for cls in (0, 1):
            e = ellipse_2std(proj[lab == cls])
            if e is not None:
                ellipses[(key, cls)] = e
    return FeatureProjection(fit, np.concatenate(pts), ids, np.concatenate(labs), sids, ellipses)


# ----------------------------------------------------------------------------
# saliency

@dataclass(frozen=True)
class SaliencyMap:
    values: np.ndarray  # max-normalised, in [0, 1]
    raw_max: float
    is_zero: bool
    sample_id: str = ""
    model_id: str = ""


def model_scorer(encoder: EncoderParams, head: ClassifierParams) -> Callable[[mg.Tensor], mg.Tensor]:
    """Pre-sigmoid classifier score of a single image tensor."""
    def score(x: mg.Tensor) -> mg.Tensor:
        return mg.total(classifier_score(head, encoder_forward(encoder, x)))
    return score


def input_gradient(score_fn: Callable[[mg.Tensor], mg.Tensor], image: np.ndarray) -> np.ndarray:
    x = mg.Tensor(image, requires_grad=True)
    with mg.Tape() as tape:
        s = score_fn(x)
    if s.size != 1:
        raise ValueError("score function must return a scalar")
    grads = mg.backward(tape, s)
    return grads.get(x, np.zeros_like(x.data))


def saliency(score_fn: Callable[[mg.Tensor], mg.Tensor], image: np.ndarray,
             sample_id: str = "", model_id: str = "") -> SaliencyMap:
    """|d score / d input|, scaled so the maximum is 1."""
    mag = np.abs(input_gradient(score_fn, image))
    peak = float(mag.max()) if mag.size else 0.0
    if peak == 0.0:
        log.warning("saliency map for %s is identically zero", sample_id or "sample")
        return SaliencyMap(np.zeros_like(mag), 0.0, True, sample_id, model_id)
    return SaliencyMap(mag / peak, peak, False, sample_id, model_id)
