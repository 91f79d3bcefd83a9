"""Procedural two-class shape dataset with controlled intensity modes.

Shapes are radial outlines in unit-square coordinates. Benign outlines are
smooth low-frequency blobs; malignant outlines share the same backbone and
add sharp spikes. Each sample is a base outline pushed through a random
affine transform and a cubic B-spline free-form deformation, rasterized
without anti-aliasing and painted with class-conditional intensities.
"""
from __future__ import annotations

import enum
import json
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable

import numpy as np
from shapely.geometry import LinearRing

INTENSITY_GRID = tuple(range(110, 201, 10))
BACKGROUND = 97.8
IMAGE_SIZE = 64
NOISE_SIGMA = 5.0
AREA_BENIGN = 0.30
AREA_MALIGNANT = 7.0 / 30.0
FORMAT_VERSION = 1
MASK_FRACTION_BAND = (0.15, 0.40)


class ShapeClass(enum.IntEnum):
    BENIGN = 0
    MALIGNANT = 1  # positive class


class GenerationError(RuntimeError):
    """Raised when transform sampling cannot satisfy its invariants."""


class Role(str, enum.Enum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"


@dataclass(frozen=True)
class GeometryConfig:
    n_vertices: int = 720
    # radius of the equal-area disk scale, unit-square units
    r0_benign: float = 0.309
    r0_malignant: float = 0.2239
    harmonics: tuple[tuple[int, float, float], ...] = ((2, 0.06, 0.3), (3, 0.04, 1.7), (5, 0.02, 4.1))
    n_spikes: int = 12
    spike_amplitude: float = 0.8
    spike_sharpness: float = 2.0


@dataclass(frozen=True)
class TransformConfig:
    rotation_deg: float = 20.0
    scale_range: tuple[float, float] = (0.9, 1.1)
    shear: float = 0.1
    translation: float = 0.05
    ffd_grid: int = 4
    ffd_cap: float = 0.05
    margin_px: float = 2.0
    max_retries: int = 100


@dataclass(frozen=True)
class DistributionSpec:
    i_mal: float
    i_ben: float
    noise_sigma: float = NOISE_SIGMA
    background: float = BACKGROUND
    image_size: int = IMAGE_SIZE

    def __post_init__(self):
        for name in ("i_mal", "i_ben"):
            if getattr(self, name) not in INTENSITY_GRID:
                raise ValueError(f"{name}={getattr(self, name)} is not on the grid {INTENSITY_GRID}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")

    def intensity(self, cls: ShapeClass) -> float:
        return float(self.i_mal if cls == ShapeClass.MALIGNANT else self.i_ben)

    @property
    def tag(self) -> str:
        return f"{int(self.i_mal)},{int(self.i_ben)}"


@dataclass(frozen=True)
class Outline:
    vertices: np.ndarray  # (n, 2)
    closed: bool = True

    def is_simple(self) -> bool:
        return LinearRing(self.vertices).is_simple

    @property
    def area(self) -> float:
        x, y = self.vertices[:, 0], self.vertices[:, 1]
        return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))

    @property
    def perimeter(self) -> float:
        d = np.diff(np.vstack([self.vertices, self.vertices[:1]]), axis=0)
        return float(np.hypot(d[:, 0], d[:, 1]).sum())

    @property
    def centroid(self) -> np.ndarray:
        return self.vertices.mean(axis=0)


@dataclass(frozen=True)
class TransformSample:
    affine: np.ndarray  # (2, 3)
    ffd: np.ndarray  # (G, G, 2) control displacements, indexed [ix, iy]


@dataclass(frozen=True)
class LabeledImage:
    pixels: np.ndarray  # (S, S) in [0, 1]
    label: ShapeClass
    mask: np.ndarray  # (S, S) bool
    sample_seed: int


@dataclass
class Dataset:
    spec: DistributionSpec
    samples: list[LabeledImage]
    seed: int
    role: Role
    geometry: GeometryConfig = field(default_factory=GeometryConfig)
    transform: TransformConfig = field(default_factory=TransformConfig)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def images(self) -> np.ndarray:
        return np.stack([s.pixels for s in self.samples])

    @property
    def labels(self) -> np.ndarray:
        return np.array([int(s.label) for s in self.samples], dtype=np.int64)

    def subset(self, indices: Iterable[int], role: Role | None = None) -> "Dataset":
        return Dataset(self.spec, [self.samples[i] for i in indices], self.seed,
                       role or self.role, self.geometry, self.transform)


# ----------------------------------------------------------------------------
# outlines

def _radius(phi: np.ndarray, cls: ShapeClass, geo: GeometryConfig) -> np.ndarray:
    r0 = geo.r0_malignant if cls == ShapeClass.MALIGNANT else geo.r0_benign
    backbone = np.ones_like(phi)
    for k, amp, phase in geo.harmonics:
        backbone += amp * np.cos(k * phi + phase)
    r = r0 * backbone
    if cls == ShapeClass.MALIGNANT and geo.spike_amplitude > 0:
        spikes = np.maximum(0.0, np.cos(geo.n_spikes * phi)) ** geo.spike_sharpness
        r = r * (1.0 + geo.spike_amplitude * spikes)
    return r


def base_outline(cls: ShapeClass, geo: GeometryConfig = GeometryConfig()) -> Outline:
    """Canonical-pose outline centred in the unit square."""
    if geo.n_vertices < 64:
        raise ValueError("outlines need at least 64 vertices")
    phi = np.linspace(0.0, 2.0 * math.pi, geo.n_vertices, endpoint=False)
    r = _radius(phi, ShapeClass(cls), geo)
    verts = np.column_stack([0.5 + r * np.cos(phi), 0.5 + r * np.sin(phi)])
    return Outline(verts)


def convexity_ratio(outline: Outline) -> float:
    """Isoperimetric ratio perimeter^2 / (4*pi*area); 1 for a disk."""
    return outline.perimeter ** 2 / (4.0 * math.pi * outline.area)


# ----------------------------------------------------------------------------
# transforms

def bspline3(t: np.ndarray) -> np.ndarray:
    """Centred cubic B-spline kernel, support (-2, 2)."""
    a = np.abs(t)
    out = np.zeros_like(a)
    inner = a < 1
    outer = (a >= 1) & (a < 2)
    out[inner] = 2.0 / 3.0 - a[inner] ** 2 + 0.5 * a[inner] ** 3
    out[outer] = (2.0 - a[outer]) ** 3 / 6.0
    return out


def ffd_displacement(points: np.ndarray, ffd: np.ndarray) -> np.ndarray:
    """Displacement at ``points`` (n, 2) from a G x G control lattice spanning the unit square."""
    g = ffd.shape[0]
    spacing = 1.0 / (g - 1)
    knots = np.arange(g) * spacing
    bx = bspline3((points[:, 0:1] - knots[None, :]) / spacing)  # n, G
    by = bspline3((points[:, 1:2] - knots[None, :]) / spacing)
    return np.einsum("ni,nj,ijd->nd", bx, by, ffd)


def _affine_matrix(theta: float, sx: float, sy: float, shear: float, tx: float, ty: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    rot = np.array([[c, -s], [s, c]])
    lin = rot @ np.array([[1.0, shear], [0.0, 1.0]]) @ np.diag([sx, sy])
    centre = np.array([0.5, 0.5])
    offset = centre - lin @ centre + np.array([tx, ty])
    return np.column_stack([lin, offset])


def sample_transform(rng: np.random.Generator, cfg: TransformConfig = TransformConfig()) -> TransformSample:
    """Draw one affine + FFD sample satisfying the transform invariants."""
    for _ in range(cfg.max_retries):
        theta = math.radians(rng.uniform(-cfg.rotation_deg, cfg.rotation_deg))
        sx, sy = rng.uniform(cfg.scale_range[0], cfg.scale_range[1], size=2)
        sh = rng.uniform(-cfg.shear, cfg.shear)
        tx, ty = rng.uniform(-cfg.translation, cfg.translation, size=2)
        ffd = rng.uniform(-cfg.ffd_cap, cfg.ffd_cap, size=(cfg.ffd_grid, cfg.ffd_grid, 2))
        affine = _affine_matrix(theta, sx, sy, sh, tx, ty)
        if np.linalg.det(affine[:, :2]) > 0 and np.abs(ffd).max() <= cfg.ffd_cap:
            return TransformSample(affine, ffd)
    raise GenerationError("transform ranges too aggressive: retry limit exceeded")


class SelfIntersection(ValueError):
    """The warped outline is no longer a simple polygon."""


def warp(outline: Outline, t: TransformSample, check: bool = True) -> Outline:
    """Apply the affine map, then the FFD displacement field, to every vertex."""
    v = outline.vertices @ t.affine[:, :2].T + t.affine[:, 2]
    v = v + ffd_displacement(v, t.ffd)
    out = Outline(v, outline.closed)
    if check and not out.is_simple():
        raise SelfIntersection("warped outline self-intersects")
    return out


# ----------------------------------------------------------------------------
# rasterization and rendering

def rasterize(outline: Outline, image_size: int = IMAGE_SIZE) -> np.ndarray:
    """Crisp even-odd point-in-polygon test at pixel centres."""
    verts = outline.vertices * image_size
    centres = np.arange(image_size) + 0.5
    x0, y0 = verts[:, 0], verts[:, 1]
    x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
    # rows index y; one scanline per pixel-centre row
    straddle = (y0[None, :] > centres[:, None]) != (y1[None, :] > centres[:, None])
    with np.errstate(divide="ignore", invalid="ignore"):
        xcross = x0 + (centres[:, None] - y0) * (x1 - x0) / (y1 - y0)
    mask = np.zeros((image_size, image_size), dtype=bool)
    for row in range(image_size):
        xs = np.sort(xcross[row, straddle[row]])
        if xs.size:
            # crossings strictly right of each centre; odd count means inside
            right = xs.size - np.searchsorted(xs, centres, side="right")
            mask[row] = right % 2 == 1
    return mask


def render(mask: np.ndarray, spec: DistributionSpec, cls: ShapeClass,
           rng: np.random.Generator, sample_seed: int = 0) -> LabeledImage:
    if not mask.any():
        raise ValueError("render needs a non-empty mask")
    mean = np.where(mask, spec.intensity(cls), spec.background)
    noise = rng.normal(0.0, spec.noise_sigma, size=mask.shape) if spec.noise_sigma > 0 else 0.0
    img = np.clip(mean + noise, 0.0, 255.0) / 255.0
    return LabeledImage(img, ShapeClass(cls), mask.copy(), int(sample_seed))


def sample_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1)[0])


def sample_mask(cls: ShapeClass, rng: np.random.Generator, geo: GeometryConfig = GeometryConfig(),
                tcfg: TransformConfig = TransformConfig(), image_size: int = IMAGE_SIZE) -> np.ndarray:
    """Warp the class base outline until it is simple and inside the margin, then rasterize."""
    base = base_outline(cls, geo)
    lo = tcfg.margin_px / image_size
    hi = 1.0 - lo
    for _ in range(tcfg.max_retries):
        t = sample_transform(rng, tcfg)
        warped = warp(base, t, check=False)
        v = warped.vertices
        if v.min() < lo or v.max() > hi or not warped.is_simple():
            continue
        return rasterize(warped, image_size)
    raise GenerationError("could not place a simple outline inside the image margin")


def generate_sample(spec: DistributionSpec, cls: ShapeClass, seed: int,
                    geo: GeometryConfig = GeometryConfig(),
                    tcfg: TransformConfig = TransformConfig()) -> LabeledImage:
    rng = np.random.default_rng(seed)
    mask = sample_mask(cls, rng, geo, tcfg, spec.image_size)
    return render(mask, spec, cls, rng, seed)


def generate_dataset(spec: DistributionSpec, n: int, seed: int, role: Role | str = Role.TRAIN,
                     geo: GeometryConfig = GeometryConfig(),
                     tcfg: TransformConfig = TransformConfig()) -> Dataset:
    """Class-balanced dataset; sample ``i`` has label ``i % 2`` and seed derived from (seed, i)."""
    if n <= 0 or n % 2:
        raise ValueError(f"dataset size must be a positive even number, got {n}")
    samples = [generate_sample(spec, ShapeClass(i % 2), sample_seed(seed, i), geo, tcfg)
               for i in range(n)]
    return Dataset(spec, samples, int(seed), Role(role), geo, tcfg)


def global_mean(img: LabeledImage | np.ndarray) -> float:
    """Whole-image mean intensity in grayscale units."""
    pixels = img.pixels if isinstance(img, LabeledImage) else np.asarray(img)
    return float(pixels.mean() * 255.0)


def equalizing_pair(a_mal: float, a_ben: float, background: float = BACKGROUND,
                    target_global: float = 117.0) -> tuple[int, int, tuple[float, float]]:
    """Foreground intensities making both classes' whole-image means equal ``target_global``.

    Returns the grid-snapped pair and the exact (unsnapped) solutions.
    """
    for a in (a_mal, a_ben):
        if not 0.0 < a < 1.0:
            raise ValueError(f"area fraction must lie in (0, 1), got {a}")
    exact = tuple((target_global - (1.0 - a) * background) / a for a in (a_mal, a_ben))
    lo, hi = INTENSITY_GRID[0], INTENSITY_GRID[-1]
    snapped = []
    for value in exact:
        if not lo - 5.0 <= value <= hi + 5.0:
            raise ValueError(f"equalizing intensity {value:.2f} lies outside the grid [{lo}, {hi}]")
        snapped.append(min(INTENSITY_GRID, key=lambda g: abs(g - value)))
    return snapped[0], snapped[1], exact


def solve_calibration(mal_means: tuple[float, float], ben_means: tuple[float, float],
                      levels: tuple[tuple[float, float], tuple[float, float]] = ((150, 180), (150, 160))):
    """Area fractions and background from reported whole-image means.

    Each class contributes two observations ``a*i + (1-a)*b = g`` at two foreground
    levels; the fraction follows from their difference, the background is the
    least-squares fit over all four.
    """
    (im1, im2), (ib1, ib2) = levels
    a_mal = (mal_means[1] - mal_means[0]) / (im2 - im1)
    a_ben = (ben_means[1] - ben_means[0]) / (ib2 - ib1)
    rows = [(a_mal, im1, mal_means[0]), (a_mal, im2, mal_means[1]),
            (a_ben, ib1, ben_means[0]), (a_ben, ib2, ben_means[1])]
    # g - a*i = (1-a)*b
    num = sum((1 - a) * (g - a * i) for a, i, g in rows)
    den = sum((1 - a) ** 2 for a, _, _ in rows)
    return a_mal, a_ben, num / den


def mean_mask_fraction(cls: ShapeClass, n: int, seed: int = 0, geo: GeometryConfig = GeometryConfig(),
                       tcfg: TransformConfig = TransformConfig(), image_size: int = IMAGE_SIZE) -> float:
    fracs = [sample_mask(cls, np.random.default_rng(sample_seed(seed, i)), geo, tcfg, image_size).mean()
             for i in range(n)]
    return float(np.mean(fracs))


def calibrate_radii(geo: GeometryConfig = GeometryConfig(), tcfg: TransformConfig = TransformConfig(),
                    targets: tuple[float, float] = (AREA_BENIGN, AREA_MALIGNANT), n: int = 300,
                    seed: int = 11, iterations: int = 4, tol: float = 1e-3) -> GeometryConfig:
    """Rescale each class radius until its mean mask fraction hits the target.

    Area scales with r0 squared, so each pass multiplies r0 by sqrt(target / measured).
    """
    for _ in range(iterations):
        measured = [mean_mask_fraction(c, n, seed, geo, tcfg) for c in (ShapeClass.BENIGN, ShapeClass.MALIGNANT)]
        if all(abs(m - t) < tol for m, t in zip(measured, targets)):
            break
        geo = replace(geo, r0_benign=round(geo.r0_benign * math.sqrt(targets[0] / measured[0]), 4),
                      r0_malignant=round(geo.r0_malignant * math.sqrt(targets[1] / measured[1]), 4))
    return geo


# ----------------------------------------------------------------------------
# export

_MAGIC = b"OODL"


def _config_dict(ds: Dataset) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "spec": asdict(ds.spec),
        "seed": ds.seed,
        "n": len(ds),
        "role": ds.role.value,
        "geometry": asdict(ds.geometry),
        "transform": asdict(ds.transform),
    }


def export_dataset(ds: Dataset, directory, pgm: bool = False) -> Path:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    s = ds.spec.image_size
    chunks = [_MAGIC, struct.pack("<I", len(ds))]
    for smp in ds.samples:
        chunks.append(struct.pack("<IB", smp.sample_seed, int(smp.label)))
        chunks.append(smp.pixels.astype("<f4").tobytes())
        chunks.append(np.packbits(smp.mask.ravel(), bitorder="little").tobytes())
    (out / "samples.bin").write_bytes(b"".join(chunks))
    (out / "manifest.json").write_text(json.dumps(_config_dict(ds), indent=2, sort_keys=True) + "\n")
    if pgm:
        for i, smp in enumerate(ds.samples):
            write_pgm(out / f"sample-{i:04d}-{smp.label.name.lower()}.pgm", smp.pixels)
    assert s * s == ds.samples[0].pixels.size
    return out


def load_dataset(directory) -> Dataset:
    src = Path(directory)
    man = json.loads((src / "manifest.json").read_text())
    if man.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"{src}: unsupported format version {man.get('format_version')}")
    spec = DistributionSpec(**man["spec"])
    geo = man["geometry"]
    geo["harmonics"] = tuple(tuple(h) for h in geo["harmonics"])
    tcfg = man["transform"]
    tcfg["scale_range"] = tuple(tcfg["scale_range"])
    raw = (src / "samples.bin").read_bytes()
    if raw[:4] != _MAGIC:
        raise ValueError(f"{src}: bad samples.bin header")
    (count,) = struct.unpack_from("<I", raw, 4)
    s = spec.image_size
    nbits = (s * s + 7) // 8
    pos = 8
    samples = []
    for _ in range(count):
        seed, label = struct.unpack_from("<IB", raw, pos)
        pos += 5
        pix = np.frombuffer(raw, dtype="<f4", count=s * s, offset=pos).reshape(s, s).astype(np.float64)
        pos += 4 * s * s
        bits = np.frombuffer(raw, dtype=np.uint8, count=nbits, offset=pos)
        pos += nbits
        mask = np.unpackbits(bits, bitorder="little")[: s * s].astype(bool).reshape(s, s)
        samples.append(LabeledImage(pix, ShapeClass(label), mask, seed))
    return Dataset(spec, samples, man["seed"], Role(man["role"]),
                   GeometryConfig(**geo), TransformConfig(**tcfg))


def write_pgm(path, image: np.ndarray, comment: str = "") -> None:
    """Binary 8-bit PGM of an image with values in [0, 1]."""
    img = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    h, w = img.shape
    note = f"# {comment}\n" if comment else ""
    Path(path).write_bytes(f"P5\n{note}{w} {h}\n255\n".encode("ascii") + img.tobytes())


def read_pgm(path) -> tuple[np.ndarray, list[str]]:
    """Inverse of ``write_pgm``: pixels in [0, 1] and any comment lines."""
    raw = Path(path).read_bytes()
    fields, comments, pos = [], [], 0
    while len(fields) < 4:
        end = raw.index(b"\n", pos)
        line = raw[pos:end].decode("ascii")
        pos = end + 1
        if line.startswith("#"):
            comments.append(line[1:].strip())
        else:
            fields.extend(line.split())
    if fields[0] != "P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h = int(fields[1]), int(fields[2])
    img = np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=pos).reshape(h, w)
    return img / 255.0, comments
