"""Deterministic SVG output for PCA scatter plots and saliency grids.

SVG is written by hand (no timestamps, no random ids) so that figure bytes
depend only on the data.
"""
from __future__ import annotations

import base64
import struct
import zlib
from pathlib import Path

import numpy as np

from .analysis import Ellipse, FeatureProjection

# dark hues for the training set, light hues for test sets
_MAL = ("#b2182b", "#f4a582")
_BEN = ("#2166ac", "#92c5de")


def _f(v: float) -> str:
    return f"{v:.2f}"


def png_bytes(image: np.ndarray) -> bytes:
    """8-bit grayscale PNG of an array with values in [0, 1]."""
    img = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    h, w = img.shape
    raw = b"".join(b"\x00" + img[r].tobytes() for r in range(h))

    def chunk(tag: bytes, data: bytes) -> bytes:
        return struct.pack(">I", len(data)) + tag + data + struct.pack(">I", zlib.crc32(tag + data) & 0xFFFFFFFF)

    header = struct.pack(">IIBBBBB", w, h, 8, 0, 0, 0, 0)
    return b"\x89PNG\r\n\x1a\n" + chunk(b"IHDR", header) + chunk(b"IDAT", zlib.compress(raw, 9)) + chunk(b"IEND", b"")


def _svg(width: int, height: int, body: list[str], title: str, config_hash: str) -> str:
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">')
    meta = f'<metadata>config_hash={config_hash}</metadata>'
    return "\n".join([head, meta, f'<title>{title}</title>', '<rect width="100%" height="100%" fill="white"/>',
                      *body, "</svg>", ""])


def _marker(x: float, y: float, cls: int, colour: str) -> str:
    if cls == 1:
        d = 3.0
        return (f'<path d="M{_f(x - d)},{_f(y - d)}L{_f(x + d)},{_f(y + d)}M{_f(x - d)},{_f(y + d)}'
                f'L{_f(x + d)},{_f(y - d)}" stroke="{colour}" stroke-width="1.2"/>')
    return f'<circle cx="{_f(x)}" cy="{_f(y)}" r="3" fill="none" stroke="{colour}" stroke-width="1.2"/>'


def pca_scatter_svg(proj: FeatureProjection, train_id: str, title: str, config_hash: str,
                    size: int = 480, pad: int = 40) -> str:
    pts = proj.points
    ext = [pts]
    for e in proj.ellipses.values():
        r = max(e.semi_axes)
        ext.append(np.array([[e.center[0] - r, e.center[1] - r], [e.center[0] + r, e.center[1] + r]]))
    allp = np.concatenate(ext)
    lo, hi = allp.min(axis=0), allp.max(axis=0)
    span = float(max(hi - lo)) or 1.0
    scale = (size - 2 * pad) / span
    mid = (lo + hi) / 2.0

    def to_px(x: float, y: float) -> tuple[float, float]:
        return size / 2 + (x - mid[0]) * scale, size / 2 - (y - mid[1]) * scale

    body = [f'<text x="{pad}" y="20">{title}</text>',
            f'<rect x="{pad // 2}" y="{pad // 2}" width="{size - pad}" height="{size - pad}" fill="none" stroke="#999"/>']
    groups = list(dict.fromkeys(proj.dataset_ids))
    ids = np.array(proj.dataset_ids)
    for key in groups:
        shade = 0 if key == train_id else 1
        sel = ids == key
        for (x, y), cls in zip(pts[sel], proj.labels[sel]):
            colour = (_MAL if cls == 1 else _BEN)[shade]
            body.append(_marker(*to_px(x, y), int(cls), colour))
    for (key, cls), e in proj.ellipses.items():
        body.append(_ellipse(e, to_px, scale, (_MAL if cls == 1 else _BEN)[0 if key == train_id else 1],
                             dashed=key != train_id))
    y = size + 14
    for i, key in enumerate(groups):
        shade = 0 if key == train_id else 1
        label = key
        x = pad + i * 150
        body.append(_marker(x, y - 4, 1, _MAL[shade]))
        body.append(_marker(x + 10, y - 4, 0, _BEN[shade]))
        body.append(f'<text x="{x + 20}" y="{y}">{label}</text>')
    return _svg(size, size + 24, body, title, config_hash)


def _ellipse(e: Ellipse, to_px, scale: float, colour: str, dashed: bool) -> str:
    cx, cy = to_px(*e.center)
    dash = ' stroke-dasharray="4,3"' if dashed else ""
    return (f'<ellipse cx="{_f(cx)}" cy="{_f(cy)}" rx="{_f(e.semi_axes[0] * scale)}" '
            f'ry="{_f(e.semi_axes[1] * scale)}" transform="rotate({_f(-e.angle_deg)} {_f(cx)} {_f(cy)})" '
            f'fill="none" stroke="{colour}" stroke-width="1.5"{dash}/>')


def saliency_grid_svg(rows: list[tuple[str, list[np.ndarray], list[np.ndarray]]], title: str,
                      config_hash: str, cell: int = 96, gap: int = 6) -> str:
    """One row per dataset; each sample shows the image followed by its saliency map."""
    ncols = max((len(imgs) for _, imgs, _ in rows), default=0)
    label_w = 110
    width = label_w + ncols * (2 * cell + 3 * gap)
    height = 30 + len(rows) * (cell + gap)
    body = [f'<text x="8" y="18">{title}</text>']
    for r, (label, images, maps) in enumerate(rows):
        y = 30 + r * (cell + gap)
        body.append(f'<text x="8" y="{y + cell // 2}">{label}</text>')
        for c, (img, sal) in enumerate(zip(images, maps)):
            x = label_w + c * (2 * cell + 3 * gap)
            for k, arr in enumerate((img, sal)):
                data = base64.b64encode(png_bytes(arr)).decode("ascii")
                body.append(f'<image x="{x + k * (cell + gap)}" y="{y}" width="{cell}" height="{cell}" '
                            f'style="image-rendering:pixelated" href="data:image/png;base64,{data}"/>')
    return _svg(width, height, body, title, config_hash)


def write_text(path, text: str) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(text)
    return p
