"""Synthetic images, free-form masks, Netpbm I/O and the on-disk dataset layout.

Images are float arrays (C, H, W) in [-1, 1]; masks are (H, W) with
1 = known and 0 = hole.
"""

from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .numerics import derive_seed, make_rng


class DataError(ValueError):
    """Malformed or unsupported input files, or unsatisfiable generator specs."""


class ImageKind(str, Enum):
    LINEAR_GRADIENT = "linear-gradient"
    CHECKERBOARD = "checkerboard"
    GAUSSIAN_BLOBS = "gaussian-blobs"


@dataclass(frozen=True)
class SyntheticSpec:
    kind: ImageKind = ImageKind.LINEAR_GRADIENT
    height: int = 32
    width: int = 32
    channels: int = 1
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", ImageKind(self.kind))


# --------------------------------------------------------------------------
# synthetic images


def linear_gradient(h: int, w: int, angle: float, lo: float, hi: float) -> np.ndarray:
    """Affine ramp along ``angle`` spanning exactly [lo, hi] over the frame."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    r = math.cos(angle) * xx + math.sin(angle) * yy
    span = r.max() - r.min()
    r = (r - r.min()) / span if span > 0 else np.zeros_like(r)
    return lo + (hi - lo) * r


def checkerboard(h: int, w: int, period: int, phase_y: int = 0, phase_x: int = 0, amplitude: float = 1.0) -> np.ndarray:
    """+-amplitude squares; the sign flips every ``period`` pixels on each axis."""
    yy, xx = np.mgrid[0:h, 0:w]
    parity = ((yy + phase_y) // period + (xx + phase_x) // period) % 2
    return amplitude * np.where(parity == 0, 1.0, -1.0)


def gaussian_blobs(h: int, w: int, centers, sigmas, amplitudes) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    out = np.zeros((h, w))
    for (cy, cx), s, a in zip(centers, sigmas, amplitudes):
        out += a * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * s * s))
    peak = np.abs(out).max()
    return out / peak if peak > 0 else out


def gen_image(spec: SyntheticSpec, rng: np.random.Generator | None = None) -> np.ndarray:
    """Draw one (C, H, W) image; ``rng`` defaults to one seeded from ``spec.seed``."""
    rng = rng if rng is not None else make_rng(spec.seed, "image")
    h, w, c = spec.height, spec.width, spec.channels
    if spec.kind is ImageKind.LINEAR_GRADIENT:
        angle = rng.uniform(0.0, 2.0 * math.pi)
        chans = []
        for _ in range(c):
            lo, hi = rng.uniform(-1.0, 1.0, size=2)
            chans.append(linear_gradient(h, w, angle, lo, hi))
        img = np.stack(chans)
    elif spec.kind is ImageKind.CHECKERBOARD:
        period = int(rng.integers(4, 17))
        py, px = (int(v) for v in rng.integers(0, 2 * period, size=2))
        amps = rng.uniform(0.5, 1.0, size=c) * rng.choice([-1.0, 1.0], size=c)
        base = checkerboard(h, w, period, py, px)
        img = np.stack([a * base for a in amps])
    else:
        k = int(rng.integers(1, 6))
        centers = rng.uniform([0, 0], [h, w], size=(k, 2))
        sigmas = rng.uniform(2.0, 8.0, size=k)
        chans = []
        for _ in range(c):
            amps = rng.uniform(0.5, 1.0, size=k) * rng.choice([-1.0, 1.0], size=k)
            chans.append(gaussian_blobs(h, w, centers, sigmas, amps))
        img = np.stack(chans)
    return np.clip(img, -1.0, 1.0)


# --------------------------------------------------------------------------
# free-form masks


@dataclass(frozen=True)
class MaskSpec:
    rect_count: tuple[int, int] = (0, 2)
    rect_size: tuple[float, float] = (0.2, 0.6)
    stroke_count: tuple[int, int] = (1, 4)
    stroke_width: tuple[int, int] = (2, 6)
    stroke_vertices: tuple[int, int] = (3, 8)
    stroke_step: tuple[float, float] = (0.15, 0.35)
    hole_ratio: tuple[float, float] = (0.2, 0.8)
    max_attempts: int = 100


class MaskGenerationError(DataError):
    pass


def _stamp_capsule(hole: np.ndarray, y0: float, x0: float, y1: float, x1: float, radius: float) -> None:
    """Union of discs of ``radius`` centred on every point of the segment."""
    h, w = hole.shape
    yy = np.arange(h)[:, None] + 0.5
    xx = np.arange(w)[None, :] + 0.5
    dy, dx = y1 - y0, x1 - x0
    length2 = dy * dy + dx * dx
    if length2 > 0:
        t = np.clip(((yy - y0) * dy + (xx - x0) * dx) / length2, 0.0, 1.0)
    else:
        t = 0.0
    hole |= (yy - y0 - t * dy) ** 2 + (xx - x0 - t * dx) ** 2 <= radius * radius


def _draw_stroke(hole: np.ndarray, spec: MaskSpec, rng: np.random.Generator) -> None:
    """Random walk with turns of at most 45 degrees, thickened by a swept disc."""
    h, w = hole.shape
    radius = max(0.5, rng.integers(spec.stroke_width[0], spec.stroke_width[1] + 1) / 2.0)
    y, x = rng.uniform(0, h), rng.uniform(0, w)
    angle = rng.uniform(0.0, 2.0 * math.pi)
    _stamp_capsule(hole, y, x, y, x, radius)
    for _ in range(int(rng.integers(spec.stroke_vertices[0], spec.stroke_vertices[1] + 1))):
        angle += rng.uniform(-math.pi / 4, math.pi / 4)
        length = rng.uniform(*spec.stroke_step) * max(h, w)
        ny = float(np.clip(y + length * math.sin(angle), 0, h - 1e-6))
        nx = float(np.clip(x + length * math.cos(angle), 0, w - 1e-6))
        _stamp_capsule(hole, y, x, ny, nx, radius)
        y, x = ny, nx


def _draw_rect(hole: np.ndarray, spec: MaskSpec, rng: np.random.Generator) -> None:
    h, w = hole.shape
    rh = max(1, int(round(rng.uniform(*spec.rect_size) * h)))
    rw = max(1, int(round(rng.uniform(*spec.rect_size) * w)))
    y0 = int(rng.integers(0, h - rh + 1))
    x0 = int(rng.integers(0, w - rw + 1))
    hole[y0 : y0 + rh, x0 : x0 + rw] = True


def gen_mask(spec: MaskSpec, height: int, width: int, rng: np.random.Generator) -> np.ndarray:
    """Rectangles plus random-walk brush strokes as holes, rejection-sampled on hole ratio."""
    lo, hi = spec.hole_ratio
    for _ in range(spec.max_attempts):
        hole = np.zeros((height, width), dtype=bool)
        for _ in range(int(rng.integers(spec.rect_count[0], spec.rect_count[1] + 1))):
            _draw_rect(hole, spec, rng)
        for _ in range(int(rng.integers(spec.stroke_count[0], spec.stroke_count[1] + 1))):
            _draw_stroke(hole, spec, rng)
        ratio = hole.mean()
        if lo <= ratio <= hi:
            return (~hole).astype(np.float64)
    raise MaskGenerationError(f"hole ratio in [{lo}, {hi}] not reached in {spec.max_attempts} attempts for {spec}")


# --------------------------------------------------------------------------
# Netpbm I/O


def to_bytes(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint((np.asarray(img, dtype=np.float64) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def from_bytes(raw: np.ndarray) -> np.ndarray:
    return raw.astype(np.float64) / 127.5 - 1.0


_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def _parse_netpbm(blob: bytes, path) -> tuple[str, int, int, bytes]:
    pos = 0
    tokens = []
    for _ in range(4):
        m = _TOKEN.match(blob, pos)
        if not m:
            raise DataError(f"{path}: malformed Netpbm header")
        tokens.append(m.group(1))
        pos = m.end()
    magic = tokens[0].decode("ascii", "replace")
    if magic not in ("P5", "P6"):
        raise DataError(f"{path}: unsupported format {magic!r} (need binary P5/P6)")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise DataError(f"{path}: malformed Netpbm header") from None
    if maxval != 255:
        raise DataError(f"{path}: unsupported bit depth (maxval {maxval}, need 255)")
    if width <= 0 or height <= 0:
        raise DataError(f"{path}: bad dimensions {width}x{height}")
    return magic, width, height, blob[pos + 1 :]


def read_image(path) -> np.ndarray:
    """Read 8-bit PGM (P5) or PPM (P6) as (C, H, W) floats in [-1, 1]."""
    path = Path(path)
    blob = path.read_bytes()
    magic, width, height, body = _parse_netpbm(blob, path)
    c = 1 if magic == "P5" else 3
    need = width * height * c
    if len(body) < need:
        raise DataError(f"{path}: truncated pixel data ({len(body)} of {need} bytes)")
    raw = np.frombuffer(body[:need], dtype=np.uint8).reshape(height, width, c)
    return from_bytes(raw.transpose(2, 0, 1))


def write_image(img: np.ndarray, path) -> None:
    """Write (C, H, W) or (H, W) floats; .pgm needs 1 channel, .ppm 3."""
    path = Path(path)
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = img[None]
    c, h, w = img.shape
    suffix = path.suffix.lower()
    if suffix == ".pgm" and c == 1:
        magic = b"P5"
    elif suffix == ".ppm" and c == 3:
        magic = b"P6"
    else:
        raise DataError(f"{path}: cannot write {c}-channel image as {suffix or 'no extension'}")
    body = to_bytes(img).transpose(1, 2, 0).tobytes()
    path.write_bytes(magic + f"\n{w} {h}\n255\n".encode("ascii") + body)


def read_mask(path) -> np.ndarray:
    img = read_image(path)
    if img.shape[0] != 1:
        raise DataError(f"{path}: mask must be single-channel")
    return (img[0] > 0.0).astype(np.float64)


def write_mask(mask: np.ndarray, path) -> None:
    write_image(np.where(np.asarray(mask) > 0.5, 1.0, -1.0)[None], path)


# --------------------------------------------------------------------------
# dataset directories


MANIFEST_FIELDS = ("index", "seed", "kind", "hole_ratio")


def image_suffix(channels: int) -> str:
    return ".pgm" if channels == 1 else ".ppm"


def synth_items(kinds, count: int, size: tuple[int, int], channels: int, mask_spec: MaskSpec, seed: int):
    """Yield ``(index, item_seed, kind, image, mask)``; kinds cycle by index."""
    kinds = [ImageKind(k) for k in kinds]
    for i in range(count):
        s = derive_seed(seed, "item", i)
        kind = kinds[i % len(kinds)]
        img = gen_image(SyntheticSpec(kind, size[0], size[1], channels, s))
        mask = gen_mask(mask_spec, size[0], size[1], make_rng(s, "mask"))
        yield i, s, kind, img, mask


def synth_arrays(kinds, count: int, size: tuple[int, int], channels: int, mask_spec: MaskSpec,
                 seed: int, quantize: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """In-memory twin of :func:`write_dataset` followed by :func:`load_dataset`."""
    images, masks = [], []
    for _, _, _, img, mask in synth_items(kinds, count, size, channels, mask_spec, seed):
        images.append(from_bytes(to_bytes(img)) if quantize else img)
        masks.append(mask[None])
    if not images:
        return np.zeros((0, channels) + tuple(size)), np.zeros((0, 1) + tuple(size))
    return np.stack(images), np.stack(masks)


def write_dataset(out_dir, kinds, count: int, size: tuple[int, int], channels: int,
                  mask_spec: MaskSpec, seed: int) -> list[dict]:
    """Generate ``count`` image/mask pairs under ``out_dir`` plus ``manifest.csv``."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    rows = []
    for i, s, kind, img, mask in synth_items(kinds, count, size, channels, mask_spec, seed):
        write_image(img, out / "images" / f"{i:05d}{image_suffix(channels)}")
        write_mask(mask, out / "masks" / f"{i:05d}.pgm")
        rows.append({"index": i, "seed": s, "kind": kind.value, "hole_ratio": f"{1.0 - mask.mean():.6f}"})
    with open(out / "manifest.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=MANIFEST_FIELDS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    return rows


def load_dataset(data_dir) -> tuple[np.ndarray, np.ndarray, list[dict]]:
    """Returns images (N, C, H, W), masks (N, 1, H, W) and manifest rows."""
    root = Path(data_dir)
    manifest = root / "manifest.csv"
    if not manifest.exists():
        raise DataError(f"{root}: missing manifest.csv")
    with open(manifest, newline="") as fh:
        rows = list(csv.DictReader(fh))
    images, masks = [], []
    for row in rows:
        idx = int(row["index"])
        candidates = [root / "images" / f"{idx:05d}{sfx}" for sfx in (".pgm", ".ppm")]
        img_path = next((p for p in candidates if p.exists()), None)
        if img_path is None:
            raise DataError(f"{root}: image {idx:05d} missing")
        images.append(read_image(img_path))
        masks.append(read_mask(root / "masks" / f"{idx:05d}.pgm")[None])
    if not rows:
        return np.zeros((0, 1, 0, 0)), np.zeros((0, 1, 0, 0)), rows
    return np.stack(images), np.stack(masks), rows
