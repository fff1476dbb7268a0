"""Portable dataset format, synthetic generator, fold splitting, resizing.

On-disk layout: ``root/manifest.json`` plus ``root/images/<id>.pgm`` (binary
P5, maxval 255).  Box coordinates use x rightward, y downward, origin at the
top-left, with x1/y1 exclusive.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    DuplicateLabelError,
    InsufficientDataError,
    MalformedImageError,
    ManifestFormatError,
    MissingFileError,
    OutOfBoundsBoxError,
    ParameterError,
    UnsupportedClassCountError,
)


@dataclass(frozen=True)
class BoundingBox:
    label: int
    x0: int
    y0: int
    x1: int
    y1: int

    def validate(self, h: int, w: int, image_id: str = "?") -> None:
        if not (0 <= self.x0 < self.x1 <= w and 0 <= self.y0 < self.y1 <= h):
            raise OutOfBoundsBoxError(
                f"image {image_id}: box {self} outside {w}x{h} bounds")


@dataclass
class AnnotatedImage:
    id: str
    pixels: np.ndarray  # (H, W) float64 in [0, 1]
    boxes: list[BoundingBox] = field(default_factory=list)

    def validate(self, num_classes: int) -> None:
        h, w = self.pixels.shape
        seen = set()
        for b in self.boxes:
            b.validate(h, w, self.id)
            if b.label < 0 or b.label >= num_classes:
                raise ManifestFormatError(
                    f"image {self.id}: label {b.label} out of range [0, {num_classes})")
            if b.label in seen:
                raise DuplicateLabelError(
                    f"image {self.id}: duplicate box label {b.label}")
            seen.add(b.label)


@dataclass
class DatasetManifest:
    num_classes: int
    class_names: list[str]
    image_size: tuple[int, int]  # (H, W)
    samples: list[AnnotatedImage] = field(default_factory=list)

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ManifestFormatError(f"num_classes must be >= 2, got {self.num_classes}")
        if len(self.class_names) != self.num_classes:
            raise ManifestFormatError("class_names length != num_classes")
        h, w = self.image_size
        for s in self.samples:
            if s.pixels.shape != (h, w):
                raise ManifestFormatError(
                    f"image {s.id}: shape {s.pixels.shape} != manifest size {(h, w)}")
            s.validate(self.num_classes)


# PGM I/O ----------------------------------------------------------------

def write_pgm(path: Path, pixels: np.ndarray) -> None:
    """Quantize [0,1] floats to 8 bits and write binary P5."""
    q = np.clip(np.rint(pixels * 255.0), 0, 255).astype(np.uint8)
    h, w = q.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(q.tobytes())


def read_pgm(path: Path) -> np.ndarray:
    try:
        raw = Path(path).read_bytes()
    except FileNotFoundError as exc:
        raise MissingFileError(f"image file missing: {path}") from exc
    # header: magic, width, height, maxval as whitespace-separated tokens,
    # '#' comments allowed
    tokens = []
    i = 0
    while len(tokens) < 4:
        if i >= len(raw):
            raise MalformedImageError(f"{path}: truncated PGM header")
        ch = raw[i:i + 1]
        if ch == b"#":
            while i < len(raw) and raw[i:i + 1] != b"\n":
                i += 1
        elif ch.isspace():
            i += 1
        else:
            j = i
            while j < len(raw) and not raw[j:j + 1].isspace():
                j += 1
            tokens.append(raw[i:j])
            i = j
    i += 1  # single whitespace after maxval
    if tokens[0] != b"P5":
        raise MalformedImageError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    try:
        w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    except ValueError as exc:
        raise MalformedImageError(f"{path}: bad PGM header") from exc
    if maxval != 255:
        raise MalformedImageError(f"{path}: unsupported maxval {maxval}")
    data = raw[i:i + w * h]
    if len(data) != w * h:
        raise MalformedImageError(f"{path}: expected {w * h} pixel bytes, got {len(data)}")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w).astype(np.float64) / 255.0


# Manifest I/O -----------------------------------------------------------

def save_dataset(manifest: DatasetManifest, root) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    entries = []
    for s in manifest.samples:
        write_pgm(root / "images" / f"{s.id}.pgm", s.pixels)
        entries.append({
            "id": s.id,
            "image": f"images/{s.id}.pgm",
            "boxes": [{"label": b.label, "x0": b.x0, "y0": b.y0,
                       "x1": b.x1, "y1": b.y1} for b in s.boxes],
        })
    doc = {
        "num_classes": manifest.num_classes,
        "class_names": list(manifest.class_names),
        "image_size": [int(manifest.image_size[0]), int(manifest.image_size[1])],
        "samples": entries,
    }
    with open(root / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def load_dataset(root) -> DatasetManifest:
    root = Path(root)
    mpath = root / "manifest.json"
    if not mpath.is_file():
        raise MissingFileError(f"manifest missing: {mpath}")
    try:
        doc = json.loads(mpath.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ManifestFormatError(f"{mpath}: invalid JSON ({exc})") from exc
    for key in ("num_classes", "class_names", "image_size", "samples"):
        if key not in doc:
            raise ManifestFormatError(f"{mpath}: missing field {key!r}")
    samples = []
    for entry in doc["samples"]:
        pixels = read_pgm(root / entry["image"])
        boxes = [BoundingBox(int(b["label"]), int(b["x0"]), int(b["y0"]),
                             int(b["x1"]), int(b["y1"])) for b in entry["boxes"]]
        samples.append(AnnotatedImage(id=str(entry["id"]), pixels=pixels, boxes=boxes))
    manifest = DatasetManifest(
        num_classes=int(doc["num_classes"]),
        class_names=[str(n) for n in doc["class_names"]],
        image_size=(int(doc["image_size"][0]), int(doc["image_size"][1])),
        samples=samples,
    )
    manifest.validate()
    return manifest


# Synthetic generator ----------------------------------------------------

SHAPE_NAMES = ("rectangle", "ellipse", "cross", "ring",
               "triangle", "bar", "l_shape", "dot_grid")

# home positions as (fy, fx) fractions of the image
_HOME = ((0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75),
         (0.25, 0.50), (0.75, 0.50), (0.50, 0.25), (0.50, 0.75))


def _shape_mask(kind: int, h: int, w: int, cy: float, cx: float, a: float) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy = yy - cy
    dx = xx - cx
    if kind == 0:  # rectangle (tall)
        return (np.abs(dy) <= a) & (np.abs(dx) <= 0.6 * a)
    if kind == 1:  # ellipse (wide)
        return (dy / (0.7 * a)) ** 2 + (dx / a) ** 2 <= 1.0
    if kind == 2:  # cross
        return ((np.abs(dy) <= 0.3 * a) & (np.abs(dx) <= a)) | \
               ((np.abs(dx) <= 0.3 * a) & (np.abs(dy) <= a))
    if kind == 3:  # ring
        r = np.sqrt(dy * dy + dx * dx)
        return (r <= a) & (r >= 0.55 * a)
    if kind == 4:  # triangle pointing up
        return (dy >= -a) & (dy <= a) & (np.abs(dx) <= 0.5 * (dy + a))
    if kind == 5:  # thin horizontal bar
        return (np.abs(dy) <= 0.25 * a) & (np.abs(dx) <= a)
    if kind == 6:  # L-shape
        return ((dx >= -a) & (dx <= -0.4 * a) & (np.abs(dy) <= a)) | \
               ((dy >= 0.4 * a) & (dy <= a) & (np.abs(dx) <= a))
    if kind == 7:  # 3x3 dot grid
        mask = np.zeros((h, w), dtype=bool)
        for gy in (-1, 0, 1):
            for gx in (-1, 0, 1):
                d2 = (yy - (cy + gy * 0.7 * a)) ** 2 + (xx - (cx + gx * 0.7 * a)) ** 2
                mask |= d2 <= (0.22 * a) ** 2
        return mask
    raise UnsupportedClassCountError(f"no shape archetype for class {kind}")


def gen_synthetic(rng: np.random.Generator, n: int, c: int,
                  image_size: tuple[int, int]) -> DatasetManifest:
    """Deterministic synthetic images: one class-specific shape per anatomy."""
    h, w = image_size
    if c > len(SHAPE_NAMES):
        raise UnsupportedClassCountError(
            f"at most {len(SHAPE_NAMES)} shape archetypes available, requested {c}")
    if c < 2:
        raise ParameterError(f"need at least 2 classes, got {c}")
    if h < 32 or w < 32:
        raise ParameterError(f"image size must be at least 32x32, got {h}x{w}")
    base_a = 0.11 * min(h, w)
    samples = []
    for i in range(n):
        canvas = np.zeros((h, w), dtype=np.float64)
        boxes = []
        for k in range(c):
            fy, fx = _HOME[k]
            cy = fy * h + rng.uniform(-0.10, 0.10) * h
            cx = fx * w + rng.uniform(-0.10, 0.10) * w
            a = base_a * rng.uniform(0.85, 1.15)
            intensity = 0.40 + 0.08 * k + rng.uniform(-0.03, 0.03)
            mask = _shape_mask(k, h, w, cy, cx, a)
            canvas = np.where(mask, np.maximum(canvas, intensity), canvas)
            ys, xs = np.nonzero(mask)
            boxes.append(BoundingBox(label=k,
                                     x0=int(xs.min()), y0=int(ys.min()),
                                     x1=int(xs.max()) + 1, y1=int(ys.max()) + 1))
        canvas = np.clip(canvas + rng.normal(0.0, 0.05, size=(h, w)), 0.0, 1.0)
        samples.append(AnnotatedImage(id=f"synth{i:05d}", pixels=canvas, boxes=boxes))
    manifest = DatasetManifest(
        num_classes=c,
        class_names=list(SHAPE_NAMES[:c]),
        image_size=(h, w),
        samples=samples,
    )
    manifest.validate()
    return manifest


# Fold splitting ---------------------------------------------------------

def split_folds(manifest: DatasetManifest, folds: int,
                rng: np.random.Generator) -> list[tuple[list[int], list[int]]]:
    n = len(manifest.samples)
    if folds < 2:
        raise ParameterError(f"folds must be >= 2, got {folds}")
    if n < folds:
        raise InsufficientDataError(f"{n} samples cannot be split into {folds} folds")
    perm = [int(i) for i in rng.permutation(n)]
    sizes = [n // folds + (1 if f < n % folds else 0) for f in range(folds)]
    out = []
    start = 0
    for size in sizes:
        test = sorted(perm[start:start + size])
        train = sorted(perm[:start] + perm[start + size:])
        out.append((train, test))
        start += size
    return out


# Resizing ---------------------------------------------------------------

def _bilinear(pixels: np.ndarray, th: int, tw: int) -> np.ndarray:
    h, w = pixels.shape
    sy = h / th
    sx = w / tw
    ys = (np.arange(th) + 0.5) * sy - 0.5
    xs = (np.arange(tw) + 0.5) * sx - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.clip(y0 + 1, 0, h - 1)
    x1 = np.clip(x0 + 1, 0, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[:, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, :]
    tl = pixels[np.ix_(y0, x0)]
    tr = pixels[np.ix_(y0, x1)]
    bl = pixels[np.ix_(y1, x0)]
    br = pixels[np.ix_(y1, x1)]
    top = tl * (1 - wx) + tr * wx
    bot = bl * (1 - wx) + br * wx
    return top * (1 - wy) + bot * wy


def resize(image: AnnotatedImage, target: tuple[int, int]) -> AnnotatedImage:
    """Bilinear resample; boxes scale with outward rounding, clamped to bounds."""
    th, tw = target
    if th < 8 or tw < 8:
        raise ParameterError(f"target size must be at least 8x8, got {th}x{tw}")
    h, w = image.pixels.shape
    if (th, tw) == (h, w):
        return AnnotatedImage(id=image.id, pixels=image.pixels.copy(),
                              boxes=list(image.boxes))
    sy = th / h
    sx = tw / w
    boxes = []
    for b in image.boxes:
        x0 = max(0, int(math.floor(b.x0 * sx)))
        y0 = max(0, int(math.floor(b.y0 * sy)))
        x1 = min(tw, int(math.ceil(b.x1 * sx)))
        y1 = min(th, int(math.ceil(b.y1 * sy)))
        if x1 <= x0:
            x1 = min(tw, x0 + 1)
        if y1 <= y0:
            y1 = min(th, y0 + 1)
        boxes.append(BoundingBox(b.label, x0, y0, x1, y1))
    return AnnotatedImage(id=image.id, pixels=_bilinear(image.pixels, th, tw),
                          boxes=boxes)
