"""Synthetic datasets, PPM image I/O, letterboxing, annotation documents.

Images are binary PPM (P6, maxval 255) so fixtures stay dependency-free
and bit-exact; a dataset is a directory with an `annotations.txt`
document and an `images/` folder. Generation is a pure function of the
seed.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import Detection

__all__ = [
    "AnnotatedImage",
    "gen_synthetic",
    "letterbox",
    "letterbox_box",
    "load_annotations",
    "load_dataset_arrays",
    "load_detections",
    "load_ppm",
    "save_annotations",
    "save_detections",
    "save_ppm",
    "unletterbox_box",
]

_DOC_VERSION = 1
_PAD_VALUE = 114.0 / 255.0

# Shape palette: class id = shape kind.
_SHAPE_NAMES = ("circle", "square", "triangle", "diamond", "cross")
_BASE_COLORS = np.array([
    (220, 60, 60),
    (60, 200, 60),
    (70, 90, 220),
    (220, 200, 60),
    (200, 70, 200),
], dtype=np.int64)


@dataclass
class AnnotatedImage:
    path: str                       # relative to the dataset root
    height: int
    width: int
    boxes: list                     # [(class_id, (x1, y1, x2, y2)), ...]


# ---- PPM --------------------------------------------------------------------

def save_ppm(image, path) -> None:
    """Write a [3, H, W] float tensor in [0, 1] as binary P6."""
    arr = np.asarray(image.data if hasattr(image, "data") else image)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ValueError(f"save_ppm: expected [3, H, W], got {arr.shape}")
    pixels = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    h, w = arr.shape[1:]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.transpose(1, 2, 0).tobytes())


def load_ppm(path) -> np.ndarray:
    """Read binary P6 into a [3, H, W] float32 array scaled to [0, 1]."""
    raw = Path(path).read_bytes()
    if raw[:2] != b"P6":
        raise ValueError(f"load_ppm: {path}: bad magic {raw[:2]!r}")
    # Header: magic, width, height, maxval; '#' comments and whitespace allowed.
    tokens, pos = [], 2
    while len(tokens) < 3:
        if pos >= len(raw):
            raise ValueError(f"load_ppm: {path}: truncated header")
        ch = raw[pos:pos + 1]
        if ch == b"#":
            pos = raw.index(b"\n", pos) + 1
        elif ch.isspace():
            pos += 1
        else:
            end = pos
            while end < len(raw) and not raw[end:end + 1].isspace():
                end += 1
            tokens.append(raw[pos:end])
            pos = end
    w, h, maxval = (int(t) for t in tokens)
    if maxval != 255:
        raise ValueError(f"load_ppm: {path}: unsupported maxval {maxval}")
    pos += 1  # single whitespace byte after maxval
    if len(raw) - pos < h * w * 3:
        raise ValueError(f"load_ppm: {path}: truncated pixel data")
    data = np.frombuffer(raw, dtype=np.uint8, count=h * w * 3, offset=pos)
    return (data.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float32) / 255.0)


# ---- letterbox ----------------------------------------------------------------

def letterbox(image: np.ndarray, target: int):
    """Aspect-preserving nearest resize plus gray padding to target x target.

    Returns (padded [3, target, target], scale, (off_x, off_y)); boxes map
    forward as x' = x * scale + off_x.
    """
    _, h, w = image.shape
    scale = min(target / h, target / w)
    nh, nw = int(round(h * scale)), int(round(w * scale))
    rows = np.minimum(((np.arange(nh) + 0.5) / scale).astype(int), h - 1)
    cols = np.minimum(((np.arange(nw) + 0.5) / scale).astype(int), w - 1)
    resized = image[:, rows][:, :, cols]
    off_y, off_x = (target - nh) // 2, (target - nw) // 2
    canvas = np.full((3, target, target), _PAD_VALUE, dtype=image.dtype)
    canvas[:, off_y:off_y + nh, off_x:off_x + nw] = resized
    return canvas, scale, (off_x, off_y)


def letterbox_box(box, scale, offsets):
    ox, oy = offsets
    return (box[0] * scale + ox, box[1] * scale + oy,
            box[2] * scale + ox, box[3] * scale + oy)


def unletterbox_box(box, scale, offsets):
    ox, oy = offsets
    return ((box[0] - ox) / scale, (box[1] - oy) / scale,
            (box[2] - ox) / scale, (box[3] - oy) / scale)


# ---- synthetic shapes ----------------------------------------------------------

def _draw_shape(canvas, kind, cx, cy, half, color):
    size = canvas.shape[0]
    ys, xs = np.mgrid[0:size, 0:size]
    px = xs + 0.5
    py = ys + 0.5
    dx = px - cx
    dy = py - cy
    if kind == 0:        # circle
        mask = dx * dx + dy * dy <= half * half
    elif kind == 1:      # square
        mask = (np.abs(dx) <= half) & (np.abs(dy) <= half)
    elif kind == 2:      # triangle, apex up
        inside = dy >= -half
        inside &= dy <= half
        # edges from apex (cx, cy-half) to the base corners
        inside &= (dy + half) >= 2.0 * dx
        inside &= (dy + half) >= -2.0 * dx
        mask = inside
    elif kind == 3:      # diamond
        mask = np.abs(dx) + np.abs(dy) <= half
    else:                # cross
        arm = half / 3.0
        mask = ((np.abs(dx) <= arm) & (np.abs(dy) <= half)) | \
               ((np.abs(dy) <= arm) & (np.abs(dx) <= half))
    canvas[mask] = color
    return (cx - half, cy - half, cx + half, cy + half)


def gen_synthetic(n_images: int, image_size: int, n_classes: int, seed: int,
                  out_dir) -> list[AnnotatedImage]:
    """Generate a deterministic shapes-on-noise dataset and write it to disk."""
    if not 1 <= n_classes <= len(_SHAPE_NAMES):
        raise ValueError(f"n_classes must be in [1, {len(_SHAPE_NAMES)}], got {n_classes}")
    root = Path(out_dir)
    (root / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    annotated: list[AnnotatedImage] = []
    for i in range(n_images):
        canvas = rng.integers(60, 196, (image_size, image_size, 3)).astype(np.int64)
        boxes = []
        for _ in range(int(rng.integers(1, 6))):
            cls = int(rng.integers(0, n_classes))
            half = float(rng.uniform(0.05, 0.2) * image_size)
            margin = half + 1.0
            cx = float(rng.uniform(margin, image_size - margin))
            cy = float(rng.uniform(margin, image_size - margin))
            color = np.clip(_BASE_COLORS[cls] + rng.integers(-25, 26, 3), 0, 255)
            box = _draw_shape(canvas, cls, cx, cy, half, color)
            boxes.append((cls, box))
        rel = f"images/img_{i:05d}.ppm"
        save_ppm(canvas.transpose(2, 0, 1).astype(np.float32) / 255.0, root / rel)
        annotated.append(AnnotatedImage(rel, image_size, image_size, boxes))
    save_annotations(annotated, root / "annotations.txt")
    return annotated


# ---- documents ------------------------------------------------------------------

def save_annotations(annotated: list[AnnotatedImage], path) -> None:
    lines = [f"version {_DOC_VERSION}", f"count {len(annotated)}"]
    for ann in annotated:
        lines.append(f"image {ann.path} {ann.height} {ann.width} {len(ann.boxes)}")
        for cls, (x1, y1, x2, y2) in ann.boxes:
            lines.append(f"box {cls} {x1!r} {y1!r} {x2!r} {y2!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_annotations(path) -> list[AnnotatedImage]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != f"version {_DOC_VERSION}":
        raise ValueError(f"{path}: not a version-{_DOC_VERSION} annotations document")
    out: list[AnnotatedImage] = []
    i = 2
    while i < len(lines):
        kind, rest = lines[i].split(" ", 1)
        if kind != "image":
            raise ValueError(f"{path}: expected image line, got {lines[i]!r}")
        rel, h, w, nbox = rest.rsplit(" ", 3)
        ann = AnnotatedImage(rel, int(h), int(w), [])
        for j in range(int(nbox)):
            parts = lines[i + 1 + j].split()
            ann.boxes.append((int(parts[1]), tuple(float(v) for v in parts[2:6])))
        out.append(ann)
        i += 1 + int(nbox)
    return out


def load_dataset_arrays(root) -> list[tuple[np.ndarray, list]]:
    """Load (image array, boxes) pairs for every annotated image."""
    root = Path(root)
    annotated = load_annotations(root / "annotations.txt")
    return [(load_ppm(root / ann.path), ann.boxes) for ann in annotated]


def save_detections(per_image: dict[str, list], path) -> None:
    """Write decoded detections, keyed by image path."""
    lines = [f"version {_DOC_VERSION}", f"count {len(per_image)}"]
    for image_path, dets in per_image.items():
        lines.append(f"image {image_path} {len(dets)}")
        for d in dets:
            x1, y1, x2, y2 = d.box
            lines.append(f"det {d.class_id} {d.score!r} {x1!r} {y1!r} {x2!r} {y2!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_detections(path) -> dict[str, list]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != f"version {_DOC_VERSION}":
        raise ValueError(f"{path}: not a version-{_DOC_VERSION} detections document")
    out: dict[str, list] = {}
    i = 2
    while i < len(lines):
        kind, rest = lines[i].split(" ", 1)
        if kind != "image":
            raise ValueError(f"{path}: expected image line, got {lines[i]!r}")
        image_path, count = rest.rsplit(" ", 1)
        dets = []
        for j in range(int(count)):
            parts = lines[i + 1 + j].split()
            dets.append(Detection(
                box=tuple(float(v) for v in parts[3:7]),
                score=float(parts[2]),
                class_id=int(parts[1]),
            ))
        out[image_path] = dets
        i += 1 + int(count)
    return out
