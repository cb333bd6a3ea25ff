"""Synthetic blob-world dataset: grammar, renderer, oracle detector.

Scenes are sampled from a tiny closed grammar, optionally augmented with
size and position phrases, rendered as flat-color blobs on a gray canvas,
then annotated by an exact-color connected-component detector. Ground truth
boxes in the manifest are the detector's own output, so layout fidelity of
anything trained on the data is machine-checkable.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ParseError, RenderError, ValidationError
from .layout import BBox
from .vocab import BACKGROUND, COLORS, PALETTE, POSITIONS, SHAPES, SIZES

MAGIC = b"LSIM"
MANIFEST_FORMAT = "layoutflow-dataset"

# blob side length as a fraction of the image side
SIZE_RANGES = {
    "tiny": (0.10, 0.15),
    "small": (0.15, 0.22),
    "modest": (0.22, 0.30),
    "large": (0.30, 0.40),
    "huge": (0.40, 0.55),
}
# unprompted blobs stay small enough that several can share a canvas;
# explicit size words still reach the full range
FREE_SIZE_RANGE = (0.10, 0.30)

# std of the centered Gaussian used when no position phrase constrains a blob
CENTER_SIGMA = 0.08


@dataclass(frozen=True)
class EntitySpec:
    """One grammar clause: color and shape, with optional size and position."""

    color: str
    shape: str
    size: str | None = None
    position: str | None = None

    def clause(self) -> str:
        words = [w for w in (self.size, self.color, self.shape, self.position) if w]
        return " ".join(words)


@dataclass(frozen=True)
class PromptSpec:
    """Parsed prompt: entity clauses plus the source text."""

    entities: tuple
    text: str


@dataclass(frozen=True)
class PhraseTables:
    """The exact augmentation phrases the layout-prompting stage may add."""

    positional: tuple = POSITIONS
    size: tuple = SIZES

    def __post_init__(self):
        if len(self.positional) != 5 or len(self.size) != 5:
            raise ValidationError("phrase tables must hold five phrases each")


def parse_clause(text: str) -> EntitySpec:
    """Parse one '[size] color shape [position phrase]' clause."""
    words = text.strip().split()
    if not words:
        raise ParseError("empty clause")
    i = 0
    size = None
    if words[i] in SIZES:
        size = words[i]
        i += 1
    if i >= len(words) or words[i] not in COLORS:
        raise ParseError(f"expected a color in {text!r}")
    color = words[i]
    i += 1
    if i >= len(words) or words[i] not in SHAPES:
        raise ParseError(f"expected a shape in {text!r}")
    shape = words[i]
    i += 1
    position = None
    if i < len(words):
        position = " ".join(words[i:])
        if position not in POSITIONS:
            raise ParseError(f"bad position phrase in {text!r}")
    return EntitySpec(color, shape, size, position)


def parse_prompt(text: str) -> PromptSpec:
    """Parse a comma-separated list of entity clauses."""
    clauses = [c for c in text.split(",")]
    if not clauses or not text.strip():
        raise ParseError("empty prompt")
    return PromptSpec(tuple(parse_clause(c) for c in clauses), text)


def unparse(entities) -> str:
    return ", ".join(e.clause() for e in entities)


def layout_prompting(spec: PromptSpec, rng, p_size: float, p_pos: float, tables: PhraseTables | None = None) -> PromptSpec:
    """Randomly add size and position phrases to unconstrained entities."""
    for p in (p_size, p_pos):
        if not 0.0 <= p <= 1.0:
            raise ValidationError(f"probability {p} outside [0, 1]")
    tables = tables or PhraseTables()
    out = []
    for e in spec.entities:
        if e.size is None and rng.random() < p_size:
            e = replace(e, size=tables.size[int(rng.integers(len(tables.size)))])
        if e.position is None and rng.random() < p_pos:
            e = replace(
                e, position=tables.positional[int(rng.integers(len(tables.positional)))]
            )
        out.append(e)
    out = tuple(out)
    return PromptSpec(out, unparse(out))


# ---------------------------------------------------------------------------
# rendering


def _axis_range(constraint: str | None, side: int, size: int):
    """Feasible top-left range on one axis for a center constraint."""
    lo, hi = 0, size - side
    half = side / 2.0
    if constraint == "low":  # center < 0.5
        hi = min(hi, int(np.ceil(size / 2.0 - half)) - 1)
    elif constraint == "high":  # center > 0.5
        lo = max(lo, int(np.floor(size / 2.0 - half)) + 1)
    elif constraint == "mid":  # center in the middle third
        lo = max(lo, int(np.ceil(size / 3.0 - half)))
        hi = min(hi, int(np.floor(2.0 * size / 3.0 - half)))
    return lo, hi


def _sample_top_left(rng, constraint, side: int, size: int):
    cons_x, cons_y = "none", "none"
    if constraint == "on the left of image":
        cons_x = "low"
    elif constraint == "on the right of image":
        cons_x = "high"
    elif constraint == "on the top of image":
        cons_y = "low"
    elif constraint == "on the bottom of image":
        cons_y = "high"
    elif constraint == "in the center of image":
        cons_x = cons_y = "mid"
    coords = []
    for cons in (cons_y, cons_x):
        if cons == "none":
            # unprompted blobs drift toward the middle: the layout bias
            center = rng.normal(0.5, CENTER_SIGMA) * size
            v = int(round(center - side / 2.0))
            coords.append(min(max(v, 0), size - side))
        else:
            lo, hi = _axis_range(cons, side, size)
            if lo > hi:
                return None
            coords.append(int(rng.integers(lo, hi + 1)))
    return coords[0], coords[1]


def _blob_mask(shape: str, side: int, r0: int, c0: int, size: int) -> np.ndarray:
    mask = np.zeros((size, size), dtype=bool)
    if shape == "square":
        mask[r0 : r0 + side, c0 : c0 + side] = True
    else:
        rr, cc = np.mgrid[0:size, 0:size]
        cy, cx = r0 + side / 2.0, c0 + side / 2.0
        mask = (rr + 0.5 - cy) ** 2 + (cc + 0.5 - cx) ** 2 <= (side / 2.0) ** 2
    return mask


def _tight_box(mask: np.ndarray, size: int) -> BBox:
    ys, xs = np.nonzero(mask)
    return BBox(xs.min() / size, ys.min() / size, (xs.max() + 1) / size, (ys.max() + 1) / size)


def _center_ok(box: BBox, position: str | None) -> bool:
    cx, cy = box.center()
    if position == "on the left of image":
        return cx < 0.5
    if position == "on the right of image":
        return cx > 0.5
    if position == "on the top of image":
        return cy < 0.5
    if position == "on the bottom of image":
        return cy > 0.5
    if position == "in the center of image":
        return 1.0 / 3.0 <= cx <= 2.0 / 3.0 and 1.0 / 3.0 <= cy <= 2.0 / 3.0
    return True


def _disjoint(a: BBox, b: BBox) -> bool:
    return a.x1 >= b.x2 or a.x2 <= b.x1 or a.y1 >= b.y2 or a.y2 <= b.y1


def render_blobs(spec: PromptSpec, rng, image_size: int = 32):
    """Draw every entity as a flat-color blob; returns (u8 image, boxes).

    Blobs never overlap; placement retries up to 50 times per entity before
    giving up with a RenderError.
    """
    if image_size < 8:
        raise ValidationError(f"image_size too small: {image_size}")
    img = np.empty((image_size, image_size, 3), dtype=np.uint8)
    img[...] = BACKGROUND
    boxes = []
    for n, e in enumerate(spec.entities):
        lo, hi = SIZE_RANGES[e.size] if e.size else FREE_SIZE_RANGE
        placed = None
        for _ in range(50):
            side = int(round(rng.uniform(lo, hi) * image_size))
            side = min(max(side, 2), image_size)
            top_left = _sample_top_left(rng, e.position, side, image_size)
            if top_left is None:
                continue
            mask = _blob_mask(e.shape, side, top_left[0], top_left[1], image_size)
            box = _tight_box(mask, image_size)
            if not _center_ok(box, e.position):
                continue
            if not all(_disjoint(box, other) for other in boxes):
                continue
            placed = (mask, box)
            break
        if placed is None:
            raise RenderError(f"could not place entity {n} ({e.clause()!r})")
        mask, box = placed
        img[mask] = PALETTE[e.color]
        boxes.append(box)
    return img, boxes


# ---------------------------------------------------------------------------
# oracle detector


@dataclass(frozen=True)
class Detection:
    """One detected blob: color class, box, and area-fraction score."""

    color: str
    box: BBox
    score: float


def detect_boxes(image: np.ndarray, tol: float = 1e-6) -> list:
    """Exact-color connected components (4-neighborhood) per palette entry."""
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValidationError(f"detector needs an (H, W, 3) image, got {img.shape}")
    if img.dtype == np.uint8:
        img = img.astype(np.float64) / 255.0
    size = img.shape[0]
    out = []
    for color in COLORS:
        target = np.array(PALETTE[color]) / 255.0
        mask = (np.abs(img - target) <= tol).all(axis=2)
        labels, count = ndimage.label(mask)
        for comp in range(1, count + 1):
            comp_mask = labels == comp
            out.append(
                Detection(
                    color,
                    _tight_box(comp_mask, size),
                    float(comp_mask.sum()) / (img.shape[0] * img.shape[1]),
                )
            )
    return out


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union of two boxes; 1.0 exactly for identical ones."""
    w = min(a.x2, b.x2) - max(a.x1, b.x1)
    h = min(a.y2, b.y2) - max(a.y1, b.y1)
    if w <= 0.0 or h <= 0.0:
        return 0.0
    inter = w * h
    union = a.area() + b.area() - inter
    return inter / union


def suppress_overlaps(detections, threshold: float = 0.9) -> list:
    """Greedy same-color suppression of detections above the IoU threshold."""
    if not 0.0 < threshold <= 1.0:
        raise ValidationError(f"threshold {threshold} outside (0, 1]")
    ranked = sorted(detections, key=lambda d: -d.score)
    kept = []
    for d in ranked:
        ok = all(
            k.color != d.color or iou(k.box, d.box) <= threshold for k in kept
        )
        if ok:
            kept.append(d)
    return kept


def jitter_detections(detections, rng, image_size: int) -> list:
    """Shift each detection by up to one pixel on each axis (noise mode)."""
    out = []
    step = 1.0 / image_size
    for d in detections:
        dx = int(rng.integers(-1, 2)) * step
        dy = int(rng.integers(-1, 2)) * step
        b = d.box
        x1 = min(max(b.x1 + dx, 0.0), 1.0 - (b.x2 - b.x1))
        y1 = min(max(b.y1 + dy, 0.0), 1.0 - (b.y2 - b.y1))
        out.append(Detection(d.color, BBox(x1, y1, x1 + (b.x2 - b.x1), y1 + (b.y2 - b.y1)), d.score))
    return out


# ---------------------------------------------------------------------------
# image and manifest files


def write_image(path, image: np.ndarray) -> None:
    """Serialize a u8 (H, W, C) image in the package's flat binary format."""
    img = np.ascontiguousarray(image)
    if img.dtype != np.uint8 or img.ndim != 3:
        raise ValidationError(f"need a u8 (H, W, C) image, got {img.dtype} {img.shape}")
    h, w, c = img.shape
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<III", h, w, c))
        fh.write(img.tobytes())


def read_image(path) -> np.ndarray:
    with open(path, "rb") as fh:
        head = fh.read(16)
        if len(head) < 16 or head[:4] != MAGIC:
            raise ValidationError(f"{path}: not an LSIM image")
        h, w, c = struct.unpack("<III", head[4:])
        payload = fh.read(h * w * c)
    if len(payload) != h * w * c:
        raise ValidationError(f"{path}: truncated image payload")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w, c).copy()


@dataclass(frozen=True)
class DatasetConfig:
    image_size: int = 32
    min_entities: int = 1
    max_entities: int = 4
    p_size: float = 0.5
    p_pos: float = 0.5
    iou_threshold: float = 0.9
    jitter: bool = False

    def __post_init__(self):
        if not 1 <= self.min_entities <= self.max_entities:
            raise ValidationError(
                f"bad entity range [{self.min_entities}, {self.max_entities}]"
            )
        for p in (self.p_size, self.p_pos):
            if not 0.0 <= p <= 1.0:
                raise ValidationError(f"probability {p} outside [0, 1]")


def _sample_record(idx: int, seed: int, cfg: DatasetConfig, tables: PhraseTables):
    """One scene: grammar draw, augmentation, render, detect, annotate."""
    for attempt in range(30):
        record_seed = seed * 1_000_003 + idx * 1_009 + attempt
        rng = np.random.default_rng(record_seed)
        n = int(rng.integers(cfg.min_entities, cfg.max_entities + 1))
        drawn = tuple(
            EntitySpec(
                COLORS[int(rng.integers(len(COLORS)))],
                SHAPES[int(rng.integers(len(SHAPES)))],
            )
            for _ in range(n)
        )
        spec = parse_prompt(unparse(drawn))
        spec = layout_prompting(spec, rng, cfg.p_size, cfg.p_pos, tables)
        try:
            img, gt_boxes = render_blobs(spec, rng, cfg.image_size)
        except RenderError:
            continue
        dets = detect_boxes(img)
        if cfg.jitter:
            dets = jitter_detections(dets, rng, cfg.image_size)
        dets = suppress_overlaps(dets, cfg.iou_threshold)
        entities_out = []
        free = list(dets)
        for e, gt in zip(spec.entities, gt_boxes):
            best, best_iou = None, 0.0
            for d in free:
                if d.color != e.color:
                    continue
                v = iou(d.box, gt)
                if v > best_iou:
                    best, best_iou = d, v
            if best is None:
                continue  # oracle missed this entity: annotate what was seen
            free.remove(best)
            entities_out.append(
                {"phrase": e.clause(), "bbox": [best.box.x1, best.box.y1, best.box.x2, best.box.y2]}
            )
        if not entities_out:
            continue
        return {
            "image": f"images/{idx:06d}.lsim",
            "global_prompt": spec.text,
            "entities": entities_out,
            "seed": record_seed,
        }, img
    raise RenderError(f"record {idx}: no placeable scene in 30 attempts")


def build_dataset(count: int, seed: int, cfg: DatasetConfig, out_dir=None, tables: PhraseTables | None = None):
    """Generate count records; optionally write manifest.jsonl and images."""
    if count <= 0:
        raise ValidationError(f"count must be positive, got {count}")
    tables = tables or PhraseTables()
    records = []
    images = []
    for idx in range(count):
        rec, img = _sample_record(idx, seed, cfg, tables)
        records.append(rec)
        images.append(img)
    if out_dir is not None:
        out_dir = Path(out_dir)
        (out_dir / "images").mkdir(parents=True, exist_ok=True)
        header = {
            "format": MANIFEST_FORMAT,
            "version": 1,
            "count": count,
            "image_size": cfg.image_size,
            "seed": seed,
        }
        with open(out_dir / "manifest.jsonl", "w") as fh:
            fh.write(json.dumps(header, sort_keys=True) + "\n")
            for rec in records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        for rec, img in zip(records, images):
            write_image(out_dir / rec["image"], img)
    return records, images


def read_manifest(path):
    """Returns (header dict, record list); validates the header line."""
    with open(path) as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    if not lines:
        raise ValidationError(f"{path}: empty manifest")
    try:
        header = json.loads(lines[0])
        records = [json.loads(ln) for ln in lines[1:]]
    except json.JSONDecodeError as e:
        raise ValidationError(f"{path}: bad JSON line: {e}") from e
    if header.get("format") != MANIFEST_FORMAT:
        raise ValidationError(f"{path}: unknown manifest format {header.get('format')!r}")
    return header, records
