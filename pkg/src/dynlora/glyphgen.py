"""Procedural glyph families and the GLY1 dataset container.

Each family is a set of classes; each class is a deterministic *stroke
program* (a few Bezier strokes in the unit square).  Rendering a glyph applies
per-writer jitter to the control points plus a random rotation (+-10 deg),
scale (0.8-1.0), shift and pen thickness, then rasterises with a
round pen on a supersampled grid (Euclidean distance transform) and box-filters
back down, which gives soft anti-aliased edges.

GLY1 layout (little endian)::

    b"GLY1" | u32 count | u32 height | u32 width | u32 n_classes | u8 family
    count x u16 labels
    count x height x width u8 pixels
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

IMAGE_SIDE = 48
PROGRAM_SEED = 20240917

# family id -> (n_classes, complexity level); class counts follow the four real datasets
FAMILIES = {
    0: (10, 1),  # digit-like
    1: (30, 2),  # logographic
    2: (12, 3),  # pictographic
    3: (30, 3),  # pictographic
}
FAMILY_NAMES = {0: "tibetan_digits", 1: "ancient_yi", 2: "shui", 3: "dongba"}

_STROKES = {1: (2, 3), 2: (4, 6), 3: (6, 8)}
_MIN_INK = 40


class GlyphRangeError(ValueError):
    pass


class GlyphFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass
class GlyphDataset:
    images: np.ndarray  # (N, H, W) uint8
    labels: np.ndarray  # (N,) int64
    n_classes: int
    family: int
    split: str = "train"

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.uint8)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 3 or len(self.images) != len(self.labels):
            raise ValueError(f"images {self.images.shape} and labels {self.labels.shape} disagree")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise GlyphRangeError(f"labels must lie in [0, {self.n_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    def as_float(self) -> np.ndarray:
        return self.images.astype(np.float32) / 255.0

    def subset(self, idx) -> GlyphDataset:
        return GlyphDataset(self.images[idx], self.labels[idx], self.n_classes, self.family, self.split)


def _check(family: int, cls: int | None = None) -> tuple[int, int]:
    if family not in FAMILIES:
        raise GlyphRangeError(f"unknown family {family}; expected one of {sorted(FAMILIES)}")
    n_classes, level = FAMILIES[family]
    if cls is not None and not 0 <= cls < n_classes:
        raise GlyphRangeError(f"class {cls} outside [0, {n_classes}) for family {family}")
    return n_classes, level


def class_program(family: int, cls: int, seed: int = PROGRAM_SEED) -> list[np.ndarray]:
    """Control points (k x 2, in [-1, 1]) of every stroke of one class."""
    _, level = _check(family, cls)
    rng = np.random.default_rng([seed, family, cls])
    lo, hi = _STROKES[level]
    strokes = []
    for _ in range(rng.integers(lo, hi + 1)):
        if level == 3 and rng.random() < 0.35:
            # closed loop
            c = rng.uniform(-0.5, 0.5, 2)
            r = rng.uniform(0.18, 0.4, 2)
            t = np.linspace(0, 2 * np.pi, 7)
            pts = c + r * np.stack([np.cos(t), np.sin(t)], axis=1)
        elif level == 2:
            # mostly axis-aligned strokes with a hook
            p0 = rng.uniform(-0.8, 0.8, 2)
            horiz = rng.random() < 0.5
            length = rng.uniform(0.6, 1.3) * rng.choice([-1, 1])
            p1 = p0 + (np.array([length, 0]) if horiz else np.array([0, length]))
            p2 = p1 + rng.uniform(-0.3, 0.3, 2)
            pts = np.stack([p0, p1, p2])
        else:
            while True:
                pts = rng.uniform(-0.85, 0.85, (rng.integers(3, 5), 2))
                if np.linalg.norm(pts[-1] - pts[0]) > 0.6:
                    break
        strokes.append(np.clip(pts, -0.95, 0.95))
    return strokes


def _bezier(ctrl: np.ndarray, n: int = 16) -> np.ndarray:
    """Evaluate the Bezier curve with control points ``ctrl`` via de Casteljau."""
    t = np.linspace(0.0, 1.0, n)[:, None, None]
    pts = np.broadcast_to(ctrl, (n,) + ctrl.shape).copy()
    while pts.shape[1] > 1:
        pts = (1 - t) * pts[:, :-1] + t * pts[:, 1:]
    return pts[:, 0]


def _rasterize(polylines: list[np.ndarray], thickness: float, side: int, ss: int = 3) -> np.ndarray:
    """Pen of width ``thickness`` px drawn on an ``ss``-times supersampled grid, box-filtered down."""
    big = side * ss
    pen = np.ones((big, big), dtype=bool)
    starts = np.concatenate([p[:-1] for p in polylines]) * ss
    seg = np.concatenate([np.diff(p, axis=0) for p in polylines]) * ss
    steps = np.maximum(np.ceil(np.linalg.norm(seg, axis=1) * 2), 1).astype(int)
    owner = np.repeat(np.arange(len(seg)), steps + 1)
    t = (np.arange(owner.size) - np.repeat(np.cumsum(steps + 1) - (steps + 1), steps + 1)) / steps[owner]
    pts = np.floor(starts[owner] + t[:, None] * seg[owner]).astype(int)
    ok = (pts >= 0).all(axis=1) & (pts < big).all(axis=1)
    pen[pts[ok, 1], pts[ok, 0]] = False
    dist = ndimage.distance_transform_edt(pen)
    ink = np.clip(thickness * ss / 2 + 0.5 - dist, 0.0, 1.0)
    ink = ink.reshape(side, ss, side, ss).mean(axis=(1, 3))
    return np.round(ink * 255).astype(np.uint8)


def render_glyph(family: int, cls: int, writer_seed: int, side: int = IMAGE_SIDE,
                 program_seed: int = PROGRAM_SEED) -> np.ndarray:
    """Render one ``side x side`` uint8 glyph; deterministic in (family, cls, writer_seed)."""
    program = class_program(family, cls, program_seed)
    rng = np.random.default_rng([family, cls, writer_seed, 0x6C1F])
    angle = np.deg2rad(rng.uniform(-10, 10))
    scale = rng.uniform(0.8, 1.0)
    shift = rng.uniform(-0.06, 0.06, 2)
    thickness = rng.uniform(1.6, 2.6)
    rot = np.array([[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]])
    half = side / 2
    radius = 0.42 * side
    lines = []
    for ctrl in program:
        jittered = ctrl + rng.normal(0.0, 0.07, ctrl.shape)
        curve = _bezier(jittered) if len(ctrl) <= 4 else jittered
        curve = (curve @ rot.T) * scale + shift
        lines.append(curve * radius + half)
    img = _rasterize(lines, thickness, side)
    while np.count_nonzero(img) < _MIN_INK:
        thickness += 1.0
        img = _rasterize(lines, thickness, side)
    return img


def _writer_seed(seed: int, split: str, cls: int, i: int) -> int:
    # train and test writers live in disjoint integer ranges by construction
    if not (0 <= cls < 64 and 0 <= i < 2 ** 20):
        raise GlyphRangeError("class index or per-class count out of range")
    split_bit = {"train": 0, "test": 1}[split]
    return ((seed * 2 + split_bit) * 64 + cls) * 2 ** 20 + i


def generate_dataset(family: int, per_class: int = 200, seed: int = 0, split: str = "train",
                     program_seed: int = PROGRAM_SEED) -> GlyphDataset:
    """Balanced, seeded-shuffled dataset with ``per_class`` glyphs per class."""
    n_classes, _ = _check(family)
    if per_class < 2:
        raise GlyphRangeError("per_class must be >= 2")
    images = np.empty((n_classes * per_class, IMAGE_SIDE, IMAGE_SIDE), dtype=np.uint8)
    labels = np.repeat(np.arange(n_classes), per_class)
    for j, cls in enumerate(labels):
        images[j] = render_glyph(family, int(cls), _writer_seed(seed, split, int(cls), j % per_class),
                                 program_seed=program_seed)
    order = np.random.default_rng([seed, family, {"train": 0, "test": 1}[split]]).permutation(len(labels))
    return GlyphDataset(images[order], labels[order], n_classes, family, split)


PRETEXT_FAMILY = 255
PRETEXT_PROGRAM_SEED = 777


def generate_pretext(per_class: int = 15, seed: int = 0) -> GlyphDataset:
    """Union of all four families drawn from a *different* program seed.

    Its classes share the families' stroke statistics but none of their
    programs, so a backbone trained on it has never seen a task class.
    """
    parts = [generate_dataset(f, per_class, seed, "train", program_seed=PRETEXT_PROGRAM_SEED)
             for f in sorted(FAMILIES)]
    offsets = np.cumsum([0] + [p.n_classes for p in parts])
    return GlyphDataset(np.concatenate([p.images for p in parts]),
                        np.concatenate([p.labels + o for p, o in zip(parts, offsets)]),
                        int(offsets[-1]), PRETEXT_FAMILY, "pretext")


_HEADER = struct.Struct("<4sIIIIB")
MAGIC = b"GLY1"


def write_gly1(dataset: GlyphDataset, path) -> None:
    n, h, w = dataset.images.shape
    if dataset.n_classes > 0xFFFF:
        raise GlyphRangeError("GLY1 labels are u16")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, n, h, w, dataset.n_classes, dataset.family))
        fh.write(dataset.labels.astype("<u2").tobytes())
        fh.write(dataset.images.tobytes())


def decode_gly1(buf: bytes, split: str = "train") -> GlyphDataset:
    if len(buf) < _HEADER.size:
        raise GlyphFormatError(f"file too short for header ({len(buf)} bytes)", len(buf))
    magic, n, h, w, n_classes, family = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise GlyphFormatError(f"bad magic {magic!r}", 0)
    off = _HEADER.size
    need = off + 2 * n + n * h * w
    if len(buf) < need:
        raise GlyphFormatError(f"truncated: need {need} bytes, have {len(buf)}", len(buf))
    if len(buf) > need:
        raise GlyphFormatError(f"{len(buf) - need} trailing bytes", need)
    labels = np.frombuffer(buf, dtype="<u2", count=n, offset=off).astype(np.int64)
    bad = np.flatnonzero(labels >= n_classes)
    if bad.size:
        raise GlyphFormatError(f"label {labels[bad[0]]} >= n_classes {n_classes}", off + 2 * int(bad[0]))
    images = np.frombuffer(buf, dtype=np.uint8, count=n * h * w, offset=off + 2 * n).reshape(n, h, w)
    return GlyphDataset(images.copy(), labels, n_classes, family, split)


def read_gly1(path, split: str | None = None) -> GlyphDataset:
    path = Path(path)
    if split is None:
        split = path.stem
    return decode_gly1(path.read_bytes(), split)
