"""Shapes-world: synthetic multi-label scenes with exact silhouettes.

Each class is one glyph family (disc, triangle, square, ...). A scene is a
background with 1..N opaque glyphs of random color, size and rotation. Class
identity is recoverable from shape alone; color and position carry no label
information.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np
from scipy import ndimage

from ..core import ClassLabel, ClassTable

SHAPE_FAMILIES = ("disc", "triangle", "square", "star", "ring", "cross", "crescent", "bar")
BACKGROUND_KINDS = ("flat", "gradient", "noise")


@dataclass(frozen=True)
class LabeledSample:
    image: np.ndarray  # H x W x 3 float32, display range, multiples of 1/255
    labels: frozenset  # of ClassLabel
    gt_masks: Mapping[ClassLabel, np.ndarray] | None = None
    id: str = ""

    def __post_init__(self):
        if self.gt_masks is not None:
            extra = set(self.gt_masks) - set(self.labels)
            if extra:
                raise ValueError(f"gt_masks keys {sorted(c.name for c in extra)} not in labels")

    def training_view(self) -> "TrainingSample":
        return TrainingSample(self.image, self.labels, self.id)

    def label_vector(self, num_classes: int) -> np.ndarray:
        v = np.zeros(num_classes, dtype=np.float32)
        for c in self.labels:
            v[c.index] = 1.0
        return v


@dataclass(frozen=True)
class TrainingSample:
    """What training code is allowed to see: no ground-truth masks."""

    image: np.ndarray
    labels: frozenset
    id: str = ""


@dataclass(frozen=True)
class SceneSpec:
    image_size: int = 64
    num_classes: int = 4
    objects_per_image: tuple[int, int] = (1, 3)
    object_scale: tuple[float, float] = (0.22, 0.4)
    background_kind: tuple[str, ...] = BACKGROUND_KINDS
    max_class_area: float = 0.30
    min_contrast: float = 0.35

    def __post_init__(self):
        lo, hi = self.object_scale
        if not 0 < lo <= hi < 1:
            raise ValueError(f"object_scale must satisfy 0 < lo <= hi < 1, got {self.object_scale}")
        if not 1 <= self.objects_per_image[0] <= self.objects_per_image[1]:
            raise ValueError(f"objects_per_image must satisfy 1 <= lo <= hi, got {self.objects_per_image}")
        if self.image_size < 8:
            raise ValueError("image_size must be >= 8")
        unknown = set(self.background_kind) - set(BACKGROUND_KINDS)
        if unknown or not self.background_kind:
            raise ValueError(f"background_kind must be a nonempty subset of {BACKGROUND_KINDS}")

    def class_table(self) -> ClassTable:
        if self.num_classes > len(SHAPE_FAMILIES):
            raise ValueError(
                f"num_classes={self.num_classes} exceeds the {len(SHAPE_FAMILIES)} available shape families"
            )
        return ClassTable(SHAPE_FAMILIES[: self.num_classes])


def _regular_polygon(n: int, r: float, phase: float = 0.0) -> np.ndarray:
    t = phase + 2 * np.pi * np.arange(n) / n
    return np.stack([r * np.cos(t), r * np.sin(t)], axis=1)


def _star(r: float) -> np.ndarray:
    t = -np.pi / 2 + np.pi * np.arange(10) / 5
    rad = np.where(np.arange(10) % 2 == 0, r, 0.45 * r)
    return np.stack([rad * np.cos(t), rad * np.sin(t)], axis=1)


def _inside_polygon(u: np.ndarray, v: np.ndarray, poly: np.ndarray) -> np.ndarray:
    # even-odd rule, vectorized over points
    inside = np.zeros(u.shape, dtype=bool)
    x0, y0 = poly[:, 0], poly[:, 1]
    x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
    for a, b, c, d in zip(x0, y0, x1, y1):
        cond = (b > v) != (d > v)
        with np.errstate(divide="ignore", invalid="ignore"):
            xc = a + (v - b) * (c - a) / (d - b)
        inside ^= cond & (u < xc)
    return inside


def rasterize_glyph(family: str, size: int, cx: float, cy: float, radius: float, angle: float) -> np.ndarray:
    """Boolean ``size x size`` silhouette sampled at pixel centers.

    ``radius`` is the circumradius in pixels; ``angle`` in radians.
    """
    jj, ii = np.meshgrid(np.arange(size) + 0.5, np.arange(size) + 0.5)
    dx, dy = jj - cx, ii - cy
    ca, sa = math.cos(angle), math.sin(angle)
    u = ca * dx + sa * dy
    v = -sa * dx + ca * dy
    r = radius
    if family == "disc":
        return u * u + v * v <= r * r
    if family == "ring":
        rho2 = u * u + v * v
        return (rho2 <= r * r) & (rho2 >= (0.55 * r) ** 2)
    if family == "square":
        s = r / math.sqrt(2)
        return (np.abs(u) <= s) & (np.abs(v) <= s)
    if family == "triangle":
        return _inside_polygon(u, v, _regular_polygon(3, r, -np.pi / 2))
    if family == "star":
        return _inside_polygon(u, v, _star(r))
    if family == "cross":
        w = 0.3 * r
        return ((np.abs(u) <= w) & (np.abs(v) <= r)) | ((np.abs(v) <= w) & (np.abs(u) <= r))
    if family == "crescent":
        return (u * u + v * v <= r * r) & ((u - 0.45 * r) ** 2 + v * v > (0.8 * r) ** 2)
    if family == "bar":
        return (np.abs(u) <= r) & (np.abs(v) <= 0.3 * r)
    raise ValueError(f"unknown shape family {family!r}")


def _background(rng: np.random.Generator, kind: str, size: int) -> np.ndarray:
    base = rng.uniform(0.05, 0.95, size=3)
    if kind == "flat":
        img = np.broadcast_to(base, (size, size, 3)).copy()
    elif kind == "gradient":
        other = rng.uniform(0.05, 0.95, size=3)
        theta = rng.uniform(0, 2 * np.pi)
        jj, ii = np.meshgrid(np.linspace(-1, 1, size), np.linspace(-1, 1, size))
        t = np.clip((np.cos(theta) * jj + np.sin(theta) * ii) / (2 * math.sqrt(2)) + 0.5, 0, 1)
        img = base * (1 - t[..., None]) + other * t[..., None]
    elif kind == "noise":
        field_ = rng.standard_normal((size, size, 3))
        field_ = ndimage.gaussian_filter(field_, sigma=(size / 16, size / 16, 0), mode="wrap")
        field_ /= field_.std() + 1e-12
        img = base + 0.08 * field_
    else:
        raise ValueError(f"unknown background kind {kind!r}")
    return np.clip(img, 0, 1)


def _object_color(rng: np.random.Generator, near: np.ndarray, min_contrast: float) -> np.ndarray:
    for _ in range(100):
        color = rng.uniform(0, 1, size=3)
        if np.abs(color - near).max() >= min_contrast:
            return color
    return np.where(near > 0.5, 0.0, 1.0)


def quantize(img: np.ndarray) -> np.ndarray:
    return (np.round(np.clip(img, 0, 1) * 255) / 255).astype(np.float32)


def generate_scene(rng: np.random.Generator, spec: SceneSpec, sample_id: str = "") -> LabeledSample:
    table = spec.class_table()
    S = spec.image_size
    kind = spec.background_kind[rng.integers(len(spec.background_kind))]
    img = _background(rng, kind, S)
    n_obj = int(rng.integers(spec.objects_per_image[0], spec.objects_per_image[1] + 1))

    occupied = np.zeros((S, S), dtype=bool)
    placed: list[tuple[int, np.ndarray]] = []
    class_area = np.zeros(len(table))
    for _ in range(n_obj):
        cls = int(rng.integers(len(table)))
        for _attempt in range(200):
            radius = 0.5 * S * rng.uniform(*spec.object_scale)
            cx, cy = rng.uniform(radius, S - radius, size=2)
            angle = rng.uniform(0, 2 * np.pi)
            sil = rasterize_glyph(table.names[cls], S, cx, cy, radius, angle)
            if not sil.any():
                continue
            # keep instances separable: no overlap and a 1px gap
            if (ndimage.binary_dilation(sil, structure=np.ones((3, 3), bool)) & occupied).any():
                continue
            if (class_area[cls] + sil.sum()) / (S * S) > spec.max_class_area:
                continue
            break
        else:
            continue
        occupied |= sil
        class_area[cls] += sil.sum()
        placed.append((cls, sil))

    if not placed:
        # fall back to one small glyph at the center
        cls = int(rng.integers(len(table)))
        radius = 0.5 * S * spec.object_scale[0]
        sil = rasterize_glyph(table.names[cls], S, S / 2, S / 2, radius, 0.0)
        placed.append((cls, sil))

    masks: dict[ClassLabel, np.ndarray] = {}
    for cls, sil in placed:
        local = img[sil].mean(axis=0)
        img[sil] = _object_color(rng, local, spec.min_contrast)
        lab = table.label(cls)
        prev = masks.get(lab)
        masks[lab] = sil if prev is None else (prev | sil)

    gt = {k: v.astype(np.uint8) for k, v in masks.items()}
    return LabeledSample(quantize(img), frozenset(gt), gt, sample_id)


def generate_corpus(seed: int, spec: SceneSpec, n: int, prefix: str = "s") -> list[LabeledSample]:
    rng = np.random.default_rng(seed)
    width = max(5, len(str(n)))
    return [generate_scene(rng, spec, f"{prefix}{i:0{width}d}") for i in range(n)]


def class_histogram(samples, num_classes: int) -> np.ndarray:
    counts = np.zeros(num_classes, dtype=np.int64)
    for s in samples:
        for c in s.labels:
            counts[c.index] += 1
    return counts
