"""Mask samplers: rotated-box prior, unpaired mask-pool prior, random rectangles."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image as PILImage

from ..core import ClassLabel

PRIOR_KINDS = ("none", "boxes", "mask_pool")


@dataclass(frozen=True)
class PriorSpec:
    kind: str = "none"
    box_area: tuple[float, float] = (0.02, 0.3)
    box_aspect: tuple[float, float] = (1 / 3, 3.0)
    box_rotation: tuple[float, float] = (0.0, 180.0)
    pool_dir: str | None = None
    pool_per_class_limit: int | None = None
    pool_flip: bool = True

    def __post_init__(self):
        if self.kind not in PRIOR_KINDS:
            raise ValueError(f"prior kind must be one of {PRIOR_KINDS}, got {self.kind!r}")
        if (self.kind == "mask_pool") != (self.pool_dir is not None):
            raise ValueError("pool_dir is required iff kind == 'mask_pool'")
        if self.pool_per_class_limit is not None and self.pool_per_class_limit < 1:
            raise ValueError("pool_per_class_limit must be >= 1")


def _check_range(name: str, r, lo: float, hi: float, lo_open: bool = True):
    a, b = r
    bad_lo = a <= lo if lo_open else a < lo
    if bad_lo or b > hi or a > b:
        raise ValueError(f"infeasible {name} range {tuple(r)}; need {lo} {'<' if lo_open else '<='} min <= max <= {hi}")


def rasterize_box(size: int, cx: float, cy: float, w: float, h: float, angle_deg: float) -> np.ndarray:
    """Pixel-center coverage of a rotated ``w x h`` rectangle (pixel units)."""
    jj, ii = np.meshgrid(np.arange(size) + 0.5, np.arange(size) + 0.5)
    t = math.radians(angle_deg)
    dx, dy = jj - cx, ii - cy
    u = math.cos(t) * dx + math.sin(t) * dy
    v = -math.sin(t) * dx + math.cos(t) * dy
    return ((np.abs(u) <= w / 2) & (np.abs(v) <= h / 2)).astype(np.float32)


def sample_box_prior(rng: np.random.Generator, prior: PriorSpec, size: int, center=None) -> np.ndarray:
    if prior.kind != "boxes":
        raise ValueError(f"sample_box_prior needs kind='boxes', got {prior.kind!r}")
    _check_range("box_area", prior.box_area, 0.0, 1.0)
    _check_range("box_aspect", prior.box_aspect, 0.0, math.inf)
    area = rng.uniform(*prior.box_area)
    aspect = rng.uniform(*prior.box_aspect)
    angle = rng.uniform(*prior.box_rotation)
    w = math.sqrt(area * aspect) * size
    h = math.sqrt(area / aspect) * size
    if center is None:
        # keep the rotated bounding box inside the frame when it fits
        t = math.radians(angle)
        bw = abs(w * math.cos(t)) + abs(h * math.sin(t))
        bh = abs(w * math.sin(t)) + abs(h * math.cos(t))
        cx = rng.uniform(bw / 2, size - bw / 2) if bw < size else size / 2
        cy = rng.uniform(bh / 2, size - bh / 2) if bh < size else size / 2
    else:
        cx, cy = center
    return rasterize_box(size, cx, cy, w, h, angle)


def sample_random_rects(rng: np.random.Generator, count_range, area_range, size: int) -> np.ndarray:
    """Union of axis-aligned rectangles, each fully inside the frame."""
    lo, hi = int(count_range[0]), int(count_range[1])
    if not 1 <= lo <= hi:
        raise ValueError(f"invalid count range {count_range}")
    _check_range("rect area", area_range, 0.0, 1.0)
    m = np.zeros((size, size), dtype=np.float32)
    for _ in range(int(rng.integers(lo, hi + 1))):
        area = rng.uniform(*area_range)
        aspect = math.exp(rng.uniform(math.log(0.5), math.log(2.0)))
        w = min(size, max(1, int(round(math.sqrt(area * aspect) * size))))
        h = min(size, max(1, int(round(area * size * size / w))))
        y0 = int(rng.integers(0, size - h + 1))
        x0 = int(rng.integers(0, size - w + 1))
        m[y0 : y0 + h, x0 : x0 + w] = 1.0
    return m


def fit_mask(mask: np.ndarray, size: int) -> np.ndarray:
    """Resize shortest edge to ``size`` (nearest) and center-crop."""
    h, w = mask.shape
    if (h, w) == (size, size):
        return mask.astype(np.float32)
    scale = size / min(h, w)
    nh, nw = max(size, round(h * scale)), max(size, round(w * scale))
    t = torch.from_numpy(mask.astype(np.float32))[None, None]
    t = F.interpolate(t, size=(nh, nw), mode="nearest")[0, 0].numpy()
    top, left = (nh - size) // 2, (nw - size) // 2
    return np.ascontiguousarray(t[top : top + size, left : left + size])


def read_mask_png(path: Path) -> np.ndarray:
    with PILImage.open(path) as im:
        return (np.asarray(im.convert("L")) > 127).astype(np.float32)


def write_mask_png(mask: np.ndarray, path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(np.asarray(mask) > 0.5).convert("1").save(path, optimize=False)


class MaskPool:
    """Per-class pool of unpaired binary masks read from ``pool/<class>/*.png``.

    Only the first ``limit`` files in sorted order are kept per class, which
    makes "n masks per class" ablations reproducible.
    """

    def __init__(self, pool_dir, size: int, limit: int | None = None):
        self.root = Path(pool_dir)
        if not self.root.is_dir():
            raise FileNotFoundError(f"mask pool directory not found: {self.root}")
        self.size = size
        self.limit = limit
        self.files: dict[str, list[Path]] = {}
        self._masks: dict[str, np.ndarray] = {}
        for d in sorted(p for p in self.root.iterdir() if p.is_dir()):
            files = sorted(d.glob("*.png"))
            if limit is not None:
                files = files[:limit]
            self.files[d.name] = files

    def masks(self, class_name: str) -> np.ndarray:
        if class_name not in self._masks:
            files = self.files.get(class_name, [])
            if not files:
                raise ValueError(f"mask pool {self.root} has no masks for class {class_name!r}")
            self._masks[class_name] = np.stack([fit_mask(read_mask_png(f), self.size) for f in files])
        return self._masks[class_name]

    def sample(self, rng: np.random.Generator, c: ClassLabel | str, flip: bool = True) -> np.ndarray:
        name = c.name if isinstance(c, ClassLabel) else c
        pool = self.masks(name)
        m = pool[rng.integers(len(pool))]
        if flip and rng.random() < 0.5:
            m = m[:, ::-1]
        return np.ascontiguousarray(m)


_POOLS: dict[tuple, MaskPool] = {}


def sample_pool_prior(rng: np.random.Generator, prior: PriorSpec, c: ClassLabel | str, size: int) -> np.ndarray:
    if prior.kind != "mask_pool":
        raise ValueError(f"sample_pool_prior needs kind='mask_pool', got {prior.kind!r}")
    key = (str(Path(prior.pool_dir).resolve()), size, prior.pool_per_class_limit)
    if key not in _POOLS:
        _POOLS[key] = MaskPool(prior.pool_dir, size, prior.pool_per_class_limit)
    return _POOLS[key].sample(rng, c, flip=prior.pool_flip)


class PriorSampler:
    """Batched prior sampling for the training loop."""

    def __init__(self, prior: PriorSpec, size: int, class_names):
        self.prior = prior
        self.size = size
        self.class_names = list(class_names)
        self.pool = None
        if prior.kind == "mask_pool":
            self.pool = MaskPool(prior.pool_dir, size, prior.pool_per_class_limit)
            for name in self.class_names:
                self.pool.masks(name)

    @property
    def active(self) -> bool:
        return self.prior.kind != "none"

    def sample(self, rng: np.random.Generator, class_indices) -> torch.Tensor:
        out = []
        for ci in class_indices:
            if self.prior.kind == "boxes":
                out.append(sample_box_prior(rng, self.prior, self.size))
            elif self.prior.kind == "mask_pool":
                out.append(self.pool.sample(rng, self.class_names[int(ci)], flip=self.prior.pool_flip))
            else:
                raise ValueError("prior kind 'none' has no samples")
        return torch.from_numpy(np.stack(out)).unsqueeze(1)
