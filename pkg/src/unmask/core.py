"""Value types and the mask/image algebra shared by every other module.

Array conventions:

* numpy images are ``H x W x C`` float arrays in the display range [0, 1];
* torch images are ``N x C x H x W`` tensors in the normalized range;
* masks are ``H x W`` (numpy) or ``N x 1 x H x W`` (torch), values in [0, 1].

All functions here accept either backend and never mutate their inputs.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Sequence

import numpy as np
import torch

DEFAULT_THRESHOLD = 0.5


class ShapeMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class ClassLabel:
    index: int
    name: str


class ClassTable:
    """Ordered, immutable mapping between class names and indices."""

    def __init__(self, names: Sequence[str]):
        names = list(names)
        if len(names) < 2:
            raise ValueError(f"need at least 2 classes, got {len(names)}")
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate class names in {names}")
        self._names = tuple(names)
        self._index = {n: i for i, n in enumerate(names)}

    @property
    def names(self) -> tuple[str, ...]:
        return self._names

    def __len__(self) -> int:
        return len(self._names)

    def __iter__(self):
        return (ClassLabel(i, n) for i, n in enumerate(self._names))

    def __eq__(self, other) -> bool:
        return isinstance(other, ClassTable) and self._names == other._names

    def __repr__(self) -> str:
        return f"ClassTable({list(self._names)})"

    def label(self, key: int | str) -> ClassLabel:
        if isinstance(key, str):
            if key not in self._index:
                raise KeyError(f"unknown class {key!r}; known classes: {', '.join(self._names)}")
            return ClassLabel(self._index[key], key)
        if not 0 <= key < len(self._names):
            raise IndexError(f"class index {key} outside [0, {len(self._names)})")
        return ClassLabel(int(key), self._names[key])


@dataclass(frozen=True)
class LossWeights:
    lambda_c: float = 12.0
    lambda_p: float = 3.0
    lambda_sz: float = 18.0
    lambda_rf: float = 2.0
    lambda_r: float = 100.0
    lambda_tv: float = 10.0
    lambda_sty: float = 3000.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{f.name} must be finite and >= 0, got {v}")

    def as_dict(self) -> dict[str, float]:
        return asdict(self)


@dataclass
class EditResult:
    """Output of one edit: ``output == compose(input, mask, inpainted_full)``."""

    output: Any
    mask: Any
    inpainted_full: Any
    target: ClassLabel | None = None
    extra: dict = field(default_factory=dict)


def _spatial(a) -> tuple[int, int]:
    # numpy: (H, W) or (H, W, C); torch: (N, C, H, W) or (N, H, W)/(H, W)
    if isinstance(a, torch.Tensor):
        return tuple(a.shape[-2:])
    if a.ndim == 3:
        return a.shape[:2]
    return a.shape[-2:]


def check_mask(m, binary: bool = False):
    if isinstance(m, torch.Tensor):
        lo, hi = float(m.min()), float(m.max())
        finite = bool(torch.isfinite(m).all())
    else:
        m = np.asarray(m)
        lo, hi = float(m.min()), float(m.max())
        finite = bool(np.isfinite(m).all())
    if not finite or lo < 0 or hi > 1:
        raise ValueError(f"mask values must lie in [0, 1], got range [{lo}, {hi}]")
    if binary and not is_binary(m):
        raise ValueError("expected a binary mask (values in {0, 1}); binarize it first")
    return m


def is_binary(m) -> bool:
    if isinstance(m, torch.Tensor):
        return bool(((m == 0) | (m == 1)).all())
    m = np.asarray(m)
    return bool(np.isin(m, (0, 1)).all())


def invert_mask(m):
    """``1 - m``, computed in float64.

    Single-precision masks are promoted so that the complement is exact and
    ``invert_mask(invert_mask(m)) == m`` holds bit for bit.
    """
    if isinstance(m, torch.Tensor):
        return 1 - m.double()
    return 1 - np.asarray(m, dtype=np.float64)


def binarize_mask(m, threshold: float = DEFAULT_THRESHOLD):
    if not 0 < threshold < 1:
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    if isinstance(m, torch.Tensor):
        return (m >= threshold).to(m.dtype if m.is_floating_point() else torch.float32)
    m = np.asarray(m)
    dtype = m.dtype if np.issubdtype(m.dtype, np.floating) else np.float32
    return (m >= threshold).astype(dtype)


def masked_area_fraction(m) -> float:
    if isinstance(m, torch.Tensor):
        return float(m.double().mean())
    return float(np.asarray(m, dtype=np.float64).mean())


def compose(x, m, g):
    """Keep ``x`` where the mask is 0 and take ``g`` where it is 1.

    ``y = (1 - m) * x + m * g`` with the mask broadcast over channels. Where
    ``m`` is exactly 0 or 1 the result is bit-identical to ``x`` or ``g``.
    """
    if x.shape != g.shape:
        raise ShapeMismatchError(f"image shape {tuple(x.shape)} != in-painted shape {tuple(g.shape)}")
    if _spatial(x) != _spatial(m):
        raise ShapeMismatchError(f"image shape {tuple(x.shape)} incompatible with mask shape {tuple(m.shape)}")
    if isinstance(x, torch.Tensor):
        if m.dim() == x.dim() - 1:
            m = m.unsqueeze(-3)
        return torch.where(m == 0, x, torch.where(m == 1, g, (1 - m) * x + m * g))
    x, g, m = np.asarray(x), np.asarray(g), np.asarray(m)
    if m.ndim == x.ndim - 1:
        m = m[..., None]
    return np.where(m == 0, x, np.where(m == 1, g, (1 - m) * x + m * g))


def normalize(img, mean, std):
    """Display [0, 1] -> zero-mean / unit-variance per channel."""
    if isinstance(img, torch.Tensor):
        mean = torch.as_tensor(mean, dtype=img.dtype).view(-1, 1, 1)
        std = torch.as_tensor(std, dtype=img.dtype).view(-1, 1, 1)
        return (img - mean) / std
    return (np.asarray(img) - np.asarray(mean)) / np.asarray(std)


def denormalize(img, mean, std):
    if isinstance(img, torch.Tensor):
        mean = torch.as_tensor(mean, dtype=img.dtype).view(-1, 1, 1)
        std = torch.as_tensor(std, dtype=img.dtype).view(-1, 1, 1)
        return img * std + mean
    return np.asarray(img) * np.asarray(std) + np.asarray(mean)


def to_tensor(images: np.ndarray) -> torch.Tensor:
    """``(N,) H x W x C`` numpy -> ``N x C x H x W`` float32 tensor."""
    a = np.asarray(images, dtype=np.float32)
    if a.ndim == 3:
        a = a[None]
    return torch.from_numpy(np.ascontiguousarray(a.transpose(0, 3, 1, 2)))


def to_numpy(images: torch.Tensor) -> np.ndarray:
    """``N x C x H x W`` tensor -> ``N x H x W x C`` numpy."""
    return images.detach().cpu().numpy().transpose(0, 2, 3, 1)
