"""Preprocessing, size filtering and on-disk dataset layout.

Layout under ``root``::

    images/<id>.png            8-bit RGB
    masks/<class>/<id>.png     1-bit ground-truth masks (evaluation only)
    manifest.json              class table, splits, per-sample labels, channel stats
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image as PILImage

from ..core import ClassTable, normalize
from .priors import read_mask_png, write_mask_png
from .scenes import LabeledSample

MANIFEST_VERSION = 1


class DatasetError(RuntimeError):
    pass


def resize_short_edge(img: np.ndarray, size: int) -> np.ndarray:
    h, w = img.shape[:2]
    if min(h, w) == size:
        return img
    scale = size / min(h, w)
    nh, nw = max(size, round(h * scale)), max(size, round(w * scale))
    t = torch.from_numpy(np.ascontiguousarray(img, dtype=np.float32)).permute(2, 0, 1)[None]
    t = F.interpolate(t, size=(nh, nw), mode="bilinear", align_corners=False, antialias=True)
    return t[0].permute(1, 2, 0).numpy()


def center_crop(img: np.ndarray, size: int) -> np.ndarray:
    h, w = img.shape[:2]
    top, left = (h - size) // 2, (w - size) // 2
    return img[top : top + size, left : left + size]


def preprocess(raw: np.ndarray, train_mode: bool, rng: np.random.Generator | None,
               size: int, mean, std) -> np.ndarray:
    """Short edge to ``size``, center crop, optional flip, per-channel normalization."""
    img = np.asarray(raw, dtype=np.float32)
    if img.ndim == 2:
        img = img[..., None]
    if min(img.shape[:2]) < 1:
        raise ValueError(f"image has an empty side: {img.shape}")
    img = center_crop(resize_short_edge(img, size), size)
    if train_mode and rng is not None and rng.random() < 0.5:
        img = img[:, ::-1]
    return normalize(np.ascontiguousarray(img), mean, std).astype(np.float32)


def filter_oversized(sample: LabeledSample, max_frac: float = 0.30) -> bool:
    """True to keep the sample; False when one class covers more than ``max_frac``."""
    if sample.gt_masks is None:
        raise ValueError(f"sample {sample.id!r} has no gt_masks; size filtering needs them")
    for m in sample.gt_masks.values():
        if float(np.mean(m)) > max_frac:
            return False
    return True


def channel_stats(images: np.ndarray) -> tuple[list[float], list[float]]:
    x = np.asarray(images, dtype=np.float64).reshape(-1, images.shape[-1])
    std = np.maximum(x.std(axis=0), 1e-6)
    return x.mean(axis=0).tolist(), std.tolist()


def _read_rgb(path: Path) -> np.ndarray:
    try:
        with PILImage.open(path) as im:
            return (np.asarray(im.convert("RGB"), dtype=np.float32) / 255).astype(np.float32)
    except FileNotFoundError:
        raise
    except Exception as e:  # PIL raises a variety of errors on corrupt files
        raise DatasetError(f"cannot read image {path}: {e}") from e


def _write_rgb(img: np.ndarray, path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    a = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)
    PILImage.fromarray(a, "RGB").save(path, optimize=False)


@dataclass
class SampleRecord:
    id: str
    image: str
    labels: list[str]
    masks: dict[str, str] = field(default_factory=dict)


@dataclass
class DatasetManifest:
    root: Path
    classes: ClassTable
    splits: dict[str, list[SampleRecord]]
    mean: list[float]
    std: list[float]
    image_size: int
    extra: dict = field(default_factory=dict)

    def split_sizes(self) -> dict[str, int]:
        return {k: len(v) for k, v in self.splits.items()}

    def load_sample(self, rec: SampleRecord, with_masks: bool = True) -> LabeledSample:
        img = _read_rgb(self.root / rec.image)
        labels = frozenset(self.classes.label(n) for n in rec.labels)
        masks = None
        if with_masks:
            masks = {self.classes.label(c): read_mask_png(self.root / p).astype(np.uint8) for c, p in rec.masks.items()}
        return LabeledSample(img, labels, masks, rec.id)

    def samples(self, split: str = "train", with_masks: bool = True) -> list[LabeledSample]:
        return [self.load_sample(r, with_masks) for r in self.splits.get(split, [])]

    def training_arrays(self, split: str = "train") -> tuple[np.ndarray, np.ndarray]:
        """Display-range images ``N x H x W x 3`` and multi-hot labels; never touches masks."""
        recs = self.splits.get(split, [])
        k = len(self.classes)
        if not recs:
            return np.zeros((0, self.image_size, self.image_size, 3), np.float32), np.zeros((0, k), np.float32)
        imgs = np.stack([_read_rgb(self.root / r.image) for r in recs])
        labels = np.zeros((len(recs), k), np.float32)
        for i, r in enumerate(recs):
            for n in r.labels:
                labels[i, self.classes.label(n).index] = 1
        return imgs, labels

    def normalized_tensor(self, images: np.ndarray) -> torch.Tensor:
        from ..core import to_tensor

        return normalize(to_tensor(images), self.mean, self.std)

    def content_hash(self) -> str:
        return hashlib.sha256((self.root / "manifest.json").read_bytes()).hexdigest()


def write_dataset(splits: Mapping[str, Sequence[LabeledSample]] | Sequence[LabeledSample], root,
                  classes: ClassTable, extra: dict | None = None, stats_split: str = "train") -> DatasetManifest:
    root = Path(root)
    if not isinstance(splits, Mapping):
        splits = {"train": list(splits)}
    root.mkdir(parents=True, exist_ok=True)
    (root / "images").mkdir(exist_ok=True)
    records: dict[str, list[SampleRecord]] = {}
    size = 0
    for split, samples in splits.items():
        recs = []
        for s in samples:
            if not s.id:
                raise ValueError("every sample needs an id to be written")
            img_rel = f"images/{s.id}.png"
            _write_rgb(s.image, root / img_rel)
            size = s.image.shape[0]
            masks = {}
            for c, m in sorted((s.gt_masks or {}).items(), key=lambda kv: kv[0].index):
                rel = f"masks/{c.name}/{s.id}.png"
                write_mask_png(m, root / rel)
                masks[c.name] = rel
            recs.append(SampleRecord(s.id, img_rel, sorted((c.name for c in s.labels), key=classes.names.index), masks))
        records[split] = recs
    stat_samples = splits.get(stats_split) or [s for v in splits.values() for s in v]
    if stat_samples:
        mean, std = channel_stats(np.stack([s.image for s in stat_samples]))
    else:
        mean, std = [0.5, 0.5, 0.5], [0.25, 0.25, 0.25]
    doc = {
        "version": MANIFEST_VERSION,
        "classes": list(classes.names),
        "image_size": size,
        "stats": {"mean": mean, "std": std},
        "splits": {k: [vars(r) for r in v] for k, v in records.items()},
        "extra": extra or {},
    }
    (root / "manifest.json").write_text(json.dumps(doc, indent=1, sort_keys=True))
    return load_dataset(root)


def load_dataset(root) -> DatasetManifest:
    root = Path(root)
    path = root / "manifest.json"
    if not path.is_file():
        raise DatasetError(f"manifest not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise DatasetError(f"corrupt manifest {path}: {e}") from e
    if doc.get("version") != MANIFEST_VERSION:
        raise DatasetError(f"unsupported manifest version {doc.get('version')} in {path}")
    classes = ClassTable(doc["classes"])
    splits = {}
    for split, recs in doc["splits"].items():
        out = []
        for r in recs:
            rec = SampleRecord(r["id"], r["image"], list(r["labels"]), dict(r.get("masks", {})))
            for rel in [rec.image, *rec.masks.values()]:
                if not (root / rel).is_file():
                    raise DatasetError(f"missing file referenced by manifest: {root / rel}")
            for n in rec.labels:
                if n not in classes.names:
                    raise DatasetError(f"sample {rec.id} has unknown label {n!r}")
            out.append(rec)
        splits[split] = out
    return DatasetManifest(root, classes, splits, doc["stats"]["mean"], doc["stats"]["std"],
                           int(doc.get("image_size", 0)), doc.get("extra", {}))


def write_mask_pool(samples: Sequence[LabeledSample], pool_dir) -> dict[str, int]:
    """Write every class mask of ``samples`` as ``pool/<class>/<id>.png``."""
    pool_dir = Path(pool_dir)
    counts: dict[str, int] = {}
    for s in samples:
        for c, m in (s.gt_masks or {}).items():
            write_mask_png(m, pool_dir / c.name / f"{s.id}.png")
            counts[c.name] = counts.get(c.name, 0) + 1
    return counts
