"""Removal and image-quality metrics, the editor wrapper, and the evaluation report."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from scipy import ndimage

from .core import ClassLabel, EditResult, binarize_mask, check_mask, compose, denormalize, is_binary, normalize, to_tensor
from .nets import InPainter, MaskGenerator, NetConfig, load_checkpoint

REPORT_SCHEMA_VERSION = 1
PSNR_CAP = 100.0


class ProtocolError(ValueError):
    pass


# --- per-sample metrics ----------------------------------------------------

def removal_success(scores_after, target: int, boundary: float = 0.5) -> bool:
    return bool(scores_after[target] < boundary)


def false_removal(scores_before, scores_after, target: int, boundary: float = 0.5) -> bool:
    before = np.asarray(scores_before) >= boundary
    after = np.asarray(scores_after) < boundary
    hit = before & after
    hit[target] = False
    return bool(hit.any())


def removal_success_batch(scores_after: np.ndarray, targets: np.ndarray, boundary: float = 0.5) -> np.ndarray:
    s = np.asarray(scores_after)
    return s[np.arange(len(s)), np.asarray(targets)] < boundary


def false_removal_batch(scores_before: np.ndarray, scores_after: np.ndarray, targets: np.ndarray,
                        boundary: float = 0.5) -> np.ndarray:
    hit = (np.asarray(scores_before) >= boundary) & (np.asarray(scores_after) < boundary)
    hit[np.arange(len(hit)), np.asarray(targets)] = False
    return hit.any(axis=1)


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    if a.shape != b.shape:
        raise ValueError(f"psnr shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10 * math.log10(peak * peak / mse))


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def ssim(a: np.ndarray, b: np.ndarray, peak: float = 1.0, win: int = 11, sigma: float = 1.5) -> float:
    """Mean local SSIM with an 11x11 Gaussian window, averaged over channels."""
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    if a.shape != b.shape:
        raise ValueError(f"ssim shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if min(a.shape[:2]) < win:
        raise ValueError(f"image {a.shape[:2]} smaller than the {win}x{win} SSIM window")
    g = _gaussian_window(win, sigma)
    c1, c2 = (0.01 * peak) ** 2, (0.03 * peak) ** 2
    pad = (win - 1) // 2

    def filt(z):
        z = ndimage.correlate1d(z, g, axis=0, mode="reflect")
        z = ndimage.correlate1d(z, g, axis=1, mode="reflect")
        return z[pad:-pad, pad:-pad]

    vals = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        mx, my = filt(x), filt(y)
        vx = filt(x * x) - mx * mx
        vy = filt(y * y) - my * my
        cxy = filt(x * y) - mx * my
        s = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
        vals.append(s.mean())
    return float(np.mean(vals))


def miou(pred: np.ndarray, gt: np.ndarray) -> float:
    """IoU of two binary masks; two empty masks count as a perfect match."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if not (is_binary(pred) and is_binary(gt)):
        raise ValueError("miou needs binary masks; binarize soft masks first")
    if pred.shape != gt.shape:
        raise ValueError(f"mask shape mismatch: {pred.shape} vs {gt.shape}")
    p, g = pred > 0, gt > 0
    union = np.count_nonzero(p | g)
    if union == 0:
        return 1.0
    return np.count_nonzero(p & g) / union


# --- editors ---------------------------------------------------------------

class Editor:
    """Inference path: soft mask, optional binarization, in-paint, composite."""

    def __init__(self, mask_fn: Callable, inpaint_fn: Callable, class_names: Sequence[str], mean, std,
                 binarize: bool = True, threshold: float = 0.5, meta: dict | None = None):
        self.mask_fn, self.inpaint_fn = mask_fn, inpaint_fn
        self.class_names = list(class_names)
        self.mean, self.std = list(mean), list(std)
        self.binarize, self.threshold = binarize, threshold
        self.meta = meta or {}

    @torch.no_grad()
    def edit(self, x: torch.Tensor, c) -> EditResult:
        c = torch.as_tensor(c).view(-1)
        if c.numel() == 1 and x.shape[0] > 1:
            c = c.expand(x.shape[0])
        soft = self.mask_fn(x, c)
        m = binarize_mask(soft, self.threshold) if self.binarize else soft
        g = self.inpaint_fn((1 - m) * x, m)
        y = compose(x, m, g)
        return EditResult(y, m, g, extra={"soft_mask": soft})

    @classmethod
    def from_checkpoint(cls, path, **kw) -> "Editor":
        path = Path(path)
        if path.is_dir():
            path = latest_editor_checkpoint(path)
        blob = load_checkpoint(path)
        meta = blob["meta"]
        if meta.get("kind") != "editor":
            raise ValueError(f"{path} is not an editor checkpoint")
        net_cfg = NetConfig.from_dict(meta["net_config"])
        gm, gi = MaskGenerator(net_cfg), InPainter(net_cfg, meta["mean"], meta["std"])
        gm.load_state_dict(blob["networks"]["G_M"])
        gi.load_state_dict(blob["networks"]["G_I"])
        gm.eval()
        gi.eval()
        info = {k: v for k, v in meta.items() if k not in ("buffer", "rng", "torch_gen")}
        info["config"] = blob.get("config", {})
        info["path"] = str(path)
        return cls(gm, gi, meta["classes"], meta["mean"], meta["std"], meta=info, **kw)

    @classmethod
    def from_trainer(cls, trainer, **kw) -> "Editor":
        trainer.G_M.eval()
        trainer.G_I.eval()
        return cls(trainer.G_M, trainer.G_I, trainer.class_names, trainer.mean, trainer.std,
                   meta={"classifier_run_id": trainer.classifier_run_id}, **kw)

    @property
    def image_size(self) -> int | None:
        cfg = getattr(self.mask_fn, "cfg", None)
        return cfg.image_size if cfg is not None else None


def identity_editor(class_names, mean, std) -> Editor:
    """Masks nothing; the output is the input."""
    return Editor(lambda x, c: torch.zeros_like(x[:, :1]), lambda xm, m: torch.zeros_like(xm), class_names, mean, std)


def full_mask_editor(class_names, mean, std) -> Editor:
    """Masks everything and fills with the dataset mean (a blind in-painter)."""
    return Editor(lambda x, c: torch.ones_like(x[:, :1]), lambda xm, m: torch.zeros_like(xm), class_names, mean, std)


def latest_editor_checkpoint(run_dir) -> Path:
    run_dir = Path(run_dir)
    direct = run_dir / "editor.pt"
    if direct.is_file():
        return direct
    ckpts = sorted(run_dir.glob("ckpt-epoch-*/editor.pt"), key=lambda p: int(p.parent.name.rsplit("-", 1)[1]))
    if not ckpts:
        raise FileNotFoundError(f"no editor checkpoint under {run_dir}")
    return ckpts[-1]


# --- report ----------------------------------------------------------------

@dataclass
class MetricsReport:
    removal_success: float | None
    removal_success_per_class: dict[str, float | None]
    false_removal_rate: float | None
    psnr_mean: float | None
    ssim_mean: float | None
    perceptual_mean: float | None
    miou: float | None
    miou_per_class: dict[str, float | None]
    masked_area_pct: float | None
    num_instances: int
    num_images: int
    num_excluded: int = 0
    boundary: float = 0.5
    config: dict = field(default_factory=dict)
    build_id: str = ""
    schema_version: int = REPORT_SCHEMA_VERSION

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        d = json.loads(text)
        if d.get("schema_version") != REPORT_SCHEMA_VERSION:
            raise ValueError(f"unsupported report schema version {d.get('schema_version')}")
        return cls(**d)

    def write(self, path):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(self.to_json())


_num = {"type": ["number", "null"]}
REPORT_SCHEMA = {
    "type": "object",
    "required": ["schema_version", "removal_success", "removal_success_per_class", "false_removal_rate",
                 "psnr_mean", "ssim_mean", "perceptual_mean", "miou", "masked_area_pct", "num_instances", "config"],
    "properties": {
        "schema_version": {"const": REPORT_SCHEMA_VERSION},
        "removal_success": {"type": ["number", "null"], "minimum": 0, "maximum": 100},
        "removal_success_per_class": {"type": "object", "additionalProperties": _num},
        "false_removal_rate": {"type": ["number", "null"], "minimum": 0, "maximum": 100},
        "psnr_mean": _num,
        "ssim_mean": {"type": ["number", "null"], "minimum": -1, "maximum": 1},
        "perceptual_mean": _num,
        "miou": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
        "miou_per_class": {"type": "object", "additionalProperties": _num},
        "masked_area_pct": {"type": ["number", "null"], "minimum": 0, "maximum": 100},
        "num_instances": {"type": "integer", "minimum": 0},
        "num_images": {"type": "integer", "minimum": 0},
        "num_excluded": {"type": "integer", "minimum": 0},
        "boundary": {"type": "number"},
        "config": {"type": "object"},
        "build_id": {"type": "string"},
    },
}

SUMMARY_COLUMNS = ("removal success", "false removal", "percep. loss", "pSNR", "ssim", "mIoU", "% masked area")


def summary_row(report: MetricsReport, name: str = "") -> str:
    def fmt(v, spec):
        return "-" if v is None else format(v, spec)

    vals = [fmt(report.removal_success, ".1f"), fmt(report.false_removal_rate, ".1f"),
            fmt(report.perceptual_mean, ".3f"), fmt(report.psnr_mean, ".2f"), fmt(report.ssim_mean, ".3f"),
            fmt(report.miou, ".3f"), fmt(report.masked_area_pct, ".1f")]
    header = " | ".join(["prior", *SUMMARY_COLUMNS])
    row = " | ".join([name or "-", *vals])
    return header + "\n" + row


def feature_distance_hook(classifier, depths: Sequence[int] = (1, 2)) -> Callable:
    """Per-sample mean L1 distance between classifier-trunk features of two batches."""

    @torch.no_grad()
    def dist(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        fx = classifier.trunk_features(x, depths)
        fy = classifier.trunk_features(y, depths)
        return torch.stack([(a - b).abs().flatten(1).mean(1) for a, b in zip(fx, fy)]).mean(0)

    return dist


def _fmean(xs) -> float | None:
    xs = list(xs)
    return math.fsum(xs) / len(xs) if xs else None


@torch.no_grad()
def evaluate(editor: Editor, classifier, samples, *, boundary: float = 0.5, batch_size: int = 64,
             classifier_run_id: str | None = None, perceptual: Callable | None = None,
             config: dict | None = None, build_id: str = "") -> MetricsReport:
    """Edit every (image, present class) pair and aggregate removal, quality and mask metrics.

    ``classifier`` must be a separately trained network, not the one the
    editor was trained against.
    """
    trained_against = editor.meta.get("classifier_run_id")
    if classifier_run_id is not None and trained_against and classifier_run_id == trained_against:
        raise ProtocolError(f"evaluation classifier {classifier_run_id} is the editor's training classifier")
    cls_classes = getattr(classifier, "class_names", None)
    if cls_classes is not None and list(cls_classes) != editor.class_names:
        raise ProtocolError(f"class table mismatch: classifier {list(cls_classes)} vs editor {editor.class_names}")
    k = len(editor.class_names)
    out_dim = getattr(getattr(classifier, "cfg", None), "num_classes", k)
    if out_dim != k:
        raise ProtocolError(f"class table mismatch: classifier has {out_dim} outputs, editor has {k} classes")
    classifier.eval()

    instances = []
    excluded = 0
    for s in sorted(samples, key=lambda s: s.id):
        for c in sorted(s.labels, key=lambda c: c.index):
            if s.gt_masks is not None and c not in s.gt_masks:
                excluded += 1
                continue
            instances.append((s, c))

    rec = {"success": [], "false": [], "psnr": [], "ssim": [], "perc": [], "iou": [], "area": [], "cls": []}
    for i in range(0, len(instances), batch_size):
        chunk = instances[i : i + batch_size]
        imgs = np.stack([s.image for s, _ in chunk])
        x = normalize(to_tensor(imgs), editor.mean, editor.std)
        c = torch.tensor([cl.index for _, cl in chunk])
        res = editor.edit(x, c)
        y = res.output
        before = classifier(x).numpy()
        after = classifier(y).numpy()
        rec["success"] += removal_success_batch(after, c.numpy(), boundary).tolist()
        rec["false"] += false_removal_batch(before, after, c.numpy(), boundary).tolist()
        if perceptual is not None:
            rec["perc"] += perceptual(x, y).tolist()
        y_disp = np.clip(denormalize(y, editor.mean, editor.std).numpy().transpose(0, 2, 3, 1), 0, 1)
        masks = binarize_mask(res.mask).numpy()[:, 0]
        for j, (s, cl) in enumerate(chunk):
            rec["psnr"].append(psnr(s.image, y_disp[j]))
            rec["ssim"].append(ssim(s.image, y_disp[j]))
            gt = s.gt_masks[cl] if s.gt_masks is not None else None
            rec["iou"].append(None if gt is None else miou(masks[j], (np.asarray(gt) > 0).astype(np.float32)))
            rec["area"].append(float(masks[j].mean()))
            rec["cls"].append(cl.name)

    names = editor.class_names
    per_class_success = {n: _fmean(100.0 * v for v, cn in zip(rec["success"], rec["cls"]) if cn == n) for n in names}
    per_class_iou = {n: _fmean(v for v, cn in zip(rec["iou"], rec["cls"]) if cn == n and v is not None) for n in names}
    present = [v for v in per_class_iou.values() if v is not None]
    return MetricsReport(
        removal_success=_fmean(100.0 * v for v in rec["success"]),
        removal_success_per_class=per_class_success,
        false_removal_rate=_fmean(100.0 * v for v in rec["false"]),
        psnr_mean=_fmean(rec["psnr"]),
        ssim_mean=_fmean(rec["ssim"]),
        perceptual_mean=_fmean(rec["perc"]) if perceptual is not None else None,
        miou=_fmean(present),
        miou_per_class=per_class_iou,
        masked_area_pct=_fmean(100.0 * v for v in rec["area"]),
        num_instances=len(instances),
        num_images=len({s.id for s, _ in instances}),
        num_excluded=excluded,
        boundary=boundary,
        config=config or {},
        build_id=build_id,
    )
