"""Flat ``key = value`` run configuration shared by every command."""

from __future__ import annotations

import subprocess
from dataclasses import asdict, dataclass, field, fields
from functools import lru_cache
from pathlib import Path

from .core import LossWeights
from .data.priors import PriorSpec
from .data.scenes import BACKGROUND_KINDS, SceneSpec
from .train import TrainConfig


class ConfigError(ValueError):
    pass


def _doc(default, text: str):
    return field(default=default, metadata={"doc": text})


@dataclass(frozen=True)
class RunConfig:
    # scenes
    image_size: int = _doc(64, "image side in pixels")
    num_classes: int = _doc(4, "number of shape classes")
    objects_per_image: tuple[int, int] = _doc((1, 3), "min, max glyphs per scene")
    object_scale: tuple[float, float] = _doc((0.22, 0.4), "glyph radius as a fraction of the image side")
    background_kind: tuple[str, ...] = _doc(BACKGROUND_KINDS, "allowed backgrounds")
    max_class_area: float = _doc(0.30, "largest area fraction one class may cover")
    min_contrast: float = _doc(0.35, "minimum glyph/background color distance")
    # mask prior
    prior: str = _doc("none", "none | boxes | pool")
    prior_pool_dir: str = _doc("", "pool/<class>/*.png directory for the pool prior")
    pool_per_class_limit: int = _doc(0, "keep the first n masks per class (0 = all)")
    pool_flip: bool = _doc(True, "random horizontal flip of pool masks")
    box_area: tuple[float, float] = _doc((0.02, 0.3), "box prior area fraction range")
    box_aspect: tuple[float, float] = _doc((1 / 3, 3.0), "box prior aspect ratio range")
    box_rotation: tuple[float, float] = _doc((0.0, 180.0), "box prior rotation range in degrees")
    # schedule
    seed: int = _doc(0, "seed for every random stream")
    batch_size: int = _doc(32, "minibatch size")
    epochs: int = _doc(10, "alternating epochs after warmup")
    warmup_epochs: int = _doc(3, "in-painter warmup epochs on random rectangles")
    alternation_period: int = _doc(1, "epochs per phase before switching")
    first_phase: str = _doc("mask_gen", "mask_gen | inpainter")
    lr: float = _doc(1e-4, "Adam learning rate for all editor networks")
    beta1: float = _doc(0.5, "Adam beta1")
    beta2: float = _doc(0.9, "Adam beta2")
    critic_steps: int = _doc(5, "prior critic updates per mask-generator step")
    gp_coef: float = _doc(10.0, "gradient penalty weight of the prior critic")
    gp_coef_rf: float = _doc(10.0, "gradient penalty weight of the real/fake discriminator")
    buffer_capacity: int = _doc(1024, "mask buffer size")
    flip: bool = _doc(True, "random horizontal flip of training images")
    cls_epochs: int = _doc(20, "classifier pretraining epochs")
    cls_lr: float = _doc(1e-3, "classifier learning rate")
    cls_occlusion_p: float = _doc(0.5, "probability of rectangle occlusion during classifier pretraining")
    # loss weights
    lambda_c: float = _doc(12.0, "classifier loss weight")
    lambda_p: float = _doc(3.0, "mask prior loss weight")
    lambda_sz: float = _doc(18.0, "mask size penalty weight")
    lambda_rf: float = _doc(2.0, "real/fake loss weight")
    lambda_r: float = _doc(100.0, "reconstruction loss weight")
    lambda_tv: float = _doc(10.0, "total variation weight")
    lambda_sty: float = _doc(3000.0, "style loss weight")
    # evaluation
    boundary: float = _doc(0.5, "classifier decision boundary")
    eval_split: str = _doc("test", "dataset split used by eval")

    def scene_spec(self) -> SceneSpec:
        return SceneSpec(self.image_size, self.num_classes, self.objects_per_image, self.object_scale,
                         self.background_kind, self.max_class_area, self.min_contrast)

    def prior_spec(self, override: str | None = None) -> PriorSpec:
        kind, pool = self.prior, self.prior_pool_dir or None
        if override is not None:
            kind, _, rest = override.partition(":")
            pool = rest or pool
        if kind == "pool":
            kind = "mask_pool"
            if not pool:
                raise ConfigError("the pool prior needs a directory: pool:DIR or prior_pool_dir")
        else:
            pool = None
        if kind not in ("none", "boxes", "mask_pool"):
            raise ConfigError(f"unknown prior {kind!r}; use none, boxes or pool:DIR")
        return PriorSpec(kind, self.box_area, self.box_aspect, self.box_rotation, pool,
                         self.pool_per_class_limit or None, self.pool_flip)

    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_c, self.lambda_p, self.lambda_sz, self.lambda_rf, self.lambda_r,
                           self.lambda_tv, self.lambda_sty)

    def train_config(self, prior: str | None = None) -> TrainConfig:
        return TrainConfig(
            weights=self.weights(), prior=self.prior_spec(prior), seed=self.seed, batch_size=self.batch_size,
            epochs=self.epochs, warmup_epochs=self.warmup_epochs, alternation_period=self.alternation_period,
            first_phase=self.first_phase, lr=self.lr, betas=(self.beta1, self.beta2),
            critic_steps=self.critic_steps, gp_coef=self.gp_coef, gp_coef_rf=self.gp_coef_rf,
            buffer_capacity=self.buffer_capacity, flip=self.flip, cls_epochs=self.cls_epochs,
            cls_lr=self.cls_lr, cls_occlusion_p=self.cls_occlusion_p,
        )

    def as_dict(self) -> dict:
        return asdict(self)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"# {f.metadata['doc']}")
            lines.append(f"{f.name} = {_format(v)}")
        return "\n".join(lines) + "\n"


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(_format(x) for x in v)
    return str(v)


def _parse_scalar(raw: str, kind: type, key: str, lineno: int):
    try:
        if kind is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        return kind(raw)
    except ValueError:
        raise ConfigError(f"line {lineno}: {key} expects {kind.__name__}, got {raw!r}") from None


def _parse_value(raw: str, default, key: str, lineno: int):
    if isinstance(default, tuple):
        parts = [p.strip() for p in raw.split(",") if p.strip()]
        kind = type(default[0]) if default else str
        if key != "background_kind" and len(parts) != len(default):
            raise ConfigError(f"line {lineno}: {key} expects {len(default)} comma-separated values")
        return tuple(_parse_scalar(p, kind, key, lineno) for p in parts)
    return _parse_scalar(raw, type(default), key, lineno)


def parse_config(text: str) -> RunConfig:
    defaults = {f.name: f.default for f in fields(RunConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        key, sep, raw = body.partition("=")
        key, raw = key.strip(), raw.strip()
        if not sep or not key:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line.strip()!r}")
        if key not in defaults:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _parse_value(raw, defaults[key], key, lineno)
    try:
        cfg = RunConfig(**values)
        cfg.scene_spec()
        cfg.train_config("none")
    except ConfigError:
        raise
    except ValueError as e:
        raise ConfigError(str(e)) from e
    return cfg


def load_config(path) -> tuple[RunConfig, str]:
    """Parsed config plus its source text (echoed verbatim into artifacts)."""
    if path is None:
        return RunConfig(), ""
    text = Path(path).read_text(encoding="utf-8")
    return parse_config(text), text


@lru_cache(maxsize=1)
def build_id() -> str:
    """``git describe`` of the source tree when available, else the package version."""
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    from . import __version__

    return f"unmask-{__version__}"


def snapshot(cfg: RunConfig, source: str, **extra) -> dict:
    return {"resolved": cfg.as_dict(), "source": source, "build_id": build_id(), **extra}
