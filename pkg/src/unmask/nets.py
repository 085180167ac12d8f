"""The five networks, built from declarative layer lists.

Every network is described by a :class:`NetworkSpec` (ordered layers with
analytic parameter counts and shape propagation) and instantiated from it, so
the declared architecture and the module that runs are the same object graph.

Widths are desk-scale defaults; the layer structure follows the reference
architecture (conv trunk, residual head with class re-injection, in-painter
with a dilated residual bottleneck, local real/fake critic, mask critic).
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

CHECKPOINT_VERSION = 1
LEAK = 0.1


@dataclass(frozen=True)
class NetConfig:
    num_classes: int = 4
    image_size: int = 64
    trunk_widths: tuple[int, ...] = (16, 32, 64, 64)
    head_widths: tuple[int, int, int] = (64, 32, 32)
    inpainter_width: int = 16
    bottleneck_dilations: tuple[int, ...] = (1, 2, 4, 8, 1, 1)
    disc_width: int = 32
    critic_width: int = 16
    perceptual_depths: tuple[int, ...] = (1, 2)
    # trunk stages that keep their max-pool inside the mask generator
    mask_gen_pooled_stages: int = 2

    def as_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass(frozen=True)
class Layer:
    kind: str
    in_ch: int
    out_ch: int
    k: int = 3
    stride: int = 1
    dilation: int = 1

    def params(self) -> int:
        if self.kind == "conv":
            return self.k * self.k * self.in_ch * self.out_ch + self.out_ch
        if self.kind == "res":
            return 2 * (9 * self.in_ch * self.in_ch + self.in_ch) + 2 * 2 * self.in_ch
        if self.kind in ("inorm", "bnorm"):
            return 2 * self.in_ch
        if self.kind == "linear":
            return self.in_ch * self.out_ch + self.out_ch
        return 0

    def out_shape(self, shape: tuple[int, ...]) -> tuple[int, ...]:
        c, h, w = shape if len(shape) == 3 else (shape[0], 1, 1)
        if c != self.in_ch and self.kind not in ("concat_class",):
            raise ValueError(f"{self.kind} expects {self.in_ch} channels, got {c}")
        if self.kind == "conv":
            if self.stride == 1:
                return (self.out_ch, h, w)
            pad = (self.k - self.stride) // 2
            return (self.out_ch, (h + 2 * pad - self.k) // self.stride + 1, (w + 2 * pad - self.k) // self.stride + 1)
        if self.kind == "maxpool":
            return (c, h // 2, w // 2)
        if self.kind == "up2":
            return (c, 2 * h, 2 * w)
        if self.kind == "concat_class":
            return (self.out_ch, h, w)
        if self.kind == "gap":
            return (c, 1, 1)
        if self.kind == "linear":
            return (self.out_ch,)
        return (self.out_ch, h, w)

    def build(self) -> nn.Module:
        k = self.kind
        if k == "conv":
            if self.stride == 1 and self.k % 2 == 0:
                lo, hi = self.k // 2 - 1, self.k // 2
                return nn.Sequential(nn.ZeroPad2d((lo, hi, lo, hi)), nn.Conv2d(self.in_ch, self.out_ch, self.k))
            if self.stride == 1:
                return nn.Conv2d(self.in_ch, self.out_ch, self.k, padding="same", dilation=self.dilation)
            return nn.Conv2d(self.in_ch, self.out_ch, self.k, stride=self.stride, padding=(self.k - self.stride) // 2)
        if k == "res":
            return ResidualBlock(self.in_ch, self.dilation)
        if k == "inorm":
            return nn.InstanceNorm2d(self.in_ch, affine=True)
        if k == "bnorm":
            return nn.BatchNorm2d(self.in_ch)
        if k == "lrelu":
            return nn.LeakyReLU(LEAK)
        if k == "maxpool":
            return nn.MaxPool2d(2)
        if k == "up2":
            return nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False)
        if k == "gap":
            return nn.AdaptiveAvgPool2d(1)
        if k == "linear":
            return nn.Sequential(nn.Flatten(), nn.Linear(self.in_ch, self.out_ch))
        if k == "sigmoid":
            return nn.Sigmoid()
        if k == "tanh":
            return nn.Tanh()
        if k == "concat_class":
            return ConcatClass()
        raise ValueError(f"unknown layer kind {k!r}")


@dataclass
class NetworkSpec:
    name: str
    in_shape: tuple[int, int, int]
    layers: list[Layer] = field(default_factory=list)

    @property
    def param_count(self) -> int:
        return sum(layer.params() for layer in self.layers)

    @property
    def out_shape(self) -> tuple[int, int, int]:
        shape = self.in_shape
        for layer in self.layers:
            shape = layer.out_shape(shape)
        return shape

    def shapes(self) -> list[tuple[int, int, int]]:
        out, shape = [], self.in_shape
        for layer in self.layers:
            shape = layer.out_shape(shape)
            out.append(shape)
        return out

    def summary(self) -> str:
        rows = [f"{self.name}: in {self.in_shape} -> out {self.out_shape}, {self.param_count} params"]
        for layer, shape in zip(self.layers, self.shapes()):
            rows.append(f"  {layer.kind:<12} {layer.in_ch:>4} -> {layer.out_ch:<4} k{layer.k} s{layer.stride} "
                        f"d{layer.dilation}  {shape}")
        return "\n".join(rows)


class ResidualBlock(nn.Module):
    def __init__(self, ch: int, dilation: int = 1):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(ch, ch, 3, padding=dilation, dilation=dilation),
            nn.InstanceNorm2d(ch, affine=True),
            nn.LeakyReLU(LEAK),
            nn.Conv2d(ch, ch, 3, padding=dilation, dilation=dilation),
            nn.InstanceNorm2d(ch, affine=True),
            nn.LeakyReLU(LEAK),
        )

    def forward(self, x):
        return x + self.body(x)


class ConcatClass(nn.Module):
    """Placeholder; the owning network concatenates the broadcast one-hot."""

    def forward(self, x, onehot):
        b, _, h, w = x.shape
        return torch.cat([x, onehot.view(b, -1, 1, 1).expand(-1, -1, h, w)], dim=1)


class SpecNet(nn.Module):
    def __init__(self, spec: NetworkSpec):
        super().__init__()
        self.spec = spec
        self.layers = nn.ModuleList(layer.build() for layer in spec.layers)

    def run(self, x, onehot=None, taps: Sequence[int] = ()):
        feats = []
        for i, (layer, mod) in enumerate(zip(self.spec.layers, self.layers)):
            x = mod(x, onehot) if layer.kind == "concat_class" else mod(x)
            if i in taps:
                feats.append(x)
        return x, feats

    def check_shapes(self):
        was_training = self.training
        self.eval()
        c, h, w = self.spec.in_shape
        x = torch.zeros(2, c, h, w)
        onehot = torch.zeros(2, max(1, self._num_classes()))
        with torch.no_grad():
            out, _ = self.run(x, onehot)
        self.train(was_training)
        if tuple(out.shape[1:]) != tuple(self.spec.out_shape):
            raise AssertionError(f"{self.spec.name}: declared {self.spec.out_shape}, forward gave {tuple(out.shape[1:])}")
        n = sum(p.numel() for p in self.parameters())
        if n != self.spec.param_count:
            raise AssertionError(f"{self.spec.name}: declared {self.spec.param_count} params, module has {n}")

    def _num_classes(self) -> int:
        return 0


def trunk_layers(widths: Sequence[int], pooled: int | None = None) -> tuple[list[Layer], list[int]]:
    """VGG-style trunk; returns layers and the index of each stage's output activation."""
    layers, taps, c = [], [], 3
    for s, w in enumerate(widths):
        layers += [Layer("conv", c, w), Layer("bnorm", w, w), Layer("lrelu", w, w),
                   Layer("conv", w, w), Layer("bnorm", w, w), Layer("lrelu", w, w)]
        taps.append(len(layers) - 1)
        if pooled is None or s < pooled:
            layers.append(Layer("maxpool", w, w))
        c = w
    return layers, taps


class ObjectClassifier(SpecNet):
    """Multi-label classifier: conv trunk, two conv-BN blocks, global pool, linear, sigmoid."""

    def __init__(self, cfg: NetConfig):
        layers, self.stage_taps = trunk_layers(cfg.trunk_widths)
        self.trunk_len = len(layers)
        w = cfg.trunk_widths[-1]
        layers += [Layer("conv", w, w), Layer("bnorm", w, w), Layer("lrelu", w, w),
                   Layer("conv", w, w), Layer("bnorm", w, w), Layer("lrelu", w, w),
                   Layer("gap", w, w), Layer("linear", w, cfg.num_classes)]
        super().__init__(NetworkSpec("object_classifier", (3, cfg.image_size, cfg.image_size), layers))
        self.cfg = cfg
        self.check_shapes()

    def logits(self, x):
        return self.run(x)[0].flatten(1)

    def forward(self, x):
        return torch.sigmoid(self.logits(x))

    def trunk_features(self, x, stages: Sequence[int]):
        taps = [self.stage_taps[s] for s in stages]
        feats = []
        for i, mod in enumerate(self.layers[: max(taps) + 1]):
            x = mod(x)
            if i in taps:
                feats.append(x)
        return feats


class FeatureExtractor(nn.Module):
    """Frozen classifier trunk used for perceptual and style terms."""

    def __init__(self, classifier: ObjectClassifier, depths: Sequence[int]):
        super().__init__()
        n = len(classifier.stage_taps)
        for d in depths:
            if not 0 <= d < n:
                raise ValueError(f"unknown feature depth {d}; trunk has stages 0..{n - 1}")
        self.depths = tuple(depths)
        self.net = copy.deepcopy(classifier)
        self.net.eval()
        for p in self.net.parameters():
            p.requires_grad_(False)

    def train(self, mode: bool = True):
        # always frozen
        return super().train(False)

    def forward(self, x):
        return self.net.trunk_features(x, self.depths)


class MaskGenerator(SpecNet):
    """Class-conditioned mask generator on an unpooled copy of the classifier trunk."""

    def __init__(self, cfg: NetConfig):
        k = cfg.num_classes
        layers, _ = trunk_layers(cfg.trunk_widths, pooled=cfg.mask_gen_pooled_stages)
        self.backbone_len = len(layers)
        c = cfg.trunk_widths[-1]
        for h in cfg.head_widths:
            layers += [Layer("concat_class", c, c + k), Layer("conv", c + k, h), Layer("lrelu", h, h), Layer("res", h, h)]
            c = h
        layers += [Layer("concat_class", c, c + k), Layer("conv", c + k, k + 1, k=7), Layer("sigmoid", k + 1, k + 1)]
        side = cfg.image_size // (2 ** cfg.mask_gen_pooled_stages)
        super().__init__(NetworkSpec("mask_generator", (3, cfg.image_size, cfg.image_size), layers))
        assert self.spec.out_shape == (k + 1, side, side)
        self.cfg = cfg
        self.check_shapes()

    def _num_classes(self) -> int:
        return self.cfg.num_classes

    def load_backbone(self, classifier: ObjectClassifier):
        """Initialize the backbone from a pretrained classifier trunk (pooling removed late)."""
        src = [m for m in classifier.layers[: classifier.trunk_len] if not isinstance(m, nn.MaxPool2d)]
        dst = [m for m in self.layers[: self.backbone_len] if not isinstance(m, nn.MaxPool2d)]
        for a, b in zip(src, dst):
            b.load_state_dict(a.state_dict())

    def train(self, mode: bool = True):
        super().train(mode)
        # backbone batch-norm statistics stay those of pretraining
        for m in self.layers[: self.backbone_len]:
            if isinstance(m, nn.BatchNorm2d):
                m.eval()
        return self

    def all_channels(self, x, class_index):
        onehot = F.one_hot(torch.as_tensor(class_index), self.cfg.num_classes).to(x.dtype)
        return self.run(x, onehot)[0]

    def forward_onehot(self, x, onehot, class_index):
        """Mask from an explicit (possibly perturbed) class vector."""
        out = self.run(x, onehot)[0]
        idx = torch.as_tensor(class_index).view(-1, 1, 1, 1).expand(-1, 1, *out.shape[-2:])
        sel = out.gather(1, idx)
        return F.interpolate(sel, size=(self.cfg.image_size,) * 2, mode="bilinear", align_corners=False)

    def forward(self, x, class_index):
        class_index = torch.as_tensor(class_index).view(-1)
        if class_index.numel() == 1 and x.shape[0] > 1:
            class_index = class_index.expand(x.shape[0])
        if int(class_index.max()) >= self.cfg.num_classes or int(class_index.min()) < 0:
            raise IndexError(f"class index outside [0, {self.cfg.num_classes})")
        onehot = F.one_hot(class_index, self.cfg.num_classes).to(x.dtype)
        return self.forward_onehot(x, onehot, class_index)


class InPainter(SpecNet):
    """Encoder / dilated residual bottleneck / bilinear decoder; output in the normalized range."""

    def __init__(self, cfg: NetConfig, mean=(0.5, 0.5, 0.5), std=(0.5, 0.5, 0.5)):
        w = cfg.inpainter_width
        L = []
        L += [Layer("conv", 4, w, k=4), Layer("inorm", w, w), Layer("lrelu", w, w)]
        c = w
        for mult in (2, 4, 8):
            L += [Layer("conv", c, w * mult, k=4, stride=2), Layer("inorm", w * mult, w * mult), Layer("lrelu", w * mult, w * mult)]
            c = w * mult
        b = w * 4
        L.append(Layer("conv", c, b, k=1))
        L += [Layer("res", b, b, dilation=d) for d in cfg.bottleneck_dilations]
        c = b
        for mult in (4, 2, 1):
            L += [Layer("up2", c, c), Layer("conv", c, w * mult), Layer("inorm", w * mult, w * mult), Layer("lrelu", w * mult, w * mult)]
            c = w * mult
        L += [Layer("conv", c, 3, k=7), Layer("tanh", 3, 3)]
        super().__init__(NetworkSpec("inpainter", (4, cfg.image_size, cfg.image_size), L))
        self.cfg = cfg
        self.register_buffer("mean", torch.tensor(mean, dtype=torch.float32).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(std, dtype=torch.float32).view(1, 3, 1, 1))
        self.check_shapes()

    def forward(self, x_masked, m):
        if x_masked.shape[-2:] != m.shape[-2:] or m.shape[1] != 1:
            raise ValueError(f"in-painter input shapes disagree: image {tuple(x_masked.shape)}, mask {tuple(m.shape)}")
        t = self.run(torch.cat([x_masked, m], dim=1))[0]
        return ((t + 1) / 2 - self.mean) / self.std


class LocalDiscriminator(SpecNet):
    """Fully convolutional real/fake critic emitting a stride-4 score map."""

    stride = 4

    def __init__(self, cfg: NetConfig):
        w = cfg.disc_width
        L = [Layer("conv", 3, w, k=4, stride=2), Layer("lrelu", w, w),
             Layer("conv", w, 2 * w, k=4, stride=2), Layer("lrelu", 2 * w, 2 * w),
             Layer("conv", 2 * w, 2 * w), Layer("lrelu", 2 * w, 2 * w),
             Layer("conv", 2 * w, 1)]
        super().__init__(NetworkSpec("local_discriminator", (3, cfg.image_size, cfg.image_size), L))
        self.cfg = cfg
        self.check_shapes()

    def forward(self, y):
        return self.run(y)[0]


class PriorCritic(SpecNet):
    """Wasserstein critic on (mask, class) pairs; unbounded scalar output."""

    def __init__(self, cfg: NetConfig):
        w, k = cfg.critic_width, cfg.num_classes
        L = [Layer("concat_class", 1, 1 + k), Layer("conv", 1 + k, w, k=4, stride=2), Layer("lrelu", w, w)]
        c, side = w, cfg.image_size // 2
        while side > 4:
            nxt = min(4 * w, 2 * c)
            L += [Layer("conv", c, nxt, k=4, stride=2), Layer("lrelu", nxt, nxt)]
            c, side = nxt, side // 2
        L += [Layer("conv", c, c, k=side, stride=side), Layer("lrelu", c, c), Layer("linear", c, 1)]
        super().__init__(NetworkSpec("prior_critic", (1, cfg.image_size, cfg.image_size), L))
        self.cfg = cfg
        self.check_shapes()

    def _num_classes(self) -> int:
        return self.cfg.num_classes

    def forward(self, m, class_index):
        class_index = torch.as_tensor(class_index).view(-1)
        if class_index.numel() == 1 and m.shape[0] > 1:
            class_index = class_index.expand(m.shape[0])
        onehot = F.one_hot(class_index, self.cfg.num_classes).to(m.dtype)
        return self.run(m, onehot)[0].view(-1)


def pool_mask(m: torch.Tensor, stride: int) -> torch.Tensor:
    return F.avg_pool2d(m, stride) if stride > 1 else m


# --- checkpoints -----------------------------------------------------------

class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path, networks: dict[str, nn.Module], optimizers: dict | None = None,
                    step: int = 0, config: dict | None = None, meta: dict | None = None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = {
        "format_version": CHECKPOINT_VERSION,
        "networks": {k: v.state_dict() for k, v in networks.items()},
        "optimizers": {k: v.state_dict() for k, v in (optimizers or {}).items()},
        "step": int(step),
        "config": config or {},
        "meta": meta or {},
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(blob, tmp)
    tmp.replace(path)


def load_checkpoint(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    blob = torch.load(path, map_location="cpu", weights_only=False)
    version = blob.get("format_version") if isinstance(blob, dict) else None
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint {path} has format version {version}, expected {CHECKPOINT_VERSION}")
    return blob
