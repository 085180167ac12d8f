"""Classifier pretraining and the alternating mask-generator / in-painter schedule."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import uuid
from collections import deque
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import LossWeights, compose
from .data.priors import PriorSampler, PriorSpec, sample_random_rects
from .losses import (
    LossBreakdown,
    NonFiniteLossError,
    gradient_penalty,
    loss_cls,
    loss_local_lsgan_disc,
    loss_prior_pair,
    loss_recon_terms,
    loss_rf_generator,
    loss_style,
    loss_tv,
    size_penalty,
    total_inpainter,
    total_mask_gen,
)
from .nets import (
    FeatureExtractor,
    InPainter,
    LocalDiscriminator,
    MaskGenerator,
    NetConfig,
    ObjectClassifier,
    PriorCritic,
    load_checkpoint,
    pool_mask,
    save_checkpoint,
)

log = logging.getLogger(__name__)

MASK_GEN = "mask_gen"
INPAINTER = "inpainter"


@dataclass(frozen=True)
class TrainConfig:
    weights: LossWeights = field(default_factory=LossWeights)
    prior: PriorSpec = field(default_factory=PriorSpec)
    seed: int = 0
    batch_size: int = 32
    epochs: int = 10
    warmup_epochs: int = 3
    alternation_period: int = 1
    first_phase: str = MASK_GEN
    lr: float = 1e-4
    betas: tuple[float, float] = (0.5, 0.9)
    critic_steps: int = 5
    gp_coef: float = 10.0
    gp_coef_rf: float = 10.0
    buffer_capacity: int = 1024
    recon_rect_count: tuple[int, int] = (1, 4)
    recon_rect_area: tuple[float, float] = (0.02, 0.12)
    flip: bool = True
    # classifier pretraining
    cls_epochs: int = 20
    cls_lr: float = 1e-3
    cls_occlusion_p: float = 0.5
    cls_rect_count: tuple[int, int] = (1, 3)
    cls_rect_area: tuple[float, float] = (0.02, 0.12)

    def __post_init__(self):
        for name in ("batch_size", "critic_steps", "alternation_period", "buffer_capacity", "cls_epochs"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("epochs", "warmup_epochs"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("lr", "cls_lr"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if self.first_phase not in (MASK_GEN, INPAINTER):
            raise ValueError(f"first_phase must be {MASK_GEN!r} or {INPAINTER!r}")

    def as_dict(self) -> dict:
        return asdict(self)


def param_hash(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


class MaskBuffer:
    """FIFO store of previously generated masks; samples carry no image identity."""

    def __init__(self, capacity: int = 1024):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._items: deque[torch.Tensor] = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self._items)

    def push(self, masks: torch.Tensor):
        for m in masks.detach():
            self._items.append(m.clone())

    def sample(self, n: int, generator: torch.Generator | None = None) -> torch.Tensor:
        if not self._items:
            raise IndexError("cannot sample from an empty mask buffer")
        idx = torch.randint(len(self._items), (n,), generator=generator)
        return torch.stack([self._items[i] for i in idx.tolist()])

    def state(self) -> torch.Tensor | None:
        return torch.stack(list(self._items)) if self._items else None

    def load(self, stacked: torch.Tensor | None):
        self._items.clear()
        if stacked is not None:
            self.push(stacked)


def random_rect_masks(rng: np.random.Generator, n: int, size: int, count_range, area_range) -> torch.Tensor:
    return torch.from_numpy(np.stack([sample_random_rects(rng, count_range, area_range, size) for _ in range(n)])).unsqueeze(1)


def random_flip(x: torch.Tensor, generator: torch.Generator) -> torch.Tensor:
    flip = torch.rand(x.shape[0], generator=generator) < 0.5
    return torch.where(flip.view(-1, 1, 1, 1), x.flip(-1), x)


def batches(n: int, batch_size: int, generator: torch.Generator) -> Iterator[torch.Tensor]:
    perm = torch.randperm(n, generator=generator)
    for i in range(0, n, batch_size):
        yield perm[i : i + batch_size]


def sample_targets(labels: torch.Tensor, generator: torch.Generator) -> torch.Tensor:
    """One target class per image, uniform over the classes present in it."""
    w = labels.clone()
    empty = w.sum(dim=1) == 0
    w[empty] = 1.0
    return torch.multinomial(w, 1, generator=generator).view(-1)


# --- classifier ------------------------------------------------------------

def macro_f1(scores: np.ndarray, labels: np.ndarray, boundary: float = 0.5) -> float:
    pred = np.asarray(scores) >= boundary
    gt = np.asarray(labels) > 0.5
    f1s = []
    for k in range(gt.shape[1]):
        tp = np.sum(pred[:, k] & gt[:, k])
        fp = np.sum(pred[:, k] & ~gt[:, k])
        fn = np.sum(~pred[:, k] & gt[:, k])
        denom = 2 * tp + fp + fn
        f1s.append(1.0 if denom == 0 else 2 * tp / denom)
    return float(np.mean(f1s))


@torch.no_grad()
def predict(classifier: nn.Module, images: torch.Tensor, batch_size: int = 256) -> torch.Tensor:
    was = classifier.training
    classifier.eval()
    out = torch.cat([classifier(images[i : i + batch_size]) for i in range(0, len(images), batch_size)]) \
        if len(images) else torch.zeros(0, 0)
    classifier.train(was)
    return out


@dataclass
class PretrainResult:
    classifier: ObjectClassifier
    history: list[dict]
    best_epoch: int
    best_f1: float
    run_id: str


def pretrain_classifier(train_x: torch.Tensor, train_y: torch.Tensor, val_x: torch.Tensor, val_y: torch.Tensor,
                        net_cfg: NetConfig, cfg: TrainConfig,
                        on_epoch: Callable[[dict], None] | None = None) -> PretrainResult:
    """Multi-label BCE training on rectangle-occluded images; keeps the best validation epoch."""
    k = train_y.shape[1]
    if k < 2 or int((train_y.sum(dim=0) > 0).sum()) < 2:
        raise ValueError("classifier pretraining needs at least 2 classes present in the data")
    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    net = ObjectClassifier(net_cfg)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.cls_lr)
    size = net_cfg.image_size
    history, best_state, best_f1, best_epoch = [], None, -1.0, 0
    for epoch in range(1, cfg.cls_epochs + 1):
        net.train()
        losses = []
        for idx in batches(len(train_x), cfg.batch_size, gen):
            x, y = train_x[idx], train_y[idx]
            if cfg.flip:
                x = random_flip(x, gen)
            occlude = torch.from_numpy(rng.random(len(idx)) < cfg.cls_occlusion_p).view(-1, 1, 1, 1)
            rects = random_rect_masks(rng, len(idx), size, cfg.cls_rect_count, cfg.cls_rect_area)
            x = torch.where(occlude, (1 - rects) * x, x)
            loss = F.binary_cross_entropy_with_logits(net.logits(x), y)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
        val_f1 = macro_f1(predict(net, val_x).numpy(), val_y.numpy()) if len(val_x) else float("nan")
        rec = {"epoch": epoch, "train_loss": float(np.mean(losses)), "val_macro_f1": val_f1}
        history.append(rec)
        if on_epoch:
            on_epoch(rec)
        if best_state is None or val_f1 > best_f1:
            best_f1, best_epoch = val_f1, epoch
            best_state = {k_: v.clone() for k_, v in net.state_dict().items()}
    net.load_state_dict(best_state)
    net.eval()
    run_id = f"cls-{cfg.seed}-{param_hash(net)[:12]}"
    return PretrainResult(net, history, best_epoch, best_f1, run_id)


def save_classifier(path, result_or_net, net_cfg: NetConfig, run_id: str, config: dict | None = None,
                    classes: Sequence[str] = (), mean=None, std=None, history=None):
    net = getattr(result_or_net, "classifier", result_or_net)
    meta = {"kind": "classifier", "run_id": run_id, "net_config": net_cfg.as_dict(), "classes": list(classes),
            "mean": mean, "std": std, "history": history or []}
    save_checkpoint(path, {"classifier": net}, config=config, meta=meta)


def load_classifier(path) -> tuple[ObjectClassifier, dict]:
    blob = load_checkpoint(path)
    meta = blob["meta"]
    if meta.get("kind") != "classifier":
        raise ValueError(f"{path} is not a classifier checkpoint")
    net = ObjectClassifier(NetConfig.from_dict(meta["net_config"]))
    net.load_state_dict(blob["networks"]["classifier"])
    net.eval()
    return net, meta


# --- editor ----------------------------------------------------------------

class PhaseIsolationError(AssertionError):
    pass


class EditorTrainer:
    """Owns all mutable training state: networks, optimizers, buffer, RNGs."""

    def __init__(self, cfg: TrainConfig, net_cfg: NetConfig, classifier: ObjectClassifier,
                 images: torch.Tensor, labels: torch.Tensor, mean, std,
                 class_names: Sequence[str], classifier_run_id: str = ""):
        torch.manual_seed(cfg.seed)
        self.cfg, self.net_cfg = cfg, net_cfg
        self.images, self.labels = images, labels
        self.mean, self.std = list(mean), list(std)
        self.class_names = list(class_names)
        self.classifier_run_id = classifier_run_id

        self.G_M = MaskGenerator(net_cfg)
        self.G_M.load_backbone(classifier)
        self.G_I = InPainter(net_cfg, mean, std)
        self.D_rf = LocalDiscriminator(net_cfg)
        self.D_M = PriorCritic(net_cfg)
        self.D_cls = classifier
        self.D_cls.eval()
        for p in self.D_cls.parameters():
            p.requires_grad_(False)
        self.extractor = FeatureExtractor(classifier, net_cfg.perceptual_depths)

        adam = lambda params: torch.optim.Adam(params, lr=cfg.lr, betas=cfg.betas)
        self.opt = {
            "G_M": adam(self.G_M.parameters()),
            "G_I": adam(self.G_I.parameters()),
            "D_rf": adam(self.D_rf.parameters()),
            "D_M": adam(self.D_M.parameters()),
        }
        self.buffer = MaskBuffer(cfg.buffer_capacity)
        self.prior = PriorSampler(cfg.prior, net_cfg.image_size, self.class_names)
        self.rng = np.random.default_rng(cfg.seed)
        self.gen = torch.Generator().manual_seed(cfg.seed)
        self.step = 0
        self.epoch = 0
        self.audit: Callable | None = None
        self._cls_hash = param_hash(self.D_cls)

    # -- phases ------------------------------------------------------------

    def phase_for_epoch(self, epoch: int) -> tuple[str, bool]:
        """Phase of 0-based global ``epoch``; the bool marks in-painter warmup."""
        if epoch < self.cfg.warmup_epochs:
            return INPAINTER, True
        e = epoch - self.cfg.warmup_epochs
        order = (MASK_GEN, INPAINTER) if self.cfg.first_phase == MASK_GEN else (INPAINTER, MASK_GEN)
        return order[(e // self.cfg.alternation_period) % 2], False

    @property
    def total_epochs(self) -> int:
        return self.cfg.warmup_epochs + self.cfg.epochs

    def networks(self) -> dict[str, nn.Module]:
        return {"G_M": self.G_M, "G_I": self.G_I, "D_rf": self.D_rf, "D_M": self.D_M}

    # -- mask generator ----------------------------------------------------

    def mask_gen_terms(self, x: torch.Tensor, c: torch.Tensor, m: torch.Tensor | None = None) -> tuple[dict, torch.Tensor]:
        """Loss terms for the mask generator (graph attached) and the soft masks."""
        if m is None:
            m = self.G_M(x, c)
        g = self.G_I((1 - m) * x, m)
        y = compose(x, m, g)
        score = self.D_cls(y).gather(1, c.view(-1, 1)).view(-1)
        terms = {"cls": loss_cls(score), "size": size_penalty(m)}
        if self.prior.active:
            terms["prior"] = loss_prior_pair(torch.zeros(1), self.D_M(m, c))[1]
        else:
            terms["prior"] = m.sum() * 0
        return terms, m

    def critic_update(self, m_gen: torch.Tensor, c: torch.Tensor) -> dict:
        out = {"critic": 0.0, "gp": 0.0}
        if not self.prior.active:
            return out
        self.D_M.requires_grad_(True)
        for _ in range(self.cfg.critic_steps):
            m_prior = self.prior.sample(self.rng, c.tolist())
            crit, _ = loss_prior_pair(self.D_M(m_prior, c), self.D_M(m_gen, c))
            gp = gradient_penalty(lambda z: self.D_M(z, c), m_prior, m_gen, self.gen)
            loss = -crit + self.cfg.gp_coef * gp
            self.opt["D_M"].zero_grad()
            loss.backward()
            self.opt["D_M"].step()
            out = {"critic": float(crit.detach()), "gp": float(gp.detach())}
        return out

    def train_step_mask_gen(self, x: torch.Tensor, labels: torch.Tensor) -> LossBreakdown:
        c = sample_targets(labels, self.gen)
        self.G_M.train()
        self.G_I.requires_grad_(False)
        m = self.G_M(x, c)
        critic = self.critic_update(m.detach(), c)
        self.D_M.requires_grad_(False)
        terms, m = self.mask_gen_terms(x, c, m)
        total = total_mask_gen(terms, self.cfg.weights)
        self.opt["G_M"].zero_grad()
        total.backward()
        self.opt["G_M"].step()
        self.D_M.requires_grad_(True)
        self.G_I.requires_grad_(True)
        self.buffer.push(m.detach())
        floats = {k: float(v.detach()) for k, v in terms.items()} | critic
        floats["mask_area"] = float(m.detach().mean())
        return LossBreakdown(floats, float(total.detach()), MASK_GEN)

    # -- in-painter --------------------------------------------------------

    def train_step_inpainter(self, x: torch.Tensor, labels: torch.Tensor, warmup: bool = False) -> LossBreakdown:
        cfg, b, size = self.cfg, x.shape[0], self.net_cfg.image_size
        rects = lambda: random_rect_masks(self.rng, b, size, cfg.recon_rect_count, cfg.recon_rect_area)
        self.G_I.train()

        # reconstruction stream: masks from earlier batches, never this batch's own
        m_r = rects() if warmup or len(self.buffer) == 0 else self.buffer.sample(b, self.gen)
        g_r = self.G_I((1 - m_r) * x, m_r)
        l1, perc = loss_recon_terms(g_r, x, self.extractor)
        y_r = compose(x, m_r, g_r)
        tv = loss_tv(y_r)
        sty = loss_style(y_r, x, self.extractor)

        # adversarial stream: live masks from the frozen mask generator
        if warmup:
            m_a = rects()
        else:
            c = sample_targets(labels, self.gen)
            with torch.no_grad():
                m_a = self.G_M(x, c)
        if self.audit is not None:
            self.audit(m_r, m_a)
        g_a = self.G_I((1 - m_a) * x, m_a)
        y_a = compose(x, m_a, g_a)
        m_pool = pool_mask(m_a, LocalDiscriminator.stride)

        self.D_rf.requires_grad_(True)
        d_loss = loss_local_lsgan_disc(self.D_rf(y_a.detach()), m_pool)
        gp = gradient_penalty(self.D_rf, x, y_a.detach(), self.gen) if cfg.gp_coef_rf > 0 else torch.zeros(())
        self.opt["D_rf"].zero_grad()
        (d_loss + cfg.gp_coef_rf * gp).backward()
        self.opt["D_rf"].step()
        self.D_rf.requires_grad_(False)

        terms = {"rf": loss_rf_generator(self.D_rf(y_a), m_pool), "recon_l1": l1, "recon_perc": perc,
                 "tv": tv, "style": sty}
        total = total_inpainter(terms, cfg.weights)
        self.opt["G_I"].zero_grad()
        total.backward()
        self.opt["G_I"].step()
        self.D_rf.requires_grad_(True)
        if not warmup:
            self.buffer.push(m_a)
        floats = {k: float(v.detach()) for k, v in terms.items()}
        floats |= {"d_rf": float(d_loss.detach()), "gp_rf": float(gp.detach()), "mask_area": float(m_a.detach().mean())}
        return LossBreakdown(floats, float(total.detach()), INPAINTER)

    # -- epochs ------------------------------------------------------------

    def run_epoch(self, log_fn: Callable[[dict], None] | None = None) -> list[dict]:
        phase, warmup = self.phase_for_epoch(self.epoch)
        frozen = self.G_I if phase == MASK_GEN else self.G_M
        frozen_hash = param_hash(frozen)
        records = []
        for idx in batches(len(self.images), self.cfg.batch_size, self.gen):
            x, y = self.images[idx], self.labels[idx]
            if self.cfg.flip:
                x = random_flip(x, self.gen)
            if phase == MASK_GEN:
                bd = self.train_step_mask_gen(x, y)
            else:
                bd = self.train_step_inpainter(x, y, warmup=warmup)
            self.step += 1
            if param_hash(frozen) != frozen_hash:
                raise PhaseIsolationError(f"{'G_I' if phase == MASK_GEN else 'G_M'} changed during {phase} step {self.step}")
            for k_, v in bd.terms.items():
                if not math.isfinite(v):
                    raise NonFiniteLossError(k_, bd.terms)
            rec = {"epoch": self.epoch + 1, "phase": "warmup" if warmup else phase, "step": self.step,
                   **bd.terms, "total": bd.total}
            records.append(rec)
            if log_fn:
                log_fn(rec)
        if param_hash(self.D_cls) != self._cls_hash:
            raise PhaseIsolationError("object classifier parameters changed during editor training")
        self.epoch += 1
        return records

    def train(self, out_dir=None, config_snapshot: dict | None = None,
              on_epoch: Callable[[int, list[dict]], None] | None = None, epochs: int | None = None) -> list[dict]:
        """Run the remaining schedule (or ``epochs`` more); checkpoint and log under ``out_dir``."""
        out = Path(out_dir) if out_dir is not None else None
        logf = None
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            logf = open(out / "train_log.jsonl", "a")
        trace = []
        try:
            def log_fn(rec):
                trace.append(rec)
                if logf:
                    logf.write(json.dumps(rec) + "\n")
            stop = self.total_epochs if epochs is None else min(self.total_epochs, self.epoch + epochs)
            while self.epoch < stop:
                recs = self.run_epoch(log_fn)
                if logf:
                    logf.flush()
                if out is not None:
                    self.save(out / f"ckpt-epoch-{self.epoch}" / "editor.pt", config_snapshot)
                if on_epoch:
                    on_epoch(self.epoch, recs)
        finally:
            if logf:
                logf.close()
        return trace

    # -- persistence -------------------------------------------------------

    def meta(self) -> dict:
        return {"kind": "editor", "net_config": self.net_cfg.as_dict(), "classes": self.class_names,
                "mean": self.mean, "std": self.std, "classifier_run_id": self.classifier_run_id,
                "epoch": self.epoch}

    def save(self, path, config_snapshot: dict | None = None):
        buf = self.buffer.state()
        meta = self.meta() | {
            "buffer": buf,
            "rng": self.rng.bit_generator.state,
            "torch_gen": self.gen.get_state(),
        }
        save_checkpoint(path, self.networks(), self.opt, self.step, config_snapshot, meta)

    def load(self, path):
        blob = load_checkpoint(path)
        meta = blob["meta"]
        if meta.get("kind") != "editor":
            raise ValueError(f"{path} is not an editor checkpoint")
        for k_, net in self.networks().items():
            net.load_state_dict(blob["networks"][k_])
        for k_, opt in self.opt.items():
            opt.load_state_dict(blob["optimizers"][k_])
        self.step = blob["step"]
        self.epoch = meta["epoch"]
        buf = meta.get("buffer")
        self.buffer.load(buf)
        self.rng.bit_generator.state = meta["rng"]
        self.gen.set_state(meta["torch_gen"])


def train_editor(cfg: TrainConfig, net_cfg: NetConfig, classifier: ObjectClassifier, images, labels, mean, std,
                 class_names, out_dir=None, classifier_run_id: str = "", config_snapshot=None,
                 on_epoch=None) -> tuple[EditorTrainer, list[dict]]:
    if classifier is None:
        raise ValueError("a pretrained classifier is required")
    trainer = EditorTrainer(cfg, net_cfg, classifier, images, labels, mean, std, class_names, classifier_run_id)
    trace = trainer.train(out_dir, config_snapshot, on_epoch)
    return trainer, trace
