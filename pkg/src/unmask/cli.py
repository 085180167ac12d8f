"""Command line: ``unmask {gen-data,pretrain,train,edit,eval}``.

Exit codes: 0 success, 2 usage or precondition failure, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
from pathlib import Path

import numpy as np

log = logging.getLogger("unmask")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3


class UsageError(Exception):
    pass


def _seed_ints(seed: int, n: int) -> list[int]:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


def _apply_threads():
    n = os.environ.get("UNMASK_NUM_THREADS")
    if not n:
        return
    try:
        k = int(n)
    except ValueError:
        raise UsageError(f"UNMASK_NUM_THREADS must be a positive integer, got {n!r}") from None
    if k < 1:
        raise UsageError(f"UNMASK_NUM_THREADS must be a positive integer, got {n!r}")
    import torch

    torch.set_num_threads(k)


# --- gen-data --------------------------------------------------------------

def cmd_gen_data(args) -> int:
    from dataclasses import replace

    from .config import load_config, snapshot
    from .data import class_histogram, generate_corpus, write_dataset, write_mask_pool

    if args.classes < 2:
        raise UsageError(f"--classes must be >= 2, got {args.classes}")
    if args.num < 1:
        raise UsageError(f"--num must be >= 1, got {args.num}")
    cfg, source = load_config(args.config)
    cfg = replace(cfg, num_classes=args.classes, image_size=args.size, seed=args.seed)
    spec = cfg.scene_spec()
    classes = spec.class_table()

    out = Path(args.out)
    for d in filter(None, [out, Path(args.prior_pool_out) if args.prior_pool_out else None]):
        if d.exists() and any(d.iterdir()):
            if not args.force:
                raise UsageError(f"{d} exists and is not empty; pass --force to overwrite")
            _clear_generated(d)

    n_eval = max(1, args.num // 5)
    s_train, s_val, s_test, s_pool = _seed_ints(args.seed, 4)
    splits = {
        "train": generate_corpus(s_train, spec, args.num, "tr"),
        "val": generate_corpus(s_val, spec, n_eval, "va"),
        "test": generate_corpus(s_test, spec, n_eval, "te"),
    }
    extra = {"config": snapshot(cfg, source), "seeds": {"train": s_train, "val": s_val, "test": s_test}}
    ds = write_dataset(splits, out, classes, extra=extra)

    print(f"wrote {out}: " + ", ".join(f"{k}={v}" for k, v in ds.split_sizes().items()))
    hist = class_histogram(splits["train"], len(classes))
    print("train class histogram: " + ", ".join(f"{n}={int(c)}" for n, c in zip(classes.names, hist)))
    areas = [float(np.mean(m)) for s in splits["train"] for m in s.gt_masks.values()]
    print(f"object area fraction: mean {np.mean(areas):.3f}, min {np.min(areas):.3f}, max {np.max(areas):.3f}")
    if args.prior_pool_out:
        pool = generate_corpus(s_pool, spec, args.pool_num or args.num // 2 or 1, "pl")
        counts = write_mask_pool(pool, args.prior_pool_out)
        print(f"wrote mask pool {args.prior_pool_out}: " + ", ".join(f"{k}={v}" for k, v in sorted(counts.items())))
    return EXIT_OK


def _clear_generated(d: Path):
    """Remove a previous dataset or pool; refuse directories that look like anything else."""
    known = {"images", "masks", "manifest.json"}
    entries = {p.name for p in d.iterdir()}
    is_dataset = "manifest.json" in entries and entries <= known
    is_pool = all((d / e).is_dir() and all(f.suffix == ".png" for f in (d / e).iterdir()) for e in entries)
    if not (is_dataset or is_pool):
        raise UsageError(f"{d} does not look like a generated dataset or mask pool; refusing to overwrite it")
    for e in entries:
        p = d / e
        shutil.rmtree(p) if p.is_dir() else p.unlink()


# --- pretrain --------------------------------------------------------------

def _load_split(ds, split):
    import torch

    x, y = ds.training_arrays(split)
    return ds.normalized_tensor(x), torch.from_numpy(y)


def cmd_pretrain(args) -> int:
    from dataclasses import replace

    from .config import load_config, snapshot
    from .data import load_dataset
    from .nets import NetConfig
    from .train import pretrain_classifier, save_classifier

    cfg, source = load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    ds = load_dataset(args.data)
    x, y = _load_split(ds, "train")
    vx, vy = _load_split(ds, "val")
    net_cfg = NetConfig(num_classes=len(ds.classes), image_size=ds.image_size)

    def on_epoch(rec):
        print(f"epoch {rec['epoch']:3d}  loss {rec['train_loss']:.4f}  val macro-F1 {rec['val_macro_f1']:.4f}", flush=True)

    res = pretrain_classifier(x, y, vx, vy, net_cfg, cfg.train_config("none"), on_epoch)
    save_classifier(args.out, res, net_cfg, res.run_id, config=snapshot(cfg, source, data=ds.content_hash()),
                    classes=ds.classes.names, mean=ds.mean, std=ds.std, history=res.history)
    print(f"best epoch {res.best_epoch}: val macro-F1 {res.best_f1:.4f}; run id {res.run_id}; wrote {args.out}")
    return EXIT_OK


# --- train -----------------------------------------------------------------

def cmd_train(args) -> int:
    from dataclasses import replace

    from .config import load_config, snapshot
    from .data import load_dataset
    from .eval import latest_editor_checkpoint
    from .losses import NonFiniteLossError
    from .nets import NetConfig
    from .train import EditorTrainer, load_classifier

    cfg, source = load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if not args.classifier or not Path(args.classifier).is_file():
        raise UsageError(f"classifier checkpoint not found: {args.classifier}")
    tcfg = cfg.train_config(args.prior)
    if args.epochs is not None:
        tcfg = replace(tcfg, epochs=args.epochs)
    if args.warmup_epochs is not None:
        tcfg = replace(tcfg, warmup_epochs=args.warmup_epochs)
    ds = load_dataset(args.data)
    classifier, cmeta = load_classifier(args.classifier)
    if list(cmeta.get("classes", ds.classes.names)) != list(ds.classes.names):
        raise UsageError(f"classifier classes {cmeta.get('classes')} do not match dataset {list(ds.classes.names)}")
    x, y = _load_split(ds, "train")
    net_cfg = NetConfig(num_classes=len(ds.classes), image_size=ds.image_size)
    trainer = EditorTrainer(tcfg, net_cfg, classifier, x, y, ds.mean, ds.std, ds.classes.names, cmeta["run_id"])
    out = Path(args.out)
    if args.resume:
        ckpt = latest_editor_checkpoint(out)
        trainer.load(ckpt)
        print(f"resumed from {ckpt} at epoch {trainer.epoch}, step {trainer.step}")
    elif out.exists() and (out / "train_log.jsonl").exists():
        raise UsageError(f"{out} already holds a run; pass --resume to continue it")
    snap = snapshot(cfg, source, prior=args.prior, data=ds.content_hash(), classifier_run_id=cmeta["run_id"])

    def on_epoch(epoch, recs):
        mean = {k: float(np.mean([r[k] for r in recs])) for k in recs[0] if k not in ("epoch", "phase", "step")}
        print(f"epoch {epoch:3d} [{recs[0]['phase']}] " + " ".join(f"{k}={v:.4g}" for k, v in mean.items()), flush=True)

    try:
        trainer.train(out, snap, on_epoch)
    except NonFiniteLossError as e:
        dump = out / "nan_dump.json"
        dump.write_text(json.dumps({"term": e.term, "terms": e.terms, "epoch": trainer.epoch, "step": trainer.step}))
        print(f"aborting: {e}; loss dump written to {dump}", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"finished {trainer.epoch} epochs ({trainer.step} steps); checkpoints in {out}")
    return EXIT_OK


# --- edit ------------------------------------------------------------------

def cmd_edit(args) -> int:
    import torch
    from PIL import Image

    from .core import denormalize, normalize, to_tensor
    from .data.dataset import center_crop, resize_short_edge
    from .eval import Editor
    from .train import load_classifier

    editor = Editor.from_checkpoint(args.model, binarize=not args.soft)
    if args.cls not in editor.class_names:
        raise UsageError(f"unknown class {args.cls!r}; known classes: {', '.join(editor.class_names)}")
    c = editor.class_names.index(args.cls)
    with Image.open(args.input) as im:
        img = np.asarray(im.convert("RGB"), dtype=np.float32) / 255
    size = editor.image_size
    if img.shape[:2] != (size, size):
        log.warning("input is %dx%d; resizing and center-cropping to %dx%d", img.shape[1], img.shape[0], size, size)
        img = center_crop(resize_short_edge(img, size), size)
    x = normalize(to_tensor(img[None]), editor.mean, editor.std)
    res = editor.edit(x, torch.tensor([c]))
    out = np.clip(denormalize(res.output, editor.mean, editor.std)[0].permute(1, 2, 0).numpy(), 0, 1)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.round(out * 255).astype(np.uint8), "RGB").save(args.out)
    if args.dump_mask:
        m = res.mask[0, 0].numpy()
        if args.soft:
            Image.fromarray(np.round(m * 255).astype(np.uint8), "L").save(args.dump_mask)
        else:
            Image.fromarray(m > 0.5).convert("1").save(args.dump_mask)
    if args.classifier:
        clf, _ = load_classifier(args.classifier)
        with torch.no_grad():
            before = float(clf(x)[0, c])
            after = float(clf(res.output)[0, c])
        print(f"score[{args.cls}] before {before:.4f} after {after:.4f}")
        if before < 0.5:
            log.warning("the classifier does not detect %r in the input; the edit may be meaningless", args.cls)
    print(f"wrote {args.out} (masked area {float(res.mask.mean()) * 100:.1f}%)")
    return EXIT_OK


# --- eval ------------------------------------------------------------------

def cmd_eval(args) -> int:
    from .config import build_id, load_config, snapshot
    from .data import load_dataset
    from .eval import Editor, evaluate, feature_distance_hook, summary_row
    from .train import load_classifier

    cfg, source = load_config(args.config)
    editor = Editor.from_checkpoint(args.model)
    clf, cmeta = load_classifier(args.classifier)
    clf.class_names = cmeta.get("classes") or editor.class_names
    ds = load_dataset(args.data)
    if list(ds.classes.names) != editor.class_names:
        raise UsageError(f"dataset classes {list(ds.classes.names)} do not match the model's {editor.class_names}")
    split = args.split or cfg.eval_split
    samples = ds.samples(split)
    report = evaluate(editor, clf, samples, boundary=cfg.boundary, classifier_run_id=cmeta["run_id"],
                      perceptual=feature_distance_hook(clf),
                      config=snapshot(cfg, source, model=editor.meta.get("path"), split=split,
                                      classifier_run_id=cmeta["run_id"]),
                      build_id=build_id())
    report.write(args.report)
    print(summary_row(report, editor.meta.get("config", {}).get("prior") or ""))
    return EXIT_OK


# --- entry -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="unmask", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a shapes-world dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--num", type=int, required=True, help="training images; val and test get num/5 each")
    g.add_argument("--classes", type=int, default=4)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--config")
    g.add_argument("--prior-pool-out", help="also write an unpaired mask pool from a disjoint seed")
    g.add_argument("--pool-num", type=int, help="scenes used for the mask pool (default num/2)")
    g.add_argument("--force", action="store_true")
    g.set_defaults(fn=cmd_gen_data)

    pt = sub.add_parser("pretrain", help="train the object classifier on image-level labels")
    pt.add_argument("--data", required=True)
    pt.add_argument("--config")
    pt.add_argument("--out", required=True)
    pt.add_argument("--seed", type=int)
    pt.set_defaults(fn=cmd_pretrain)

    t = sub.add_parser("train", help="train the mask generator and in-painter")
    t.add_argument("--data", required=True)
    t.add_argument("--config")
    t.add_argument("--prior", default=None, help="none | boxes | pool:DIR (overrides the config)")
    t.add_argument("--classifier", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int, help="alternating epochs (overrides the config)")
    t.add_argument("--warmup-epochs", type=int)
    t.add_argument("--resume", action="store_true", help="continue from the latest checkpoint in --out")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("edit", help="remove one class from an image")
    e.add_argument("--model", required=True, help="run directory or editor checkpoint")
    e.add_argument("--input", required=True)
    e.add_argument("--class", dest="cls", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--dump-mask")
    e.add_argument("--soft", action="store_true", help="use and dump the raw soft mask")
    e.add_argument("--classifier", help="print this classifier's score before and after")
    e.set_defaults(fn=cmd_edit)

    v = sub.add_parser("eval", help="evaluate an editor against a separately trained classifier")
    v.add_argument("--model", required=True)
    v.add_argument("--data", required=True)
    v.add_argument("--classifier", required=True)
    v.add_argument("--report", required=True)
    v.add_argument("--config")
    v.add_argument("--split")
    v.set_defaults(fn=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")

    from .config import ConfigError
    from .data import DatasetError
    from .eval import ProtocolError
    from .nets import CheckpointError

    try:
        _apply_threads()
        return args.fn(args)
    except (UsageError, ConfigError, DatasetError, ProtocolError, CheckpointError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except FloatingPointError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
