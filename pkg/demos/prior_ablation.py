"""Train one editor per mask prior (none, boxes, pool) and print the comparison table.

Expects a dataset, a mask pool and two classifiers made with the CLI, e.g. after demos/quickstart.sh:

    python demos/prior_ablation.py /tmp/unmask-quickstart --epochs 2

The editor is trained against ``cls_train.pt`` and judged by ``cls_eval.pt``. Without a prior the
mask generator is free to paint large blobs; boxes and real object silhouettes pull masks toward
compact, object-shaped regions, which shows up as a smaller masked area and a higher mIoU.
"""
import argparse
from pathlib import Path

import torch

from unmask.data import PriorSpec, load_dataset
from unmask.eval import Editor, evaluate, identity_editor, summary_row
from unmask.nets import NetConfig
from unmask.train import EditorTrainer, TrainConfig, load_classifier


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("workspace", type=Path)
    ap.add_argument("--epochs", type=int, default=10)
    ap.add_argument("--warmup-epochs", type=int, default=3)
    args = ap.parse_args()
    w = args.workspace

    ds = load_dataset(w / "data")
    x, y = ds.training_arrays("train")
    x, y = ds.normalized_tensor(x), torch.from_numpy(y)
    test = ds.samples("test")
    judge, judge_meta = load_classifier(w / "cls_eval.pt")
    net_cfg = NetConfig(num_classes=len(ds.classes), image_size=ds.image_size)

    rows = [summary_row(evaluate(identity_editor(ds.classes.names, ds.mean, ds.std), judge, test,
                                 classifier_run_id=judge_meta["run_id"]), "identity")]
    arms = {"none": PriorSpec(), "boxes": PriorSpec("boxes"), "pool": PriorSpec("mask_pool", pool_dir=str(w / "pool"))}
    for name, prior in arms.items():
        # a fresh classifier copy per arm: the trainer freezes it and borrows its trunk
        cls, meta = load_classifier(w / "cls_train.pt")
        cfg = TrainConfig(prior=prior, epochs=args.epochs, warmup_epochs=args.warmup_epochs)
        trainer = EditorTrainer(cfg, net_cfg, cls, x, y, ds.mean, ds.std, ds.classes.names, meta["run_id"])
        trainer.train(on_epoch=lambda ep, recs: print(f"{name}: epoch {ep} [{recs[0]['phase']}]", flush=True))
        rep = evaluate(Editor.from_trainer(trainer), judge, test, classifier_run_id=judge_meta["run_id"])
        rows.append(summary_row(rep, name))

    print(rows[0].splitlines()[0])
    for r in rows:
        print(r.splitlines()[1])


if __name__ == "__main__":
    main()
