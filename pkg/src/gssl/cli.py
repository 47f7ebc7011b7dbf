"""Command line entry point: ``gssl <subcommand> ...``.

Exit status is 0 on success, 2 for configuration/usage errors and 1 for
runtime failures.
"""

from __future__ import annotations

import argparse
import csv
import datetime as dt
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .adversarial import EVAL_PGD, PGDConfig, adversarial_train, evaluate_robust, parse_fraction
from .analysis import export_embeddings, gradcam
from .config import ConfigError, RunConfig, dump_config, load_config
from .datasets import (DATA_ROOT_ENV, NUM_CLASSES, DatasetError, ImbalanceSpec, apply_split_manifest,
                       balanced_subset, build_imbalanced, cifar_directory, dataset_checksums, imbalance_counts,
                       load_dataset, semi_split, to_tensor, write_split_manifest, write_synthetic_cifar)
from .gatenet import build_model, load_checkpoint
from .plotting import plot_class_distribution, plot_gates, save_gradcam_figure
from .semisup import train_semisup
from .train import TrainingError, evaluate, pretext_accuracy, train_supervised

log = logging.getLogger("gssl")


class UsageError(Exception):
    pass


# data / model assembly --------------------------------------------------------

def data_root(run: RunConfig | None, flag: str | None) -> str:
    root = flag or os.environ.get(DATA_ROOT_ENV) or (run.data.root if run else "")
    if not root:
        raise UsageError(f"no dataset root: pass --data-root, set ${DATA_ROOT_ENV} or data.root")
    return root


def prepare_data(run: RunConfig, root: str):
    d = run.data
    train = load_dataset(d.dataset, root, train=True, verify=d.verify)
    test = load_dataset(d.dataset, root, train=False, verify=d.verify)
    if d.split_manifest:
        train = apply_split_manifest(train, d.split_manifest)
    elif d.imbalance_rho < 1:
        spec = ImbalanceSpec(d.imbalance_rho, train.num_classes, train.class_counts(), d.imbalance_seed)
        train = build_imbalanced(train, spec)
    if d.train_limit:
        train = balanced_subset(train, d.train_limit, seed=run.train.seed)
    if d.test_limit:
        test = test.take(np.arange(min(d.test_limit, len(test))))
    return train, test


def make_model(run: RunConfig, num_classes: int):
    run.backbone.input_size = 64 if run.data.dataset == "tinyimagenet" else run.backbone.input_size
    classifier = "normed" if run.train.objective == "ldam_drw" else "linear"
    return build_model(run.backbone, num_classes, run.train.tasks, gated=run.train.gated,
                       classifier=classifier, seed=run.train.seed)


def _dataset_dir(run: RunConfig, root: str) -> Path:
    if run.data.dataset in ("cifar10", "cifar100"):
        return cifar_directory(root, run.data.dataset)
    return Path(root)


def write_run_manifest(out_dir: Path, run: RunConfig, root: str, mode: str):
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.cfg").write_text(dump_config(run))
    directory = _dataset_dir(run, root)
    sums = dataset_checksums(directory) if directory.is_dir() and run.data.dataset != "tinyimagenet" else {}
    lines = [
        f"mode={mode}",
        f"version={__version__}",
        f"seed={run.train.seed}",
        f"started={dt.datetime.now(dt.timezone.utc).isoformat()}",
        f"dataset={run.data.dataset}",
        f"dataset_root={Path(root).resolve()}",
        "config=config.cfg",
    ] + [f"md5.{name}={digest}" for name, digest in sums.items()]
    (out_dir / "manifest.txt").write_text("\n".join(lines) + "\n")


def _finish(out_dir: Path):
    (out_dir / "run_end.txt").write_text(f"finished={dt.datetime.now(dt.timezone.utc).isoformat()}\n")


def _load_run(args) -> RunConfig:
    run = load_config(args.config, args.set)
    if args.seed is not None:
        run.train.seed = args.seed
    return run


# subcommands ------------------------------------------------------------------

def cmd_train(args):
    run = _load_run(args)
    root = data_root(run, args.data_root)
    out = Path(args.out_dir)
    train, test = prepare_data(run, root)
    write_run_manifest(out, run, root, "train")
    model = make_model(run, train.num_classes)
    model, history = train_supervised(run.train, train, test, model, out_dir=out, ldam=run.ldam)
    pt = pretext_accuracy(model, test)
    with open(out / "pretext_accuracy.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["task", "accuracy"])
        w.writerows([t.value, repr(a)] for t, a in zip(model.tasks, pt))
    plot_gates(out / "metrics.csv", out / "gates.png")
    _finish(out)
    if history:
        print(f"final val_acc={history[-1].val_acc:.4f}")


def cmd_adversarial(args):
    run = _load_run(args)
    root = data_root(run, args.data_root)
    out = Path(args.out_dir)
    train, test = prepare_data(run, root)
    write_run_manifest(out, run, root, "adversarial")
    model = make_model(run, train.num_classes)
    model, _ = adversarial_train(run.train, run.pgd, train, test, model, out_dir=out, ldam=run.ldam)
    acc = evaluate_robust(model, test, EVAL_PGD, run.train.eval_batch_size, seed=run.train.seed)
    _write_kv_csv(out / "robust.csv", acc)
    plot_gates(out / "metrics.csv", out / "gates.png")
    _finish(out)
    print(" ".join(f"{k}={v:.4f}" for k, v in acc.items()))


def cmd_semisup(args):
    run = _load_run(args)
    root = data_root(run, args.data_root)
    out = Path(args.out_dir)
    train, test = prepare_data(run, root)
    labeled, unlabeled = semi_split(train, run.fixmatch.num_labeled, seed=run.train.seed)
    write_run_manifest(out, run, root, "semisup")
    write_split_manifest(out / "labeled_split.txt", labeled)
    model = make_model(run, train.num_classes)
    model, rows = train_semisup(run.train, run.fixmatch, labeled, unlabeled, test, model, out_dir=out)
    plot_gates(out / "metrics.csv", out / "gates.png")
    _finish(out)
    if rows:
        print(f"final val_acc={rows[-1]['val_acc']:.4f}")


def _eval_data(args):
    run = load_config(args.config) if args.config else RunConfig()
    if args.dataset:
        run.data.dataset = args.dataset
    root = data_root(run, args.data_root)
    return run, root


def cmd_eval(args):
    model, meta = load_checkpoint(args.checkpoint)
    run, root = _eval_data(args)
    test = load_dataset(run.data.dataset, root, train=False, verify=run.data.verify)
    if args.count:
        test = test.take(np.arange(min(args.count, len(test))))
    acc = evaluate(model, test)
    result = {"accuracy": acc}
    result.update({f"pretext_{t.value}": a for t, a in zip(model.tasks, pretext_accuracy(model, test))})
    if args.out_dir:
        Path(args.out_dir).mkdir(parents=True, exist_ok=True)
        _write_kv_csv(Path(args.out_dir) / "eval.csv", result)
    print(" ".join(f"{k}={v:.4f}" for k, v in result.items()))


def cmd_attack(args):
    model, _ = load_checkpoint(args.checkpoint)
    run, root = _eval_data(args)
    test = load_dataset(run.data.dataset, root, train=False, verify=run.data.verify)
    if args.count:
        test = test.take(np.arange(min(args.count, len(test))))
    cfg = PGDConfig(parse_fraction(args.eps), parse_fraction(args.alpha), args.steps, args.random_start)
    try:
        cfg.validate()
    except ValueError as err:
        raise ConfigError("pgd", str(err)) from None
    acc = evaluate_robust(model, test, {f"pgd{args.steps}": cfg}, seed=args.seed or 0)
    if args.out_dir:
        Path(args.out_dir).mkdir(parents=True, exist_ok=True)
        _write_kv_csv(Path(args.out_dir) / "attack.csv", acc)
    print(" ".join(f"{k}={v:.4f}" for k, v in acc.items()))


def cmd_build_imbalance(args):
    run = RunConfig()
    run.data.dataset = args.dataset
    root = data_root(run, args.data_root)
    train = load_dataset(args.dataset, root, train=True)
    spec = ImbalanceSpec(parse_fraction(args.rho), train.num_classes, train.class_counts(), args.seed)
    split = build_imbalanced(train, spec)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_split_manifest(out / "imbalance_split.txt", split)
    counts = imbalance_counts(spec)
    with open(out / "class_counts.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["class", "count"])
        w.writerows(enumerate(counts))
    plot_class_distribution(counts, out / "class_distribution.png", f"{args.dataset}, rho={args.rho}")
    print(f"wrote {len(split)} indices to {out / 'imbalance_split.txt'}")


def cmd_plot_gates(args):
    out = args.out or str(Path(args.metrics).with_name("gates.png"))
    series = plot_gates(args.metrics, out)
    print(f"plotted {len(series)} gate series to {out}")


def _parse_image_arg(item: str, test):
    if item.isdigit():
        i = int(item)
        return to_tensor(test.images[i]), int(test.indices[i])
    from PIL import Image
    arr = np.asarray(Image.open(item).convert("RGB"), dtype=np.uint8)
    return to_tensor(arr), None


def cmd_gradcam(args):
    model, _ = load_checkpoint(args.checkpoint)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    test = None
    items = [s for s in args.images.split(",") if s]
    if any(s.isdigit() for s in items):
        run, root = _eval_data(args)
        test = load_dataset(run.data.dataset, root, train=False, verify=run.data.verify)
    for n, item in enumerate(items):
        image, image_id = _parse_image_arg(item, test)
        target = args.target_class
        if target is None:
            with torch.no_grad():
                target = int(model.classify(image[None]).argmax(1))
        hm = gradcam(model, image, target, image_id)
        stem = f"gradcam_{image_id if image_id is not None else n}_class{target}"
        np.savetxt(out / f"{stem}.csv", hm.values, delimiter=",")
        save_gradcam_figure(image, hm.values, out / f"{stem}.png", f"class {target}")
    print(f"wrote {len(items)} heatmaps to {out}")


def cmd_embed(args):
    model, _ = load_checkpoint(args.checkpoint)
    run, root = _eval_data(args)
    split = load_dataset(run.data.dataset, root, train=args.split == "train", verify=run.data.verify)
    n = export_embeddings(model, split, args.count, args.out)
    print(f"wrote {n} embeddings to {args.out}")


def cmd_make_synthetic(args):
    directory = write_synthetic_cifar(args.out, args.train_per_class, args.test_per_class, seed=args.seed)
    print(f"wrote synthetic CIFAR-10-format archive to {directory}")


def _write_kv_csv(path, values: dict):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "value"])
        w.writerows([k, repr(float(v))] for k, v in values.items())


# parser -------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gssl", description="Gated self-supervised learning toolkit")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def run_parser(name, func, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", required=True)
        sp.add_argument("--out-dir", required=True)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--data-root")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key (repeatable)")
        sp.set_defaults(func=func)
        return sp

    def data_args(sp):
        sp.add_argument("--config")
        sp.add_argument("--dataset", choices=sorted(NUM_CLASSES))
        sp.add_argument("--data-root")

    run_parser("train", cmd_train, "supervised training with gated pretext heads")
    run_parser("adversarial", cmd_adversarial, "PGD adversarial training + robust evaluation")
    run_parser("semisup", cmd_semisup, "FixMatch training with the gated pretext loss")

    sp = sub.add_parser("eval", help="test accuracy of a checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--out-dir")
    sp.add_argument("--count", type=int, default=0)
    data_args(sp)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("attack", help="PGD robustness of a checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--eps", default="8/255")
    sp.add_argument("--alpha", default="2/255")
    sp.add_argument("--steps", type=int, default=20)
    sp.add_argument("--random-start", action="store_true")
    sp.add_argument("--count", type=int, default=0)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out-dir")
    data_args(sp)
    sp.set_defaults(func=cmd_attack)

    sp = sub.add_parser("build-imbalance", help="write a long-tailed split manifest")
    sp.add_argument("--dataset", default="cifar10", choices=["cifar10", "cifar100"])
    sp.add_argument("--data-root")
    sp.add_argument("--rho", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out-dir", required=True)
    sp.set_defaults(func=cmd_build_imbalance)

    sp = sub.add_parser("plot-gates", help="plot gate trajectories from a metrics CSV")
    sp.add_argument("--metrics", required=True)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_plot_gates)

    sp = sub.add_parser("analyze", help="Grad-CAM heatmaps and embedding export")
    asub = sp.add_subparsers(dest="analysis", required=True)
    g = asub.add_parser("gradcam")
    g.add_argument("--checkpoint", required=True)
    g.add_argument("--images", required=True, help="comma-separated test indices or image paths")
    g.add_argument("--class", dest="target_class", type=int)
    g.add_argument("--out-dir", required=True)
    data_args(g)
    g.set_defaults(func=cmd_gradcam)
    e = asub.add_parser("embed")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--split", choices=["train", "test"], default="test")
    e.add_argument("--count", type=int, required=True)
    e.add_argument("--out", required=True)
    data_args(e)
    e.set_defaults(func=cmd_embed)

    sp = sub.add_parser("make-synthetic", help="write a synthetic CIFAR-10-format archive")
    sp.add_argument("--out", required=True)
    sp.add_argument("--train-per-class", type=int, default=100)
    sp.add_argument("--test-per-class", type=int, default=20)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_make_synthetic)
    return p


def dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        args.func(args)
    except (ConfigError, UsageError) as err:
        print(f"gssl: config error: {err}", file=sys.stderr)
        return 2
    except (DatasetError, TrainingError, OSError, ValueError, RuntimeError) as err:
        print(f"gssl: error: {err}", file=sys.stderr)
        return 1
    return 0


def main():
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
