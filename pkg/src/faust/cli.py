"""Command-line entry point: ``faust {train,eval,export-embeddings,compare,selftest}``.

Exit codes: 0 success, 2 config error, 3 data error, 4 checkpoint mismatch,
5 property failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig
from .datasets import DatasetError, LabeledDataset, gaussian_blobs, load_cifar10, load_idx, _seed
from .inference import build_centroids, build_representative_refs, classify, classify_ff
from .metrics import accuracy, export_embeddings, fisher_report
from .model import CheckpointError, Network, load_checkpoint, save_checkpoint
from .tensor import DimensionError
from .trainers import Head, bp_logits, train

log = logging.getLogger("faust")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_CHECKPOINT, EXIT_PROPERTY = 0, 2, 3, 4, 5


class CliError(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


# -- data -------------------------------------------------------------------

def _limit(ds: LabeledDataset, n, seed):
    if n is None or n >= len(ds):
        return ds
    return ds.subset(np.sort(_seed(seed).choice(len(ds), size=n, replace=False)))


def load_data(cfg: RunConfig) -> tuple[LabeledDataset, LabeledDataset]:
    """Train and test sets named by ``cfg.data`` (limits applied with seeded subsets)."""
    d = cfg.data
    try:
        if d.name == "blobs":
            both = gaussian_blobs(2 * d.blob_samples, d.blob_dim, d.num_classes,
                                  d.blob_separation, rng_seed=cfg.seeds.init)
            order = _seed([cfg.seeds.init, 1]).permutation(len(both))
            train_ds = both.subset(np.sort(order[:d.blob_samples]))
            test_ds = both.subset(np.sort(order[d.blob_samples:]))
        elif d.name == "cifar10":
            if not d.train_batches or not d.test_batches:
                raise ConfigError("data: cifar10 needs train_batches and test_batches")
            train_ds, test_ds = load_cifar10(d.train_batches), load_cifar10(d.test_batches)
        else:
            train_ds = load_idx(*cfg.idx_paths("train"), num_classes=d.num_classes)
            test_ds = load_idx(*cfg.idx_paths("test"), num_classes=d.num_classes)
    except (OSError, DatasetError) as exc:
        raise CliError(EXIT_DATA, f"data error: {exc}") from exc
    return (_limit(train_ds, d.train_limit, [cfg.seeds.eval, 1]),
            _limit(test_ds, d.test_limit, [cfg.seeds.eval, 2]))


# -- commands ---------------------------------------------------------------

def _run_dir(cfg: RunConfig, out_dir=None) -> Path:
    path = Path(out_dir or cfg.out_dir or Path("runs") / (cfg.name or cfg.variant))
    path.mkdir(parents=True, exist_ok=True)
    return path


def run_train(cfg: RunConfig, out_dir=None) -> dict:
    """Train one configuration and write its artifacts; returns the summary dict."""
    out = _run_dir(cfg, out_dir)
    cfg.dump(out / "config.resolved.json")
    train_ds, test_ds = load_data(cfg)
    if cfg.variant == "ff" and train_ds.input_dim < train_ds.num_classes:
        raise CliError(EXIT_DATA, "ff needs input width >= number of classes")
    t0 = time.perf_counter()
    try:
        result = train(cfg, train_ds, test_ds, log_path=out / "epochs.csv")
    except DatasetError as exc:
        raise CliError(EXIT_DATA, f"data error: {exc}") from exc
    net = result.network
    net.meta["config"] = cfg.to_dict()
    save_checkpoint(net, out / "checkpoint.npz")
    last = result.logs[-1] if result.logs else None
    summary = {
        "name": cfg.name, "variant": cfg.variant, "dataset": cfg.data.name,
        "arch": "x".join(str(a) for a in cfg.arch), "epochs": cfg.epochs,
        "test_acc": None if last is None else last.test_acc,
        "train_acc": None if last is None else last.train_acc,
        "forward_passes": result.counter.network_passes,
        "seconds": round(time.perf_counter() - t0, 3) if cfg.log_wallclock else 0.0,
    }
    if cfg.variant.startswith("faust"):
        report = fisher_report(net, test_ds if len(test_ds) else train_ds, rng_seed=cfg.seeds.eval)
        with open(out / "fisher.csv", "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["layer", "fisher", "trace_between", "trace_within", "samples"])
            for i, fs, b, wi in report.rows():
                w.writerow([i, f"{fs:.9g}", f"{b:.9g}", f"{wi:.9g}", report.sample_count])
        summary["fisher"] = [round(v, 6) for v in report.scores]
        log.info("Fisher scores per layer:\n%s", report.table())
    lines = [f"{k}: {v}" for k, v in summary.items()]
    (out / "summary.txt").write_text("\n".join(lines) + "\n")
    return summary


def _references(net: Network, cfg: RunConfig, train_ds):
    if net.variant in ("faust_triplet", "faust_tuplet"):
        return build_centroids(net, train_ds, cfg.centroid_k, cfg.seeds.eval)
    if net.variant == "faust_representative":
        if net.representatives is None:
            raise CliError(EXIT_CHECKPOINT, "representative checkpoint without representatives")
        return build_representative_refs(net, net.representatives)
    return None


def parse_subset(text: str) -> list[int]:
    try:
        subset = [int(t) for t in text.replace("{", "").replace("}", "").split(",") if t.strip()]
    except ValueError:
        raise CliError(EXIT_CONFIG, f"bad layer subset {text!r}; use e.g. 1,2,3")
    if not subset:
        raise CliError(EXIT_CONFIG, "empty layer subset")
    return subset


def run_eval(checkpoint, cfg: RunConfig, subsets=None, predictions=None) -> list[dict]:
    """Accuracy of a checkpoint on the configured test set, per layer subset."""
    try:
        net = load_checkpoint(checkpoint)
    except CheckpointError as exc:
        raise CliError(EXIT_CHECKPOINT, str(exc)) from exc
    if net.variant in ("bp", "ff") and subsets:
        raise CliError(EXIT_CONFIG, f"variant {net.variant!r} has no layer-wise predictions; "
                                    "drop --layer-subset")
    train_ds, test_ds = load_data(cfg)
    if test_ds.input_dim != net.input_dim or test_ds.num_classes != net.num_classes:
        raise CliError(EXIT_CHECKPOINT,
                       f"checkpoint expects {net.input_dim} inputs / {net.num_classes} classes, "
                       f"dataset has {test_ds.input_dim} / {test_ds.num_classes}")
    rows = []
    if net.variant == "ff":
        preds, scores = classify_ff(net, test_ds.images, net.num_classes, return_scores=True)
        rows.append({"subset": "all", "accuracy": accuracy(preds, test_ds.labels)})
        dumps = [(preds, scores)]
    elif net.variant == "bp":
        logits, _ = bp_logits(net.layers, Head(net.head_W, net.head_b), test_ds.images)
        preds = np.argmax(logits, axis=1)
        rows.append({"subset": "all", "accuracy": accuracy(preds, test_ds.labels)})
        dumps = [(preds, logits[np.arange(len(preds)), preds])]
    else:
        refs = _references(net, cfg, train_ds)
        subsets = subsets or [list(range(1, net.num_layers + 1))]
        dumps = []
        for subset in subsets:
            if min(subset) < 1 or max(subset) > net.num_layers:
                raise CliError(EXIT_CONFIG, f"layer subset {subset} outside 1..{net.num_layers}")
            preds, scores = classify(net, refs, test_ds.images, subset,
                                     squared=cfg.squared_inference, return_scores=True)
            rows.append({"subset": "{" + ",".join(map(str, subset)) + "}",
                         "accuracy": accuracy(preds, test_ds.labels)})
            dumps.append((preds, scores))
    if predictions is not None:
        preds, scores = dumps[-1]
        with open(predictions, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["index", "true_label", "predicted_label", "score"])
            for i, (t, p, s) in enumerate(zip(test_ds.labels, preds, scores)):
                w.writerow([i, int(t), int(p), f"{float(s):.9g}"])
    return rows


COMPARE_HEADER = ["method", "dataset", "arch", "test_acc", "forward_passes", "epochs", "status"]


def run_compare(configs: list[RunConfig], out_path, run_root="runs", parallel=False) -> list[dict]:
    """Train every config (in order) and write one table row per config."""
    def job(cfg):
        try:
            s = run_train(cfg, Path(run_root) / (cfg.name or cfg.variant))
            return {"method": cfg.variant, "dataset": cfg.data.name, "arch": s["arch"],
                    "test_acc": f"{s['test_acc']:.6f}", "forward_passes": s["forward_passes"],
                    "epochs": cfg.epochs, "status": "ok"}
        except (CliError, ConfigError, DimensionError, ValueError) as exc:
            log.error("run %s failed: %s", cfg.name, exc)
            return {"method": cfg.variant, "dataset": cfg.data.name,
                    "arch": "x".join(map(str, cfg.arch)), "test_acc": "", "forward_passes": "",
                    "epochs": cfg.epochs, "status": f"error: {exc}"}

    if parallel:
        with ThreadPoolExecutor() as pool:
            rows = list(pool.map(job, configs))
    else:
        rows = [job(c) for c in configs]
    with open(out_path, "w", newline="") as f:
        w = csv.DictWriter(f, COMPARE_HEADER, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return rows


# -- argument handling ------------------------------------------------------

def _add_overrides(p):
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int, help="base seed for init/sampling/representatives/eval")
    p.add_argument("--data-dir")
    p.add_argument("--train-limit", type=int)
    p.add_argument("--test-limit", type=int)
    p.add_argument("--no-wallclock", action="store_true",
                   help="write 0 in the seconds column so reruns are byte-identical")


def _load_config(path, args) -> RunConfig:
    cfg = RunConfig.load(path)
    overrides = {k: getattr(args, k, None) for k in
                 ("lr", "batch_size", "epochs", "seed", "train_limit", "test_limit", "data_dir")}
    if getattr(args, "no_wallclock", False):
        overrides["log_wallclock"] = False
    if getattr(args, "out_dir", None):
        overrides["out_dir"] = args.out_dir
    return cfg.with_overrides(**overrides)


def build_parser():
    parser = argparse.ArgumentParser(prog="faust", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one configuration")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir")
    _add_overrides(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", help="defaults to config.resolved.json next to the checkpoint")
    p.add_argument("--layer-subset", action="append",
                   help="comma-separated 1-based layers, repeatable (e.g. 1 and 1,2,3)")
    p.add_argument("--predictions", help="write index,true_label,predicted_label,score CSV")
    _add_overrides(p)

    p = sub.add_parser("export-embeddings", help="dump per-layer embeddings to CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config")
    p.add_argument("--limit", type=int, default=1000)
    p.add_argument("--sample-seed", type=int, default=0)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--out", required=True)
    _add_overrides(p)

    p = sub.add_parser("compare", help="train several configs and tabulate test accuracy")
    p.add_argument("configs", nargs="+")
    p.add_argument("--out", default="compare.csv")
    p.add_argument("--run-root", default="runs")
    p.add_argument("--parallel", action="store_true", help="run jobs on separate threads")
    _add_overrides(p)

    p = sub.add_parser("selftest", help="run the built-in property suite")
    p.add_argument("--quick", action="store_true", help="10 instances per gradient check")
    return parser


def _checkpoint_config(args) -> RunConfig:
    path = args.config or Path(args.checkpoint).parent / "config.resolved.json"
    if not Path(path).exists():
        raise ConfigError(f"no config given and {path} does not exist")
    return _load_config(path, args)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        if args.command == "train":
            summary = run_train(_load_config(args.config, args), args.out_dir)
            print(json.dumps(summary, indent=2))
        elif args.command == "eval":
            cfg = _checkpoint_config(args)
            subsets = [parse_subset(s) for s in args.layer_subset] if args.layer_subset else None
            for row in run_eval(args.checkpoint, cfg, subsets, args.predictions):
                print(f"{row['subset']:>12}  accuracy {row['accuracy']:.4f}")
        elif args.command == "export-embeddings":
            cfg = _checkpoint_config(args)
            try:
                net = load_checkpoint(args.checkpoint)
            except CheckpointError as exc:
                raise CliError(EXIT_CHECKPOINT, str(exc)) from exc
            if net.layers[0].W2 is None:
                raise CliError(EXIT_CONFIG, f"variant {net.variant!r} has no embeddings")
            train_ds, test_ds = load_data(cfg)
            ds = test_ds if args.split == "test" else train_ds
            if ds.input_dim != net.input_dim:
                raise CliError(EXIT_CHECKPOINT, "checkpoint/dataset width mismatch")
            try:
                export_embeddings(net, ds, args.limit, args.sample_seed, args.out)
            except OSError as exc:
                raise CliError(EXIT_DATA, f"cannot write {args.out}: {exc}") from exc
            print(args.out)
        elif args.command == "compare":
            configs = [_load_config(c, args) for c in args.configs]
            rows = run_compare(configs, args.out, args.run_root, args.parallel)
            for r in rows:
                print(f"{r['method']:<22} {r['dataset']:<14} {r['arch']:<12} "
                      f"{r['test_acc']:<9} {r['forward_passes']!s:<12} {r['status']}")
        elif args.command == "selftest":
            from . import selftest
            results = selftest.run(quick=args.quick, stream=sys.stdout)
            failed = [r.name for r in results if not r.passed]
            if failed:
                print(f"FAILED: {'; '.join(failed)}", file=sys.stderr)
                return EXIT_PROPERTY
            print(f"all {len(results)} properties passed")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CliError as exc:
        print(exc, file=sys.stderr)
        return exc.code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
