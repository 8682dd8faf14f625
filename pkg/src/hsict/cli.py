"""Command-line entry point: ``hsict {train,eval,gradcheck,features,predict}``.

Exit codes: 0 success, 1 check failure, 2 usage or config error,
3 runtime abort.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import CLASS_NAMES, RunConfig, from_dict, load_run_config, to_dict
from .errors import (CheckpointFormatError, ConfigError, DimensionError, HsictError, TrainingAbort,
                     TruncatedCheckpointError)

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_ABORT = 0, 1, 2, 3
log = logging.getLogger("hsict")


class UsageError(Exception):
    pass


@contextlib.contextmanager
def _thread_limits():
    """Cap BLAS threads: HSICT_THREADS=0 (default) runs single-threaded."""
    from .train import worker_threads

    n = worker_threads()
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        yield
        return
    with threadpool_limits(limits=max(1, n)):
        yield


# -- shared helpers ----------------------------------------------------------------------

def _run_config(args, toy: bool) -> RunConfig:
    overrides = list(args.set or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"train.seed={args.seed}")
    if getattr(args, "epochs", None) is not None:
        overrides.append(f"train.epochs={args.epochs}")
    return load_run_config(args.config, overrides, RunConfig.toy() if toy else RunConfig())


def _load_samples(cfg: RunConfig, toy: bool, root: str | None = None):
    from .data import load_dataset, synth_toy_dataset

    if toy:
        if cfg.data.toy_size != cfg.model.image_size:
            raise ConfigError(f"data.toy_size {cfg.data.toy_size} differs from model.image_size "
                              f"{cfg.model.image_size}")
        return synth_toy_dataset(cfg.data.toy_per_class, cfg.data.toy_size, cfg.train.seed,
                                 cfg.data.mean, cfg.data.std)
    root = root or cfg.data.root
    if not root:
        raise UsageError("no dataset root: set data.root, pass --data, or use --toy")
    if not Path(root).is_dir():
        raise UsageError(f"dataset root {root} does not exist")
    return load_dataset(root, cfg.model.image_size, cfg.data.mean, cfg.data.std)


def _pick_split(samples, cfg: RunConfig, split: str):
    from .train import split_dataset

    if split == "all":
        return list(samples)
    train, val, test = split_dataset(samples, cfg.train.seed)
    return {"train": train, "val": val, "test": test}[split]


def _load_model(ckpt_path: str, expected: RunConfig | None = None):
    from .checkpoint import load_checkpoint, read_checkpoint
    from .model import HsictModel

    path = Path(ckpt_path)
    if not path.is_file():
        raise UsageError(f"checkpoint {path} not found")
    echo = read_checkpoint(path).config
    try:
        cfg = from_dict(RunConfig, echo)
    except ConfigError as e:
        raise CheckpointFormatError(f"{path}: unreadable config echo: {e}") from None
    model = HsictModel(cfg.model, seed=cfg.train.seed, dropout=cfg.train.dropout)
    load_checkpoint(path, model, expected_config=to_dict(expected) if expected is not None else None)
    return model, cfg


def _expected_config(args) -> RunConfig | None:
    if args.config is None and not args.set:
        return None
    return load_run_config(args.config, args.set or [], RunConfig.toy() if args.toy else RunConfig())


# -- commands ------------------------------------------------------------------------------

def cmd_train(args) -> int:
    from .data import balance_classes
    from .train import evaluate, split_dataset, train, write_history

    cfg = _run_config(args, args.toy)
    samples = _load_samples(cfg, args.toy)
    tr, va, te = split_dataset(samples, cfg.train.seed)
    if cfg.data.balance_target:
        tr = balance_classes(tr, cfg.data.balance_target, cfg.data.augment, cfg.train.seed)
    log.info("split sizes train %d / val %d / test %d", len(tr), len(va), len(te))

    from .model import HsictModel

    model = HsictModel(cfg.model, seed=cfg.train.seed, dropout=cfg.train.dropout)
    ckpt = Path(cfg.io.checkpoint_dir) / "best.hsct"
    result = train(model, tr, va, cfg, checkpoint_path=ckpt)
    reports = Path(cfg.io.report_dir)
    write_history(result.history, reports / "history.csv")
    rep = evaluate(model, te, cfg.train.batch_size, to_dict(cfg))
    rep.write(reports, "test_report")
    print(rep.table())
    print(f"best epoch {result.best_epoch} (val acc {result.best_val_acc:.2f}); checkpoint {ckpt}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .train import evaluate

    model, cfg = _load_model(args.checkpoint, _expected_config(args))
    samples = _pick_split(_load_samples(cfg, args.toy, args.data), cfg, args.split)
    rep = evaluate(model, samples, cfg.train.batch_size, to_dict(cfg))
    out = Path(args.out or cfg.io.report_dir)
    paths = rep.write(out, f"eval_{args.split}")
    print(rep.table())
    print(f"report written to {paths['json']}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .suite import run_case, select

    try:
        cases = select(args.scope or ["all"])
    except KeyError as e:
        raise UsageError(str(e.args[0])) from None
    failed = []
    for case in cases:
        worst = 0.0
        for seed in range(args.seeds):
            rep = run_case(case, seed, args.tol)
            worst = max(worst, rep.max_rel_err)
            for w in rep.failures():
                failed.append(f"{case.name} seed {seed}: param {w.name} index {w.index} "
                              f"analytic {w.analytic:.6g} numeric {w.numeric:.6g} rel {w.rel_err:.3g}")
        tol = case.tol if args.tol is None else args.tol
        status = "ok" if worst <= tol else "FAIL"
        print(f"{case.name:<28} worst rel err {worst:.3e}  tol {tol:.0e}  {status}")
    if failed:
        print("\nfailures:")
        for line in failed:
            print("  " + line)
        return EXIT_CHECK
    return EXIT_OK


def cmd_features(args) -> int:
    from .metrics import pca_project

    model, cfg = _load_model(args.checkpoint, _expected_config(args))
    samples = _pick_split(_load_samples(cfg, args.toy, args.data), cfg, args.split)
    if not samples:
        raise HsictError("no samples to embed")
    x = np.concatenate([s.image for s in samples])
    labels = [s.label for s in samples]
    _, feats = model.predict(x, cfg.train.batch_size)
    out = Path(args.out or cfg.io.report_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "features.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow([f"f{i}" for i in range(feats.shape[1])] + ["label"])
        for row, y in zip(feats.astype(np.float64), labels):
            w.writerow([repr(float(v)) for v in row] + [y])
    pca = pca_project(feats, args.pca)
    with open(out / "pca.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow([f"pc{i + 1}" for i in range(args.pca)] + ["label"])
        for row, y in zip(pca.projections, labels):
            w.writerow([repr(float(v)) for v in row] + [y])
    ratios = ", ".join(f"{r:.3f}" for r in pca.explained_variance_ratio)
    print(f"{len(samples)} samples, {feats.shape[1]} features; explained variance ratio {ratios}")
    return EXIT_OK


def cmd_predict(args) -> int:
    from .data import DecodeError, normalize_pixels, read_image, resize_bilinear

    model, cfg = _load_model(args.checkpoint)
    try:
        rgb = read_image(args.image)
    except (DecodeError, OSError) as e:
        raise UsageError(f"cannot decode {args.image}: {e}") from None
    size = cfg.model.image_size
    img = resize_bilinear(normalize_pixels(rgb, cfg.data.mean, cfg.data.std, np.float64), (size, size))
    probs, _ = model.predict(img.astype(model.dtype))
    p = probs[0].astype(np.float64)
    for name, v in zip(CLASS_NAMES, p):
        print(f"{name:<12} {v:.8f}")
    print(f"prediction: {CLASS_NAMES[int(np.argmax(p))]}")
    return EXIT_OK


# -- parser -----------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hsict", description="Hybrid CNN-transformer skin lesion classifier")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    def config_opts(p):
        p.add_argument("--config", help="JSON run config")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override, e.g. train.lr0=0.01")
        p.add_argument("--toy", action="store_true", help="use the in-memory synthetic dataset")

    p = sub.add_parser("train", help="train a model and evaluate it on the test split")
    config_opts(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_train)

    for name, func, helptext in (("eval", cmd_eval, "evaluate a checkpoint"),
                                 ("features", cmd_features, "export penultimate features and PCA")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("checkpoint")
        config_opts(p)
        p.add_argument("--data", help="dataset root (default: data.root from the checkpoint config)")
        p.add_argument("--split", choices=("train", "val", "test", "all"), default="test" if name == "eval" else "all")
        p.add_argument("--out", help="output directory (default: io.report_dir)")
        if name == "features":
            p.add_argument("--pca", type=int, default=2, metavar="K")
        p.set_defaults(func=func)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("scope", nargs="*", help="case name, family prefix, 'ops', 'composites' or 'all'")
    p.add_argument("--tol", type=float, help="override every case tolerance")
    p.add_argument("--seeds", type=int, default=3)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("predict", help="class probabilities for one image")
    p.add_argument("checkpoint")
    p.add_argument("image")
    p.set_defaults(func=cmd_predict)
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limits():
            return args.func(args)
    except (UsageError, ConfigError, CheckpointFormatError, TruncatedCheckpointError, DimensionError,
            FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingAbort as e:
        print(f"training aborted: {e}", file=sys.stderr)
        return EXIT_ABORT
    except (HsictError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ABORT


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":  # pragma: no cover
    run()
