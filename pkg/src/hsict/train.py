"""Loss, Adam with step-decay schedule, dataset splitting and the
training / evaluation loops."""

from __future__ import annotations

import csv
import logging
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from .config import RunConfig, TrainConfig, to_dict
from .data import Sample, augment_sample
from .errors import HsictError, TrainingAbort
from .metrics import EvalReport
from .tensor import Param

log = logging.getLogger(__name__)

LOG_CLAMP = 1e-12
HISTORY_FIELDS = ("epoch", "lr", "train_loss", "val_acc", "val_f1")


# -- loss ------------------------------------------------------------------------------

def inverse_frequency_weights(labels, num_classes: int = 5) -> np.ndarray:
    """1/count per class, rescaled to mean 1 over the classes present."""
    counts = np.bincount(np.asarray(labels, dtype=np.int64), minlength=num_classes).astype(np.float64)
    present = counts > 0
    w = np.zeros(num_classes)
    w[present] = 1.0 / counts[present]
    return w / w[present].mean()


def cross_entropy_loss(probs: np.ndarray, labels, class_weights=None) -> tuple[float, np.ndarray]:
    """Mean weighted negative log-likelihood and its gradient w.r.t. the logits
    that produced ``probs`` through a softmax."""
    probs = np.asarray(probs)
    labels = np.asarray(labels, dtype=np.int64)
    n, k = probs.shape
    if labels.shape != (n,):
        raise ValueError(f"{labels.size} labels for {n} rows")
    w = np.ones(k) if class_weights is None else np.asarray(class_weights, dtype=np.float64)
    wy = w[labels]
    py = probs[np.arange(n), labels].astype(np.float64)
    loss = float(np.sum(-wy * np.log(np.maximum(py, LOG_CLAMP))) / n)
    grad = probs.astype(np.float64)
    grad[np.arange(n), labels] -= 1.0
    grad *= (wy / n)[:, None]
    return loss, grad.astype(probs.dtype)


# -- optimizer -------------------------------------------------------------------------

@dataclass
class OptimState:
    t: int = 0
    lr0: float = 1e-3
    decay: float = 0.15
    decay_every: int = 20
    weight_decay: float = 0.04
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decoupled: bool = True

    @classmethod
    def from_config(cls, cfg: TrainConfig) -> "OptimState":
        return cls(lr0=cfg.lr0, decay=cfg.decay_factor, decay_every=cfg.decay_every,
                   weight_decay=cfg.weight_decay, decoupled=cfg.decoupled_weight_decay)


def lr_at_epoch(epoch: int, s: OptimState) -> float:
    """Step decay: ``lr0 * decay ** (epoch // decay_every)``.

    Evaluated in exact rational arithmetic on the decimal forms of lr0 and
    decay, rounded once, so e.g. 1e-3 * 0.15**2 is exactly 2.25e-5.
    """
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    k = epoch // s.decay_every
    return float(Fraction(repr(s.lr0)) * Fraction(repr(s.decay)) ** k)


def adam_step(params: Iterable[Param], s: OptimState, lr: float) -> None:
    """One Adam update with bias correction, in place.

    Weight decay is either decoupled (theta shrinks by lr*wd*theta before
    the update) or folded into the gradient as L2.
    """
    params = list(params)
    for p in params:
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise TrainingAbort(f"non-finite gradient in parameter {p.name!r}")
    s.t += 1
    b1, b2 = s.beta1, s.beta2
    bc1 = 1.0 - b1 ** s.t
    bc2 = 1.0 - b2 ** s.t
    lr, wd = float(lr), float(s.weight_decay)
    for p in params:
        g = p.grad
        if g is None:
            continue
        theta = p.data
        if wd:
            if s.decoupled:
                theta -= lr * wd * theta
            else:
                g = g + wd * theta
        p.m *= b1
        p.m += (1.0 - b1) * g
        p.v *= b2
        p.v += (1.0 - b2) * (g * g)
        theta -= lr * (p.m / bc1) / (np.sqrt(p.v / bc2) + s.eps)


# -- splitting --------------------------------------------------------------------------

def _largest_remainder(counts: np.ndarray, frac: float) -> np.ndarray:
    """Apportion round(frac * total) across groups by largest remainder."""
    exact = counts * frac
    base = np.floor(exact).astype(np.int64)
    extra = int(round(float(exact.sum()))) - int(base.sum())
    if extra > 0:
        order = np.argsort(-(exact - base), kind="stable")
        base[order[:extra]] += 1
    return base


def split_dataset(items: Sequence, seed: int = 0, key: Callable = lambda s: s.label,
                  test_frac: float = 0.2, val_frac: float = 0.2):
    """Stratified (train, val, test) split.

    ``test_frac`` of every class goes to test and ``val_frac`` of the rest
    to validation; per-class sizes are apportioned by largest remainder so
    the split totals match the rounded overall fractions. Each split keeps
    the input order.
    """
    if not items:
        raise ValueError("cannot split an empty dataset")
    labels = np.array([key(s) for s in items])
    classes = np.unique(labels)
    members = [np.flatnonzero(labels == c) for c in classes]
    counts = np.array([m.size for m in members])
    for c, n in zip(classes, counts):
        if n < 5:
            warnings.warn(f"class {c} has only {n} items; stratification is best-effort", stacklevel=2)
    n_test = _largest_remainder(counts, test_frac)
    n_val = _largest_remainder(counts - n_test, val_frac)
    parts: tuple[list[int], list[int], list[int]] = ([], [], [])
    for c, idx, nt, nv in zip(classes, members, n_test, n_val):
        perm = idx[np.random.default_rng([seed, int(c)]).permutation(idx.size)]
        parts[2].extend(perm[:nt])
        parts[1].extend(perm[nt:nt + nv])
        parts[0].extend(perm[nt + nv:])
    return tuple([items[i] for i in sorted(p)] for p in parts)


# -- loops ---------------------------------------------------------------------------------

@dataclass
class TrainResult:
    history: list[dict]
    best_epoch: int
    best_val_acc: float
    checkpoint: Path | None = None
    steps: int = 0
    test_report: EvalReport | None = None
    extra: dict = field(default_factory=dict)


def worker_threads() -> int:
    """HSICT_THREADS: 0 (default) is the single-threaded deterministic mode."""
    raw = os.environ.get("HSICT_THREADS", "0").strip() or "0"
    try:
        return max(0, int(raw))
    except ValueError:
        raise HsictError(f"HSICT_THREADS must be an integer, got {raw!r}") from None


def batch_plan(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Shuffled index batches for one epoch.

    A trailing batch of a single sample is dropped, since batch
    statistics are undefined for it.
    """
    order = np.random.default_rng([seed, epoch]).permutation(n)
    batches = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if batches and len(batches[-1]) == 1 and n > 1:
        batches.pop()
    return batches


def _make_batch(samples: Sequence[Sample], idx: np.ndarray, cfg: RunConfig, epoch: int, dtype):
    if cfg.data.online_augment:
        imgs = [augment_sample(samples[i], cfg.data.augment,
                               np.random.default_rng([cfg.train.seed, epoch, int(i)])).image for i in idx]
    else:
        imgs = [samples[i].image for i in idx]
    x = np.concatenate(imgs, axis=0).astype(dtype, copy=False)
    y = np.array([samples[i].label for i in idx], dtype=np.int64)
    return x, y


def _batches(samples, plan, cfg, epoch, dtype, threads: int) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    if threads <= 0:
        for idx in plan:
            yield _make_batch(samples, idx, cfg, epoch, dtype)
        return
    # producer runs ahead of the training consumer; contents and order are unchanged
    with ThreadPoolExecutor(max_workers=threads) as pool:
        pending = [pool.submit(_make_batch, samples, idx, cfg, epoch, dtype) for idx in plan[:threads + 1]]
        nxt = len(pending)
        while pending:
            fut = pending.pop(0)
            if nxt < len(plan):
                pending.append(pool.submit(_make_batch, samples, plan[nxt], cfg, epoch, dtype))
                nxt += 1
            yield fut.result()


def evaluate(model, samples: Sequence[Sample], batch_size: int = 16, config: dict | None = None) -> EvalReport:
    if not samples:
        raise HsictError("cannot evaluate an empty split")
    x = np.concatenate([s.image for s in samples], axis=0)
    y = np.array([s.label for s in samples])
    probs, _ = model.predict(x, batch_size)
    return EvalReport.build(probs, y, config)


def write_history(rows: Sequence[dict], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=HISTORY_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in HISTORY_FIELDS})
    return path


def train(model, train_set: Sequence[Sample], val_set: Sequence[Sample], cfg: RunConfig,
          epochs: int | None = None, checkpoint_path: str | Path | None = None,
          on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Mini-batch Adam training with best-validation-accuracy retention.

    The best epoch's weights are restored into ``model`` before returning
    and, when ``checkpoint_path`` is set, saved there.
    """
    from .checkpoint import save_checkpoint

    if not train_set:
        raise HsictError("training split is empty")
    if not val_set:
        raise HsictError("validation split is empty")
    tc = cfg.train
    epochs = tc.epochs if epochs is None else epochs
    state = OptimState.from_config(tc)
    weights = inverse_frequency_weights([s.label for s in train_set]) if tc.class_weights else None
    threads = worker_threads()
    echo = to_dict(cfg)
    history: list[dict] = []
    best = (-1.0, -1)
    best_state = None
    steps = 0
    for epoch in range(epochs):
        lr = lr_at_epoch(epoch, state)
        plan = batch_plan(len(train_set), tc.batch_size, tc.seed, epoch)
        losses = []
        for b, (x, y) in enumerate(_batches(train_set, plan, cfg, epoch, model.dtype, threads)):
            out = model.forward(x, training=True, rng=np.random.default_rng([tc.seed, epoch, b, 1]))
            loss, grad = cross_entropy_loss(out.probs, y, weights)
            if not np.isfinite(loss):
                raise TrainingAbort(f"non-finite loss at epoch {epoch} batch {b}")
            model.zero_grad()
            out.logits.backward(grad)
            try:
                adam_step(model.params.values(), state, lr)
            except TrainingAbort as e:
                raise TrainingAbort(f"epoch {epoch} batch {b}: {e}") from None
            losses.append(loss)
            steps += 1
        model.zero_grad()
        rep = evaluate(model, val_set, tc.batch_size)
        row = {"epoch": epoch, "lr": lr, "train_loss": float(np.mean(losses)) if losses else float("nan"),
               "val_acc": rep.scores.accuracy, "val_f1": rep.scores.macro_f1}
        history.append(row)
        log.info("epoch %d lr %.3g loss %.4f val_acc %.2f val_f1 %.2f", epoch, lr, row["train_loss"],
                 row["val_acc"], row["val_f1"])
        if on_epoch is not None:
            on_epoch(row)
        if row["val_acc"] > best[0]:
            best = (row["val_acc"], epoch)
            best_state = {k: v.copy() for k, v in model.state_dict().items()}
            if checkpoint_path is not None:
                save_checkpoint(checkpoint_path, model, state, echo,
                                meta={"epoch": epoch, "val_acc": row["val_acc"]})
    if best_state is not None:
        model.load_state_dict(best_state)
    return TrainResult(history, best[1], best[0], Path(checkpoint_path) if checkpoint_path else None, steps)
