"""Central finite-difference verification of backward passes."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .errors import ConfigError, GradCheckFailure
from .tensor import Param, Tensor, no_grad


@dataclass
class WorstElement:
    name: str
    index: tuple[int, ...]
    analytic: float
    numeric: float
    rel_err: float
    checked: int


@dataclass
class GradCheckReport:
    tol: float
    worst: list[WorstElement] = field(default_factory=list)
    nonsmooth_skipped: int = 0

    @property
    def max_rel_err(self) -> float:
        return max((w.rel_err for w in self.worst), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol

    def failures(self) -> list[WorstElement]:
        return [w for w in self.worst if w.rel_err > self.tol]

    def summary(self) -> str:
        lines = [f"max rel err {self.max_rel_err:.3e} (tol {self.tol:.1e}), "
                 f"{self.nonsmooth_skipped} non-smooth elements skipped"]
        for w in self.worst:
            flag = "FAIL" if w.rel_err > self.tol else "ok"
            lines.append(f"  {flag:4s} {w.name}{list(w.index)}: analytic={w.analytic:.6e} "
                         f"numeric={w.numeric:.6e} rel={w.rel_err:.2e} ({w.checked} checked)")
        return "\n".join(lines)

    def raise_if_failed(self) -> None:
        if not self.passed:
            bad = self.failures()[0]
            raise GradCheckFailure(
                f"gradient mismatch in {bad.name} at index {list(bad.index)}: "
                f"analytic {bad.analytic:.6e} vs numeric {bad.numeric:.6e}", self)


def _targets(params) -> list[tuple[str, Tensor]]:
    if params is None:
        return []
    if isinstance(params, Mapping):
        items = list(params.items())
    else:
        items = [(getattr(p, "name", None) or f"param{i}", p) for i, p in enumerate(params)]
    out = []
    for name, p in items:
        t = p.value if isinstance(p, Param) else p
        out.append((name, t))
    return out


def grad_check(fn: Callable[[Tensor], Tensor], params, x: np.ndarray | None, tol: float = 1e-4,
               h: float = 1e-5, max_per_param: int | None = None, seed: int = 0) -> GradCheckReport:
    """Compare analytic gradients of ``fn`` against central differences.

    The scalar probed is ``sum(fn(x) * R)`` for a fixed random ``R``. Each
    checked element scores ``|analytic - numeric| / max(1, |numeric|)``.
    An element whose mismatch is fully explained by the second difference
    (a kink such as ReLU or max crossing inside the probe interval) is
    counted as non-smooth and excluded. ``max_per_param`` caps the number
    of randomly chosen elements probed per tensor.
    """
    rng = np.random.default_rng(seed)
    targets = _targets(params)
    for name, t in targets:
        if t.dtype != np.float64:
            raise ConfigError(f"grad_check needs float64 tensors; {name} is {t.dtype}")
    xt = None
    if x is not None:
        x = np.asarray(x)
        if x.dtype != np.float64:
            raise ConfigError("grad_check needs a float64 input")
        xt = Tensor(x.copy(), requires_grad=True, name="input")
        targets = [("input", xt)] + targets

    for _, t in targets:
        t.data = np.ascontiguousarray(t.data)
        t.grad = None
    out = fn(xt)
    proj = rng.standard_normal(out.shape)
    out.backward(proj)
    analytic = {name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data)) for name, t in targets}

    def loss() -> float:
        with no_grad():
            return float(np.sum(fn(xt).data * proj))

    base = loss()
    report = GradCheckReport(tol=tol)
    for name, t in targets:
        flat = t.data.reshape(-1)
        n = flat.size
        idxs = np.arange(n) if max_per_param is None or n <= max_per_param else \
            rng.choice(n, size=max_per_param, replace=False)
        grad_flat = analytic[name].reshape(-1)
        worst = None
        for k in idxs:
            orig = flat[k]
            flat[k] = orig + h
            lp = loss()
            flat[k] = orig - h
            lm = loss()
            flat[k] = orig
            num = (lp - lm) / (2 * h)
            err = abs(grad_flat[k] - num)
            rel = err / max(1.0, abs(num))
            if rel > tol and err <= abs(lp - 2 * base + lm) / h:
                report.nonsmooth_skipped += 1
                continue
            if worst is None or rel > worst.rel_err:
                worst = WorstElement(name, tuple(int(i) for i in np.unravel_index(k, t.shape)),
                                     float(grad_flat[k]), float(num), float(rel), len(idxs))
        if worst is not None:
            report.worst.append(worst)
    for _, t in targets:
        t.grad = None
    return report
