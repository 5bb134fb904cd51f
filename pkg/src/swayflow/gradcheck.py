"""Central finite-difference check of reverse-mode gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Graph, Tensor


@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    checked: int
    worst: tuple[int, tuple] | None = None
    nonfinite: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.nonfinite and self.max_rel_error < self.tolerance

    def __str__(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        extra = f" nonfinite={self.nonfinite}" if self.nonfinite else ""
        return (
            f"gradcheck {verdict}: max_rel_error={self.max_rel_error:.3e} "
            f"tol={self.tolerance:.1e} checked={self.checked}{extra}"
        )


def grad_check(
    f: Callable[[], Tensor] | Callable[..., Tensor],
    point: Tensor | Sequence[Tensor],
    step: float = 1e-5,
    tolerance: float = 1e-4,
    floor: float = 1e-6,
    max_per_tensor: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare backward gradients of scalar ``f`` against central differences.

    ``point`` is one tensor (passed to ``f``) or a sequence of tensors that
    ``f`` closes over (``f`` then takes no arguments).  The relative error of
    an element is ``|a - n| / max(|a|, |n|, floor)``.  With
    ``max_per_tensor`` only a random subset of each tensor is perturbed.
    """
    single = isinstance(point, Tensor)
    tensors = [point] if single else list(point)
    call = (lambda: f(point)) if single else f
    for t in tensors:
        if t.dtype != np.float64:
            raise TypeError("grad_check needs float64 tensors; finite differences are meaningless in float32")

    saved_flags = [t.requires_grad for t in tensors]
    for t in tensors:
        t.requires_grad = True
        t.grad = None
    report = GradCheckReport(max_rel_error=0.0, tolerance=tolerance, checked=0)
    try:
        with Graph() as tape:
            out = call()
        if not np.all(np.isfinite(out.data)):
            report.nonfinite.append("f(point)")
            report.max_rel_error = float("inf")
            return report
        tape.backward(out)
        analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]
        for t in tensors:
            t.grad = None

        def value() -> float:
            return float(call().data)

        rng = rng or np.random.default_rng(0)
        for ti, t in enumerate(tensors):
            flat = t.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_per_tensor is not None and flat.size > max_per_tensor:
                idx = rng.choice(flat.size, size=max_per_tensor, replace=False)
            for i in idx:
                orig = flat[i]
                flat[i] = orig + step
                fp = value()
                flat[i] = orig - step
                fm = value()
                flat[i] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    report.nonfinite.append(f"tensor {ti} element {np.unravel_index(i, t.shape)}")
                    continue
                num = (fp - fm) / (2.0 * step)
                ana = float(analytic[ti].reshape(-1)[i])
                err = abs(ana - num) / max(abs(ana), abs(num), floor)
                report.checked += 1
                if err > report.max_rel_error:
                    report.max_rel_error = err
                    report.worst = (ti, tuple(int(v) for v in np.unravel_index(i, t.shape)))
    finally:
        for t, flag in zip(tensors, saved_flags):
            t.requires_grad = flag
            t.grad = None
    if report.nonfinite:
        report.max_rel_error = float("inf")
    return report
