"""Inference-time flow-step schedules, classifier-free guidance and
fixed-step ODE integration."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .tensor import ShapeError, Tensor

SWAY_MIN = -1.0
SWAY_MAX = 2.0 / (math.pi - 2.0)

EVALS_PER_SEGMENT = {"euler": 1, "midpoint": 2, "heun3": 3}

VectorField = Callable[[np.ndarray, float], "np.ndarray | Tensor"]


class NonFiniteStateError(FloatingPointError):
    def __init__(self, step: int, t: float):
        super().__init__(f"non-finite state at step {step} (t={t:.6g})")
        self.step = step
        self.t = t


def check_sway_coefficient(s: float) -> float:
    s = float(s)
    if not SWAY_MIN <= s <= SWAY_MAX:
        raise ValueError(
            f"sway coefficient {s} outside the monotone range [{SWAY_MIN}, {SWAY_MAX:.6f}]"
        )
    return s


def sway_sample(u, s: float):
    """Map u in [0, 1] to ``u + s * (cos(pi/2 * u) - 1 + u)``.

    Works elementwise on arrays.  ``s < 0`` pushes steps toward 0.
    """
    s = check_sway_coefficient(s)
    u_arr = np.asarray(u, dtype=np.float64)
    if np.any((u_arr < 0) | (u_arr > 1)):
        raise ValueError("sway_sample expects u in [0, 1]")
    out = u_arr + s * (np.cos(0.5 * np.pi * u_arr) - 1.0 + u_arr)
    # cos(pi/2) is not exactly 0 in floating point
    out = np.where(u_arr == 1.0, 1.0, np.where(u_arr == 0.0, 0.0, out))
    out = np.clip(out, 0.0, 1.0)
    return float(out) if out.ndim == 0 else out


def sway_draws(rng: np.random.Generator, n: int, s: float) -> np.ndarray:
    """Random flow steps ``sway_sample(U, s)`` with U uniform."""
    return sway_sample(rng.random(n), s)


def sway_inverse(t, s: float, tol: float = 1e-12) -> np.ndarray:
    """Solve ``sway_sample(u, s) = t`` for u by bisection (the CDF of sway draws)."""
    s = check_sway_coefficient(s)
    t = np.asarray(t, dtype=np.float64)
    lo = np.zeros_like(t)
    hi = np.ones_like(t)
    while np.max(hi - lo, initial=0.0) > tol:
        mid = 0.5 * (lo + hi)
        below = mid + s * (np.cos(0.5 * np.pi * mid) - 1.0 + mid) < t
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    return 0.5 * (lo + hi)


def sway_cdf(t, s: float) -> np.ndarray:
    t = np.clip(np.asarray(t, dtype=np.float64), 0.0, 1.0)
    return sway_inverse(t, s)


@dataclass(frozen=True)
class FlowSchedule:
    steps: tuple[float, ...]
    solver: str = "euler"
    cfg_alpha: float = 0.0
    declared_nfe: int = field(default=0)

    def __post_init__(self):
        if self.solver not in EVALS_PER_SEGMENT:
            raise ValueError(f"unknown solver {self.solver!r}; expected one of {sorted(EVALS_PER_SEGMENT)}")
        steps = self.steps
        if len(steps) < 2 or steps[0] != 0.0 or steps[-1] != 1.0:
            raise ValueError("schedule must start at 0 and end at 1")
        if any(b <= a for a, b in zip(steps, steps[1:])):
            raise ValueError("schedule steps must be strictly increasing")
        if self.cfg_alpha < 0:
            raise ValueError("cfg_alpha must be nonnegative")
        implied = self.segments * EVALS_PER_SEGMENT[self.solver]
        if self.declared_nfe == 0:
            object.__setattr__(self, "declared_nfe", implied)
        elif self.declared_nfe != implied:
            raise ValueError(f"declared nfe {self.declared_nfe} != {implied} implied by {self.segments} {self.solver} segments")

    @property
    def segments(self) -> int:
        return len(self.steps) - 1


def build_schedule(nfe: int, s: float = 0.0, solver: str = "euler", cfg_alpha: float = 0.0) -> FlowSchedule:
    """Sway-mapped uniform grid whose segment count spends ``nfe`` network
    passes (CFG doubling not included)."""
    if nfe < 1:
        raise ValueError("nfe must be a positive integer")
    if solver not in EVALS_PER_SEGMENT:
        raise ValueError(f"unknown solver {solver!r}; expected one of {sorted(EVALS_PER_SEGMENT)}")
    per = EVALS_PER_SEGMENT[solver]
    if nfe % per:
        raise ValueError(f"nfe={nfe} incompatible with {solver}: must be a multiple of {per}")
    segments = nfe // per
    grid = np.linspace(0.0, 1.0, segments + 1)
    steps = sway_sample(grid, s)
    return FlowSchedule(tuple(float(v) for v in steps), solver, float(cfg_alpha), nfe)


def nfe_count(schedule: FlowSchedule) -> int:
    """Network forward passes: segments x evals per segment, doubled under CFG."""
    n = schedule.segments * EVALS_PER_SEGMENT[schedule.solver]
    return n * (2 if schedule.cfg_alpha > 0 else 1)


def cfg_combine(v_cond, v_uncond, alpha: float):
    """Guided velocity ``v_cond + alpha * (v_cond - v_uncond)``."""
    a = v_cond.data if isinstance(v_cond, Tensor) else np.asarray(v_cond)
    b = v_uncond.data if isinstance(v_uncond, Tensor) else np.asarray(v_uncond)
    if a.shape != b.shape:
        raise ShapeError(f"cfg_combine: shapes {a.shape} and {b.shape} differ")
    if alpha == 0:
        return v_cond
    out = a + alpha * (a - b)
    return Tensor._wrap(out.astype(a.dtype, copy=False)) if isinstance(v_cond, Tensor) else out


@dataclass
class EvalCounter:
    cond: int = 0
    uncond: int = 0

    @property
    def total(self) -> int:
        return self.cond + self.uncond


def _velocity(vf, uncond, alpha, x, t, counter):
    v = np.asarray(getattr(vfx := vf(x, t), "data", vfx))
    counter.cond += 1
    if alpha > 0:
        if uncond is None:
            raise ValueError("cfg_alpha > 0 needs an unconditional vector field")
        u = np.asarray(getattr(ufx := uncond(x, t), "data", ufx))
        counter.uncond += 1
        v = cfg_combine(v, u, alpha)
    return v


def _run(vf, x, steps, solver, alpha, uncond, counter, start_index=0):
    for i, (t0, t1) in enumerate(zip(steps[:-1], steps[1:])):
        h = t1 - t0
        if solver == "euler":
            x = x + h * _velocity(vf, uncond, alpha, x, t0, counter)
        elif solver == "midpoint":
            k1 = _velocity(vf, uncond, alpha, x, t0, counter)
            k2 = _velocity(vf, uncond, alpha, x + 0.5 * h * k1, t0 + 0.5 * h, counter)
            x = x + h * k2
        else:  # heun3: c = (0, 1/3, 2/3), b = (1/4, 0, 3/4)
            k1 = _velocity(vf, uncond, alpha, x, t0, counter)
            k2 = _velocity(vf, uncond, alpha, x + (h / 3.0) * k1, t0 + h / 3.0, counter)
            k3 = _velocity(vf, uncond, alpha, x + (2.0 * h / 3.0) * k2, t0 + 2.0 * h / 3.0, counter)
            x = x + h * (0.25 * k1 + 0.75 * k3)
        if not np.all(np.isfinite(x)):
            raise NonFiniteStateError(start_index + i, t1)
    return x


def _state(x) -> np.ndarray:
    arr = np.array(x.data if isinstance(x, Tensor) else x)
    return arr if arr.dtype.kind == "f" else arr.astype(np.float64)


def integrate(
    vf: VectorField,
    x0,
    schedule: FlowSchedule,
    uncond: VectorField | None = None,
    counter: EvalCounter | None = None,
):
    """Integrate ``dx/dt = vf(x, t)`` from t=0 to t=1 along ``schedule``.

    With ``schedule.cfg_alpha > 0`` every velocity is
    ``cfg_combine(vf(x, t), uncond(x, t), alpha)``.  Returns the same kind
    (Tensor or array) as ``x0``.
    """
    counter = counter if counter is not None else EvalCounter()
    out = _run(vf, _state(x0), schedule.steps, schedule.solver, schedule.cfg_alpha, uncond, counter)
    return Tensor._wrap(out) if isinstance(x0, Tensor) else out


def leak_and_override(
    vf: VectorField,
    x_leak,
    t_prime: float,
    schedule: FlowSchedule,
    x0,
    uncond: VectorField | None = None,
    counter: EvalCounter | None = None,
):
    """Start from ``(1 - t') x0 + t' x_leak`` at the first schedule step
    >= t' and integrate the remaining steps to t=1."""
    if not 0.0 < t_prime < 1.0:
        raise ValueError(f"t_prime must lie in (0, 1), got {t_prime}")
    if t_prime >= schedule.steps[-1]:
        raise ValueError("t_prime must be below the last schedule step")
    a, b = _state(x0), _state(x_leak)
    if a.shape != b.shape:
        raise ShapeError(f"leak_and_override: x0 {a.shape} and x_leak {b.shape} differ")
    start = next(i for i, t in enumerate(schedule.steps) if t >= t_prime)
    state = (1.0 - t_prime) * a + t_prime * b
    counter = counter if counter is not None else EvalCounter()
    out = _run(vf, state, schedule.steps[start:], schedule.solver, schedule.cfg_alpha, uncond, counter, start)
    return Tensor._wrap(out) if isinstance(x0, Tensor) else out


def integrate_suffix_from(vf, state, schedule: FlowSchedule, start: int, uncond=None, counter=None):
    """Integrate ``state`` taken to sit at ``schedule.steps[start]``."""
    counter = counter if counter is not None else EvalCounter()
    return _run(vf, _state(state), schedule.steps[start:], schedule.solver, schedule.cfg_alpha, uncond, counter, start)
