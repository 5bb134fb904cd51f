"""Optimal-transport conditional flow matching: probability path, loss and
training-time draws."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor


@dataclass(frozen=True)
class FlowStep:
    t: float

    def __post_init__(self):
        if not 0.0 <= self.t <= 1.0:
            raise ValueError(f"flow step must lie in [0, 1], got {self.t}")

    def __float__(self) -> float:
        return float(self.t)


def _arr(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def _time_column(t, shape: tuple) -> np.ndarray | float:
    """Per-example steps of shape (B,) broadcast against (B, ...)."""
    if isinstance(t, FlowStep):
        return t.t
    t = np.asarray(t, dtype=np.float64)
    if np.any((t < 0) | (t > 1)):
        raise ValueError("flow steps must lie in [0, 1]")
    if t.ndim == 0:
        return float(t)
    if t.shape[0] != shape[0]:
        raise ShapeError(f"{t.shape[0]} flow steps for a batch of {shape[0]}")
    return t.reshape(t.shape + (1,) * (len(shape) - 1))


def ot_interpolate(x0, x1, t) -> Tensor:
    """Straight-line path ``(1 - t) * x0 + t * x1``."""
    a, b = _arr(x0), _arr(x1)
    if a.shape != b.shape:
        raise ShapeError(f"ot_interpolate: x0 {a.shape} and x1 {b.shape} differ")
    tt = _time_column(t, a.shape)
    return Tensor((1.0 - tt) * a + tt * b, dtype=np.result_type(a.dtype, b.dtype))


@dataclass
class ProbePathSample:
    x0: np.ndarray
    x1: np.ndarray
    t: np.ndarray | float
    psi_t: np.ndarray
    target: np.ndarray

    @property
    def shape(self) -> tuple:
        return self.x1.shape


def probe_path_sample(x0, x1, t) -> ProbePathSample:
    a, b = _arr(x0), _arr(x1)
    psi = ot_interpolate(a, b, t).data
    return ProbePathSample(x0=a, x1=b, t=t.t if isinstance(t, FlowStep) else t, psi_t=psi, target=b - a)


def cfm_loss(v_pred: Tensor, sample, mask=None) -> Tensor:
    """Mean squared error against the path velocity ``x1 - x0``.

    ``sample`` is a :class:`ProbePathSample` or the target array itself.
    ``mask`` is temporal: shape ``v_pred.shape[:-1]`` (broadcast over
    channels) or the full shape; the mean runs over mask=1 entries only.
    """
    target = sample.target if isinstance(sample, ProbePathSample) else _arr(sample)
    if tuple(v_pred.shape) != target.shape:
        raise ShapeError(f"cfm_loss: prediction {v_pred.shape} and target {target.shape} differ")
    diff = v_pred - Tensor._wrap(np.asarray(target, dtype=v_pred.dtype))
    sq = diff * diff
    if mask is None:
        return sq.mean()
    m = np.asarray(_arr(mask), dtype=v_pred.dtype)
    if m.shape == target.shape[:-1]:
        m = np.broadcast_to(m[..., None], target.shape)
    elif m.shape != target.shape:
        raise ShapeError(f"cfm_loss: mask {m.shape} matches neither {target.shape[:-1]} nor {target.shape}")
    if np.any((m != 0) & (m != 1)):
        raise ValueError("cfm_loss: mask must be binary")
    count = float(m.sum())
    if count == 0:
        raise ValueError("cfm_loss: mask selects no elements")
    weights = Tensor._wrap(np.ascontiguousarray(m / v_pred.dtype.type(count)))
    return (sq * weights).sum()


def sample_training_step(rng: np.random.Generator) -> FlowStep:
    return FlowStep(float(rng.random()))


def sample_training_steps(rng: np.random.Generator, n: int) -> np.ndarray:
    """One uniform flow step per example."""
    return rng.random(n)


def sample_noise(shape, rng: np.random.Generator, dtype=None) -> Tensor:
    return Tensor(rng.standard_normal(tuple(shape)), dtype=dtype or T.get_default_dtype())
