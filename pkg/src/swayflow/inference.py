"""Prompted infilling inference and the leak-and-override diagnostic."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .model import VectorFieldModel
from .sampler import EvalCounter, FlowSchedule, integrate, leak_and_override
from .text import FILLER_ID, Vocabulary, estimate_duration, pad_to_length, tokenize


@dataclass
class InfillRequest:
    """One sequence to complete: ``cond`` holds known frames (zeros inside
    ``mask``), ``ids`` the extended text sequence, ``mask`` the frames to
    generate."""

    cond: np.ndarray  # (L, F)
    ids: np.ndarray  # (L,)
    mask: np.ndarray  # (L,) 1 = generate

    def __post_init__(self):
        self.cond = np.asarray(self.cond, dtype=np.float64)
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.mask = np.asarray(self.mask, dtype=np.float64)
        if self.cond.ndim != 2 or self.ids.shape != self.cond.shape[:1] or self.mask.shape != self.cond.shape[:1]:
            raise ValueError(f"inconsistent request shapes cond={self.cond.shape} ids={self.ids.shape} mask={self.mask.shape}")


@dataclass
class _Packed:
    cond: np.ndarray
    ids: np.ndarray
    mask: np.ndarray
    lengths: np.ndarray

    @property
    def frame_mask(self) -> np.ndarray:
        return np.arange(self.cond.shape[1])[None, :] < self.lengths[:, None]


def _pack(requests: Sequence[InfillRequest], dtype) -> _Packed:
    length = max(len(r.ids) for r in requests)
    f = requests[0].cond.shape[1]
    b = len(requests)
    cond = np.zeros((b, length, f), dtype=dtype)
    ids = np.full((b, length), FILLER_ID, dtype=np.int64)
    mask = np.zeros((b, length), dtype=np.float64)
    lengths = np.zeros(b, dtype=np.int64)
    for i, r in enumerate(requests):
        n = len(r.ids)
        cond[i, :n] = r.cond * (1.0 - r.mask[:, None])
        ids[i, :n] = r.ids
        mask[i, :n] = r.mask
        lengths[i] = n
    return _Packed(cond, ids, mask, lengths)


def vector_fields(model: VectorFieldModel, packed: _Packed):
    """Conditional and unconditional (speech and text dropped) velocity
    callables over a packed batch."""
    fm = None if packed.frame_mask.all() else packed.frame_mask
    blank_cond = np.zeros_like(packed.cond)
    blank_ids = np.full_like(packed.ids, FILLER_ID)

    def cond(x, t):
        return model(x.astype(model.dtype, copy=False), packed.cond, packed.ids, t, frame_mask=fm).data

    def uncond(x, t):
        return model(x.astype(model.dtype, copy=False), blank_cond, blank_ids, t, frame_mask=fm).data

    return cond, uncond


def _finish(out: np.ndarray, packed: _Packed) -> list[np.ndarray]:
    # known frames are copied through; padding is cut off
    m = packed.mask[:, :, None]
    full = m * out + (1.0 - m) * packed.cond
    return [full[i, : n] for i, n in enumerate(packed.lengths)]


def infill(
    model: VectorFieldModel,
    requests: Sequence[InfillRequest],
    schedule: FlowSchedule,
    rng: np.random.Generator,
    counter: EvalCounter | None = None,
) -> list[np.ndarray]:
    """Integrate from Gaussian noise for a batch of requests; returns the
    full completed sequences."""
    model.eval()
    packed = _pack(requests, model.dtype)
    x0 = rng.standard_normal(packed.cond.shape).astype(model.dtype)
    cond, uncond = vector_fields(model, packed)
    out = integrate(cond, x0, schedule, uncond=uncond, counter=counter)
    return _finish(out, packed)


def infill_with_leak(
    model: VectorFieldModel,
    requests: Sequence[InfillRequest],
    leaks: Sequence[np.ndarray],
    schedule: FlowSchedule,
    rng: np.random.Generator,
    t_prime: float = 0.1,
    counter: EvalCounter | None = None,
) -> list[np.ndarray]:
    """Like :func:`infill` but starting from a state mixed with ``leaks``
    (one full-length feature array per request)."""
    model.eval()
    packed = _pack(requests, model.dtype)
    x_leak = np.zeros(packed.cond.shape, dtype=model.dtype)
    for i, (r, leak) in enumerate(zip(requests, leaks)):
        leak = np.asarray(leak)
        if leak.shape != r.cond.shape:
            raise ValueError(f"leak {i}: shape {leak.shape} != request shape {r.cond.shape}")
        x_leak[i, : len(leak)] = leak
    x0 = rng.standard_normal(packed.cond.shape).astype(model.dtype)
    cond, uncond = vector_fields(model, packed)
    out = leak_and_override(cond, x_leak, t_prime, schedule, x0, uncond=uncond, counter=counter)
    return _finish(out, packed)


@dataclass
class Generation:
    features: np.ndarray  # generated segment only
    total_frames: int
    prompt_frames: int
    nfe: int


def prompt_request(prompt_features: np.ndarray | None, prompt_text: str, gen_text: str, vocab: Vocabulary, feat_dim: int, duration: int | None = None) -> tuple[InfillRequest, int]:
    """Lay out ``[prompt | generated]`` over prompt+gen text.  The total
    frame count is ``duration`` when given, else the ratio estimate."""
    prompt = np.zeros((0, feat_dim)) if prompt_features is None else np.asarray(prompt_features, dtype=np.float64)
    if prompt.ndim != 2 or prompt.shape[1] != feat_dim:
        raise ValueError(f"prompt features must have shape (frames, {feat_dim}), got {prompt.shape}")
    n_prompt = len(prompt)
    ids = tokenize(prompt_text + gen_text, vocab)
    if duration is None:
        if n_prompt == 0 or not prompt_text:
            raise ValueError("duration is required without a transcribed audio prompt")
        total = estimate_duration(n_prompt, len(prompt_text), len(gen_text))
    else:
        if duration <= n_prompt:
            raise ValueError(f"duration {duration} leaves no frames after a {n_prompt}-frame prompt")
        total = int(duration)
    z = pad_to_length(ids, total)
    cond = np.zeros((total, feat_dim))
    cond[:n_prompt] = prompt
    mask = np.zeros(total)
    mask[n_prompt:] = 1.0
    return InfillRequest(cond, np.asarray(z.ids), mask), n_prompt


def synthesize(
    model: VectorFieldModel,
    vocab: Vocabulary,
    prompt_features: np.ndarray | None,
    prompt_text: str,
    gen_text: str,
    schedule: FlowSchedule,
    rng: np.random.Generator,
    duration: int | None = None,
) -> Generation:
    """Prompted generation; prompt frames are discarded from the output."""
    req, n_prompt = prompt_request(prompt_features, prompt_text, gen_text, vocab, model.cfg.feat_dim, duration)
    counter = EvalCounter()
    (full,) = infill(model, [req], schedule, rng, counter)
    return Generation(full[n_prompt:], len(full), n_prompt, counter.total)
