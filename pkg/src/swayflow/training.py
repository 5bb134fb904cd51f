"""Infilling training: span masks, staged CFG dropout, AdamW with
warmup/decay and clipping, EMA weights and checkpoints."""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .cfm import cfm_loss
from .corpus import Corpus, Utterance
from .model import ModelConfig, VectorFieldModel
from .tensor import Graph, Tensor
from .text import FILLER_ID, tokenize

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "swayflow-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class TrainingConfig:
    # full-scale multi-GPU settings for comparison: peak lr 7.5e-5, 20k warmup,
    # 1.2M updates, 307200 frames per batch
    peak_lr: float = 1e-3
    warmup_updates: int = 200
    total_updates: int = 10000
    batch_size: int = 16
    mask_ratio_range: tuple[float, float] = (0.7, 1.0)
    cfg_drop_audio: float = 0.3
    cfg_drop_both: float = 0.2
    grad_clip_norm: float = 1.0
    ema_decay: float = 0.999
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0
    precision: str = "float32"
    holdout: int = 100  # trailing corpus items never trained on

    def __post_init__(self):
        self.mask_ratio_range = tuple(float(v) for v in self.mask_ratio_range)
        self.betas = tuple(float(v) for v in self.betas)
        lo, hi = self.mask_ratio_range
        if not 0.0 <= lo <= hi <= 1.0:
            raise ValueError(f"mask ratio range {self.mask_ratio_range} must satisfy 0 <= lo <= hi <= 1")
        for name in ("cfg_drop_audio", "cfg_drop_both"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.precision not in ("float32", "float64"):
            raise ValueError("precision must be float32 or float64")
        if self.warmup_updates < 0 or self.total_updates < 0:
            raise ValueError("update counts must be nonnegative")
        if self.holdout < 0:
            raise ValueError("holdout must be nonnegative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if not 0.0 <= self.ema_decay <= 1.0:
            raise ValueError("ema_decay must lie in [0, 1]")

    @property
    def dtype(self):
        return np.float32 if self.precision == "float32" else np.float64

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mask_ratio_range"] = list(self.mask_ratio_range)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> TrainingConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise KeyError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**data)


# ---------------------------------------------------------------------------
# masks and condition dropout
# ---------------------------------------------------------------------------


def make_infilling_mask(length: int, ratio_range: Sequence[float], rng: np.random.Generator, ratio: float | None = None) -> np.ndarray:
    """One contiguous span of ``round(r * length)`` frames set to 1,
    ``r ~ U[lo, hi]`` unless given, start uniform over valid offsets."""
    if length < 1:
        raise ValueError("length must be >= 1")
    lo, hi = ratio_range
    r = rng.uniform(lo, hi) if ratio is None else ratio
    span = min(length, max(0, int(round(r * length))))
    start = int(rng.integers(0, length - span + 1))
    mask = np.zeros(length, dtype=np.float64)
    mask[start : start + span] = 1.0
    return mask


def choose_drop_mode(rng: np.random.Generator, p_audio: float, p_both: float) -> str:
    """Stage 1 drops the masked speech with ``p_audio``; survivors then drop
    speech and text together with ``p_both``."""
    if rng.random() < p_audio:
        return "drop_audio"
    if rng.random() < p_both:
        return "drop_audio_and_text"
    return "keep"


# ---------------------------------------------------------------------------
# optimisation pieces
# ---------------------------------------------------------------------------


def lr_at(update: int, peak: float, warmup: int, total: int) -> float:
    """Linear warmup from 0 to ``peak`` then linear decay to 0 at ``total``."""
    if update <= 0:
        return 0.0
    if update >= total:
        return 0.0
    if warmup > 0 and update <= warmup:
        return peak * update / warmup
    return peak * (total - update) / max(total - warmup, 1)


def global_grad_norm(grads: Sequence[np.ndarray]) -> float:
    return math.sqrt(sum(float(np.vdot(g, g)) for g in grads))


def clip_grad_norm(grads: list[np.ndarray], max_norm: float) -> tuple[list[np.ndarray], float]:
    """Rescale so the global L2 norm is at most ``max_norm``; returns the
    (possibly unchanged) grads and the pre-clip norm."""
    norm = global_grad_norm(grads)
    if norm <= max_norm or norm == 0.0:
        return grads, norm
    scale = max_norm / norm
    return [g * g.dtype.type(scale) for g in grads], norm


def ema_update(shadow: dict[str, np.ndarray], params: dict[str, np.ndarray], decay: float) -> dict[str, np.ndarray]:
    if shadow.keys() != params.keys():
        raise KeyError("EMA shadow and parameters name different tensors")
    for name, p in params.items():
        s = shadow[name]
        if s.shape != p.shape:
            raise ValueError(f"EMA shadow {name}: shape {s.shape} != parameter shape {p.shape}")
        if decay == 1.0:
            continue
        if decay == 0.0:
            s[...] = p
        else:
            s *= s.dtype.type(decay)
            s += s.dtype.type(1.0 - decay) * p
    return shadow


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_update(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState, lr: float, cfg: TrainingConfig) -> None:
    state.step += 1
    b1, b2 = cfg.betas
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = grads[name]
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if lr == 0.0:
            continue
        p.data *= p.data.dtype.type(1.0 - lr * cfg.weight_decay)
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)).astype(p.data.dtype)


# ---------------------------------------------------------------------------
# batches
# ---------------------------------------------------------------------------


@dataclass
class TrainingBatch:
    x1: np.ndarray  # (B, L, F)
    ids: np.ndarray  # (B, L) extended sequences, filler-padded
    masks: np.ndarray  # (B, L) infill region, 0 on padding
    lengths: np.ndarray  # (B,)

    @property
    def frame_mask(self) -> np.ndarray:
        return np.arange(self.x1.shape[1])[None, :] < self.lengths[:, None]


def make_batch(items: Sequence[Utterance], vocab, cfg: TrainingConfig, rng: np.random.Generator) -> TrainingBatch:
    b = len(items)
    length = max(len(u.features) for u in items)
    f = items[0].features.shape[1]
    x1 = np.zeros((b, length, f), dtype=cfg.dtype)
    ids = np.full((b, length), FILLER_ID, dtype=np.int64)
    masks = np.zeros((b, length), dtype=np.float64)
    lengths = np.zeros(b, dtype=np.int64)
    for i, u in enumerate(items):
        n = len(u.features)
        chars = tokenize(u.text, vocab)
        if len(chars) > n:
            raise ValueError(f"{u.uid}: {len(chars)} characters exceed {n} frames")
        x1[i, :n] = u.features
        ids[i, : len(chars)] = chars
        masks[i, :n] = make_infilling_mask(n, cfg.mask_ratio_range, rng)
        lengths[i] = n
    return TrainingBatch(x1, ids, masks, lengths)


# ---------------------------------------------------------------------------
# trainer
# ---------------------------------------------------------------------------


class NonFiniteLossError(FloatingPointError):
    pass


class Trainer:
    """Owns the model, optimizer state, EMA shadow and the training rng."""

    def __init__(self, model: VectorFieldModel, cfg: TrainingConfig, corpus: Corpus | None = None):
        self.model = model
        self.cfg = cfg
        self.corpus = corpus
        self.rng = np.random.default_rng(cfg.seed)
        self.opt = AdamState()
        self.ema = {k: v.copy() for k, v in model.state_dict().items()}
        self.update = 0
        self.last_grad_norm = 0.0  # before clipping
        self.last_update_norm = 0.0  # after clipping

    @property
    def params(self) -> dict[str, Tensor]:
        return dict(self.model.named_parameters())

    def ema_decay_at(self, update: int) -> float:
        # short warmup so early shadows are not dominated by the random init
        return min(self.cfg.ema_decay, (1.0 + update) / (10.0 + update))

    def sample_batch(self) -> TrainingBatch:
        if self.corpus is None:
            raise RuntimeError("trainer has no corpus")
        idx = self.rng.integers(0, len(self.corpus.items), size=self.cfg.batch_size)
        return make_batch([self.corpus.items[i] for i in idx], self.corpus.vocab, self.cfg, self.rng)

    def loss(self, batch: TrainingBatch, rng: np.random.Generator) -> tuple[Tensor, dict]:
        cfg = self.cfg
        b, length, f = batch.x1.shape
        dtype = cfg.dtype
        t = rng.random(b)
        x0 = rng.standard_normal(batch.x1.shape).astype(dtype)
        tt = t[:, None, None]
        noisy = ((1.0 - tt) * x0 + tt * batch.x1).astype(dtype)
        m = batch.masks[:, :, None]
        cond = ((1.0 - m) * batch.x1).astype(dtype)
        ids = batch.ids.copy()
        modes = [choose_drop_mode(rng, cfg.cfg_drop_audio, cfg.cfg_drop_both) for _ in range(b)]
        for i, mode in enumerate(modes):
            if mode != "keep":
                cond[i] = 0.0
            if mode == "drop_audio_and_text":
                ids[i] = FILLER_ID
        pred = self.model(noisy, cond, ids, t, frame_mask=batch.frame_mask, rng=rng)
        loss = cfm_loss(pred, (batch.x1 - x0).astype(dtype), batch.masks)
        return loss, {"modes": modes, "t": t}

    def step(self, batch: TrainingBatch | None = None) -> float:
        """One optimisation update; returns the loss before the update."""
        if batch is None:
            batch = self.sample_batch()
        cfg = self.cfg
        self.model.train()
        params = self.params
        for p in params.values():
            p.grad = None
        with Graph() as tape:
            loss, _ = self.loss(batch, self.rng)
        value = loss.item()
        lr = lr_at(self.update + 1, cfg.peak_lr, cfg.warmup_updates, cfg.total_updates)
        if not math.isfinite(value):
            raise NonFiniteLossError(f"non-finite loss at update {self.update + 1} (lr={lr:.3g}, last grad norm={self.last_grad_norm:.3g})")
        tape.backward(loss)
        names = list(params)
        grads = [params[n].grad if params[n].grad is not None else np.zeros_like(params[n].data) for n in names]
        clipped, norm = clip_grad_norm(grads, cfg.grad_clip_norm)
        if not math.isfinite(norm):
            raise NonFiniteLossError(f"non-finite gradient norm at update {self.update + 1} (lr={lr:.3g}, loss={value:.4g})")
        self.last_grad_norm = norm
        self.last_update_norm = global_grad_norm(clipped)
        adamw_update(params, dict(zip(names, clipped)), self.opt, lr, cfg)
        for p in params.values():
            p.grad = None
        self.update += 1
        ema_update(self.ema, {n: p.data for n, p in params.items()}, self.ema_decay_at(self.update))
        return value

    def ema_model(self) -> VectorFieldModel:
        model = VectorFieldModel(self.model.cfg, dtype=self.model.dtype)
        model.load_state_dict(self.ema)
        return model.eval()

    # -- persistence ------------------------------------------------------------
    def save(self, path: str | Path) -> None:
        save_checkpoint(self, path)

    @classmethod
    def load(cls, path: str | Path, corpus: Corpus | None = None) -> Trainer:
        return load_checkpoint(path, corpus)


def save_checkpoint(trainer: Trainer, path: str | Path) -> None:
    """npz container: ``meta`` (JSON bytes) plus ``param/``, ``ema/``,
    ``adam_m/`` and ``adam_v/`` arrays keyed by parameter name."""
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model_config": trainer.model.cfg.to_dict(),
        "dtype": np.dtype(trainer.model.dtype).name,
        "training_config": trainer.cfg.to_dict(),
        "update": trainer.update,
        "adam_step": trainer.opt.step,
        "last_grad_norm": trainer.last_grad_norm,
        "rng_state": trainer.rng.bit_generator.state,
    }
    arrays = {"meta": np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)}
    for name, p in trainer.model.named_parameters():
        arrays[f"param/{name}"] = p.data
        arrays[f"ema/{name}"] = trainer.ema[name]
        if name in trainer.opt.m:
            arrays[f"adam_m/{name}"] = trainer.opt.m[name]
            arrays[f"adam_v/{name}"] = trainer.opt.v[name]
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    os.replace(tmp, path)


class CheckpointError(ValueError):
    pass


def _read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        with np.load(path, allow_pickle=False) as npz:
            arrays = {k: npz[k] for k in npz.files}
    except FileNotFoundError:
        raise
    except Exception as err:  # zipfile / value errors on damaged files
        raise CheckpointError(f"{path}: unreadable checkpoint ({err})") from err
    if "meta" not in arrays:
        raise CheckpointError(f"{path}: missing field 'meta'")
    meta = json.loads(arrays.pop("meta").tobytes().decode())
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: field 'format' is {meta.get('format')!r}, expected {CHECKPOINT_FORMAT!r}")
    if meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: field 'version' is {meta.get('version')!r}, expected {CHECKPOINT_VERSION}")
    return meta, arrays


def load_checkpoint(path: str | Path, corpus: Corpus | None = None) -> Trainer:
    meta, arrays = _read_checkpoint(path)
    model = VectorFieldModel(ModelConfig.from_dict(meta["model_config"]), dtype=np.dtype(meta["dtype"]))
    cfg = TrainingConfig.from_dict(meta["training_config"])
    expected = {name: p.shape for name, p in model.named_parameters()}
    for prefix in ("param", "ema"):
        for name, shape in expected.items():
            key = f"{prefix}/{name}"
            if key not in arrays:
                raise CheckpointError(f"{path}: missing field {key!r}")
            if arrays[key].shape != shape:
                raise CheckpointError(f"{path}: field {key!r} has shape {arrays[key].shape}, expected {shape}")
    stray = [k for k in arrays if k.split("/", 1)[1] not in expected]
    if stray:
        raise CheckpointError(f"{path}: unexpected fields {stray[:5]}")
    trainer = Trainer(model, cfg, corpus)
    model.load_state_dict({n: arrays[f"param/{n}"] for n in expected})
    trainer.ema = {n: arrays[f"ema/{n}"].copy() for n in expected}
    trainer.opt = AdamState(
        step=int(meta["adam_step"]),
        m={n: arrays[f"adam_m/{n}"].copy() for n in expected if f"adam_m/{n}" in arrays},
        v={n: arrays[f"adam_v/{n}"].copy() for n in expected if f"adam_v/{n}" in arrays},
    )
    trainer.update = int(meta["update"])
    trainer.last_grad_norm = float(meta["last_grad_norm"])
    trainer.rng.bit_generator.state = meta["rng_state"]
    return trainer


def load_inference_model(path: str | Path, use_ema: bool = True) -> VectorFieldModel:
    meta, arrays = _read_checkpoint(path)
    model = VectorFieldModel(ModelConfig.from_dict(meta["model_config"]), dtype=np.dtype(meta["dtype"]))
    prefix = "ema" if use_ema else "param"
    state = {}
    for name, p in model.named_parameters():
        key = f"{prefix}/{name}"
        if key not in arrays:
            raise CheckpointError(f"{path}: missing field {key!r}")
        if arrays[key].shape != p.shape:
            raise CheckpointError(f"{path}: field {key!r} has shape {arrays[key].shape}, expected {p.shape}")
        state[name] = arrays[key]
    model.load_state_dict(state)
    return model.eval()
