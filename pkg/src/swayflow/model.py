"""Vector-field network: ConvNeXt V2 text refinement feeding an adaLN-zero
DiT with rotary self-attention.

Shapes are channel-last.  Every entry point accepts a single sequence
``(L, C)`` or a batch ``(B, L, C)``; internally everything is batched.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np

from . import tensor as T
from .nn import LayerNorm, Linear, Module, dropout, param
from .tensor import Tensor
from .text import FILLER_ID, ExtendedSequence

DROP_MODES = ("keep", "drop_audio", "drop_audio_and_text")


@dataclass
class ModelConfig:
    feat_dim: int = 8
    capacity: int = 256
    dit_layers: int = 2
    dit_dim: int = 64
    heads: int = 4
    ffn_mult: int = 2
    convnext_layers: int = 2
    convnext_dim: int = 32
    convnext_ffn_mult: int = 2
    convnext_kernel: int = 7
    conv_pos_kernel: int = 31
    freq_dim: int = 64
    time_scale: float = 1000.0
    vocab_size: int = 17
    rope_base: float = 10000.0
    dropout: float = 0.1
    # full-scale settings for comparison: 22 layers, 16 heads, dim 1024, ffn 2048;
    # ConvNeXt 4 layers, dim 512, ffn 1024; vocab 2546

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name in ("dropout",):
                if not 0.0 <= value < 1.0:
                    raise ValueError(f"{f.name} must be in [0, 1), got {value}")
            elif value <= 0:
                raise ValueError(f"{f.name} must be positive, got {value}")
        if self.dit_dim % self.heads:
            raise ValueError(f"dit_dim {self.dit_dim} not divisible by heads {self.heads}")
        if (self.dit_dim // self.heads) % 2:
            raise ValueError("per-head dimension must be even for rotary embedding")
        if self.freq_dim % 2:
            raise ValueError("freq_dim must be even")
        if self.convnext_kernel % 2 == 0 or self.conv_pos_kernel % 2 == 0:
            raise ValueError("convolution kernels must be odd")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> ModelConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise KeyError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)


def sinusoidal_table(length: int, dim: int) -> np.ndarray:
    """Absolute sinusoidal positions, interleaved sin/cos, shape (length, dim)."""
    pos = np.arange(length, dtype=np.float64)[:, None]
    div = np.exp(-math.log(10000.0) * np.arange(0, dim, 2, dtype=np.float64) / dim)
    table = np.zeros((length, dim))
    table[:, 0::2] = np.sin(pos * div)
    table[:, 1::2] = np.cos(pos * div)[:, : dim // 2]
    return table


def flow_step_features(t, dim: int, scale: float = 1000.0) -> np.ndarray:
    """Sinusoidal features of flow steps: ``[sin(scale*t*w_i), cos(scale*t*w_i)]``.

    The lowest angular frequency is ``scale * 1e-4`` rad per unit t, well
    below one period over [0, 1], so distinct steps map to distinct vectors.
    """
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / (half - 1))
    arg = scale * t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=-1)


# ---------------------------------------------------------------------------
# blocks
# ---------------------------------------------------------------------------


class GRN(Module):
    """Global response normalisation over the time axis."""

    def __init__(self, dim: int, dtype, eps: float = 1e-6):
        self.eps = eps
        self.gamma = param(np.zeros(dim), dtype)
        self.beta = param(np.zeros(dim), dtype)

    def __call__(self, x: Tensor) -> Tensor:
        gx = T.sqrt((x * x).sum(axis=1, keepdims=True))  # (B, 1, C)
        nx = gx / T.expand(gx.mean(axis=-1, keepdims=True) + self.eps, gx.shape)
        shape = x.shape
        return (
            T.expand(self.gamma, shape) * (x * T.expand(nx, shape))
            + T.expand(self.beta, shape)
            + x
        )


class ConvNeXtV2Block(Module):
    def __init__(self, dim: int, mult: int, kernel: int, rng, dtype):
        bound = 1.0 / math.sqrt(kernel)
        self.dw_weight = param(rng.uniform(-bound, bound, size=(dim, kernel)), dtype)
        self.dw_bias = param(rng.uniform(-bound, bound, size=dim), dtype)
        self.norm = LayerNorm(dim, dtype)
        self.pw1 = Linear(dim, dim * mult, rng, dtype)
        self.grn = GRN(dim * mult, dtype)
        self.pw2 = Linear(dim * mult, dim, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        h = T.conv1d_depthwise(x, self.dw_weight, self.dw_bias)
        h = self.norm(h)
        h = T.gelu(self.pw1(h))
        h = self.grn(h)
        h = self.pw2(h)
        return x + h


class TextEmbedding(Module):
    def __init__(self, cfg: ModelConfig, rng, dtype):
        self.table = param(rng.standard_normal((cfg.vocab_size, cfg.convnext_dim)), dtype)
        self.positions = Tensor(sinusoidal_table(cfg.capacity, cfg.convnext_dim), dtype=dtype)
        self.blocks = [
            ConvNeXtV2Block(cfg.convnext_dim, cfg.convnext_ffn_mult, cfg.convnext_kernel, rng, dtype)
            for _ in range(cfg.convnext_layers)
        ]

    def __call__(self, ids: np.ndarray) -> Tensor:
        b, length = ids.shape
        x = T.embedding(self.table, ids)
        pos = T.expand(self.positions[:length], x.shape)
        x = x + pos
        for block in self.blocks:
            x = block(x)
        return x


class ConvPositionEmbedding(Module):
    """Two depthwise convolutions with GELU, added residually by the caller."""

    def __init__(self, dim: int, kernel: int, rng, dtype):
        bound = 1.0 / math.sqrt(kernel)
        self.w1 = param(rng.uniform(-bound, bound, size=(dim, kernel)), dtype)
        self.b1 = param(rng.uniform(-bound, bound, size=dim), dtype)
        self.w2 = param(rng.uniform(-bound, bound, size=(dim, kernel)), dtype)
        self.b2 = param(rng.uniform(-bound, bound, size=dim), dtype)

    def __call__(self, x: Tensor, frame_mask: Tensor | None = None) -> Tensor:
        if frame_mask is not None:
            x = x * frame_mask
        h = T.gelu(T.conv1d_depthwise(x, self.w1, self.b1))
        if frame_mask is not None:
            h = h * frame_mask
        h = T.gelu(T.conv1d_depthwise(h, self.w2, self.b2))
        return h


class InputEmbedding(Module):
    def __init__(self, cfg: ModelConfig, rng, dtype):
        self.proj = Linear(2 * cfg.feat_dim + cfg.convnext_dim, cfg.dit_dim, rng, dtype)
        self.conv_pos = ConvPositionEmbedding(cfg.dit_dim, cfg.conv_pos_kernel, rng, dtype)

    def __call__(self, noisy: Tensor, cond: Tensor, text: Tensor, frame_mask: Tensor | None = None) -> Tensor:
        x = self.proj(T.concat([noisy, cond, text], axis=-1))
        return x + self.conv_pos(x, frame_mask)


class TimestepEmbedding(Module):
    def __init__(self, cfg: ModelConfig, rng, dtype):
        self.freq_dim = cfg.freq_dim
        self.scale = cfg.time_scale
        self.fc1 = Linear(cfg.freq_dim, cfg.dit_dim, rng, dtype)
        self.fc2 = Linear(cfg.dit_dim, cfg.dit_dim, rng, dtype)
        self.dtype = dtype

    def __call__(self, t) -> Tensor:
        feats = Tensor(flow_step_features(t, self.freq_dim, self.scale), dtype=self.dtype)
        return self.fc2(T.silu(self.fc1(feats)))


class Attention(Module):
    def __init__(self, dim: int, heads: int, rope_base: float, rng, dtype):
        self.heads = heads
        self.rope_base = rope_base
        self.qkv = Linear(dim, 3 * dim, rng, dtype)
        self.out = Linear(dim, dim, rng, dtype)

    def logits(self, x: Tensor, offset: int = 0) -> tuple[Tensor, Tensor]:
        b, length, dim = x.shape
        h, dh = self.heads, dim // self.heads
        qkv = self.qkv(x)

        def heads(i):
            part = qkv[:, :, i * dim : (i + 1) * dim]
            return T.transpose(T.reshape(part, (b, length, h, dh)), (0, 2, 1, 3))

        q = T.rope(heads(0), base=self.rope_base, offset=offset)
        k = T.rope(heads(1), base=self.rope_base, offset=offset)
        scores = T.bmm(q, T.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
        return scores, heads(2)

    def __call__(self, x: Tensor, key_bias: Tensor | None = None, drop: float = 0.0, rng=None, training=False) -> Tensor:
        b, length, dim = x.shape
        scores, v = self.logits(x)
        if key_bias is not None:
            scores = scores + T.expand(key_bias, scores.shape)
        attn = T.softmax(scores)
        out = T.bmm(attn, v)
        out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (b, length, dim))
        return dropout(self.out(out), drop, rng, training)


class DiTBlock(Module):
    """Pre-norm transformer block whose shift/scale/gate come from the
    flow-step embedding through a zero-initialised projection."""

    def __init__(self, cfg: ModelConfig, rng, dtype):
        dim = cfg.dit_dim
        self.dim = dim
        self.drop = cfg.dropout
        self.modulation = Linear(dim, 6 * dim, rng, dtype, zero=True)
        self.attn = Attention(dim, cfg.heads, cfg.rope_base, rng, dtype)
        self.ff1 = Linear(dim, dim * cfg.ffn_mult, rng, dtype)
        self.ff2 = Linear(dim * cfg.ffn_mult, dim, rng, dtype)

    def chunks(self, cond: Tensor, shape) -> list[Tensor]:
        mod = self.modulation(T.silu(cond))  # (B, 6D)
        b = mod.shape[0]
        d = self.dim
        return [T.expand(T.reshape(mod[:, i * d : (i + 1) * d], (b, 1, d)), shape) for i in range(6)]

    def __call__(self, x: Tensor, cond: Tensor, key_bias: Tensor | None = None, rng=None) -> Tensor:
        shift_a, scale_a, gate_a, shift_f, scale_f, gate_f = self.chunks(cond, x.shape)
        h = T.layer_norm(x) * (scale_a + 1.0) + shift_a
        x = x + gate_a * self.attn(h, key_bias, self.drop, rng, self.training)
        h = T.layer_norm(x) * (scale_f + 1.0) + shift_f
        h = dropout(T.gelu(self.ff1(h)), self.drop, rng, self.training)
        return x + gate_f * self.ff2(h)


class FinalLayer(Module):
    def __init__(self, cfg: ModelConfig, rng, dtype):
        self.dim = cfg.dit_dim
        self.modulation = Linear(cfg.dit_dim, 2 * cfg.dit_dim, rng, dtype, zero=True)
        self.proj = Linear(cfg.dit_dim, cfg.feat_dim, rng, dtype)

    def __call__(self, x: Tensor, cond: Tensor) -> Tensor:
        mod = self.modulation(T.silu(cond))
        b, d = mod.shape[0], self.dim
        scale = T.expand(T.reshape(mod[:, :d], (b, 1, d)), x.shape)
        shift = T.expand(T.reshape(mod[:, d:], (b, 1, d)), x.shape)
        return self.proj(T.layer_norm(x) * (scale + 1.0) + shift)


# ---------------------------------------------------------------------------
# full model
# ---------------------------------------------------------------------------


def _as_ids(z, batch: int, length: int) -> np.ndarray:
    if isinstance(z, ExtendedSequence):
        ids = np.asarray(z.ids, dtype=np.int64)[None]
    elif isinstance(z, (list, tuple)) and z and isinstance(z[0], ExtendedSequence):
        ids = np.asarray([s.ids for s in z], dtype=np.int64)
    else:
        ids = np.asarray(z, dtype=np.int64)
        if ids.ndim == 1:
            ids = ids[None]
    if ids.shape != (batch, length):
        raise ValueError(f"text ids shape {ids.shape} != (batch, length) = {(batch, length)}")
    return ids


class VectorFieldModel(Module):
    """Predicts the flow velocity for (noisy speech, masked speech, text, t)."""

    def __init__(self, cfg: ModelConfig | None = None, seed: int = 0, dtype=np.float32):
        self.cfg = cfg = cfg or ModelConfig()
        self.dtype = np.dtype(dtype).type
        rng = np.random.default_rng(seed)
        self.text = TextEmbedding(cfg, rng, self.dtype)
        self.input = InputEmbedding(cfg, rng, self.dtype)
        self.time = TimestepEmbedding(cfg, rng, self.dtype)
        self.blocks = [DiTBlock(cfg, rng, self.dtype) for _ in range(cfg.dit_layers)]
        self.final = FinalLayer(cfg, rng, self.dtype)

    # -- pieces, exposed for tests ------------------------------------------------
    def embed_flow_step(self, t) -> Tensor:
        return self.time(t)

    def refine_text(self, z) -> Tensor:
        ids = np.asarray(z.ids if isinstance(z, ExtendedSequence) else z, dtype=np.int64)
        single = ids.ndim == 1
        if single:
            ids = ids[None]
        if ids.shape[1] > self.cfg.capacity:
            raise ValueError(f"sequence length {ids.shape[1]} exceeds capacity {self.cfg.capacity}")
        if ids.size and (ids.min() < 0 or ids.max() >= self.cfg.vocab_size):
            raise ValueError(f"token id out of range [0, {self.cfg.vocab_size})")
        out = self.text(ids)
        return out[0] if single else out

    def dit_stack(self, x: Tensor, cond: Tensor, key_bias: Tensor | None = None, rng=None) -> Tensor:
        for block in self.blocks:
            x = block(x, cond, key_bias, rng)
        return x

    # -- forward ------------------------------------------------------------------
    def __call__(self, noisy, masked_speech, z, t, frame_mask=None, rng=None) -> Tensor:
        noisy = T.as_tensor(noisy, self.dtype)
        cond = T.as_tensor(masked_speech, self.dtype)
        single = noisy.ndim == 2
        if single:
            noisy = T.reshape(noisy, (1,) + noisy.shape)
            cond = T.reshape(cond, (1,) + cond.shape)
        if noisy.shape != cond.shape:
            raise ValueError(f"noisy {noisy.shape} and masked speech {cond.shape} differ")
        b, length, f = noisy.shape
        if f != self.cfg.feat_dim:
            raise ValueError(f"feature dim {f} != model feat_dim {self.cfg.feat_dim}")
        if length > self.cfg.capacity:
            raise ValueError(f"sequence length {length} exceeds capacity {self.cfg.capacity}")
        try:
            ids = _as_ids(z, b, length)
        except ValueError as err:
            raise ValueError(f"length mismatch among streams: {err}") from None
        if ids.min() < 0 or ids.max() >= self.cfg.vocab_size:
            raise ValueError(f"token id out of range [0, {self.cfg.vocab_size})")

        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (b,))
        if np.any((t < 0) | (t > 1)):
            raise ValueError("flow step t must lie in [0, 1]")

        mask_t = key_bias = None
        if frame_mask is not None:
            fm = np.asarray(frame_mask, dtype=bool).reshape(b, length)
            if not fm.all():
                mask_t = Tensor(np.broadcast_to(fm[:, :, None], (b, length, self.cfg.dit_dim)), dtype=self.dtype)
                key_bias = Tensor(np.where(fm, 0.0, -1e9)[:, None, None, :], dtype=self.dtype)

        text = self.text(ids)
        x = self.input(noisy, cond, text, mask_t)
        c = self.time(t)
        x = self.dit_stack(x, c, key_bias, rng)
        out = self.final(x, c)
        return out[0] if single else out

    def config_dict(self) -> dict:
        return self.cfg.to_dict()


def drop_conditions(masked_speech, z, mode: str):
    """Return the (masked speech, text) pair seen by the network under a
    classifier-free-guidance drop mode."""
    if mode not in DROP_MODES:
        raise ValueError(f"unknown drop mode {mode!r}; expected one of {DROP_MODES}")
    if mode == "keep":
        return masked_speech, z
    speech = np.zeros_like(np.asarray(getattr(masked_speech, "data", masked_speech)))
    if isinstance(masked_speech, Tensor):
        speech = Tensor(speech)
    if mode == "drop_audio":
        return speech, z
    if isinstance(z, ExtendedSequence):
        return speech, ExtendedSequence((FILLER_ID,) * len(z), 0)
    return speech, np.full_like(np.asarray(z), FILLER_ID)
