"""Waveform to log mel-filterbank features.

Conventions: 24 kHz input, n_fft 1024, hop 256, periodic Hann window,
centred reflect padding, power spectrum, HTK mel scale over 0..12 kHz,
100 channels, natural log with an additive floor of 1e-10.
"""

from __future__ import annotations

import wave
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal import get_window

from .corpus import read_features, write_features

LOG_FLOOR = 1e-10


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError("waveform must be mono (1-d samples)")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if not np.all(np.isfinite(samples)):
            raise ValueError("waveform contains non-finite samples")
        object.__setattr__(self, "samples", samples)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class MelConfig:
    sample_rate: int = 24000
    n_fft: int = 1024
    hop: int = 256
    n_mels: int = 100
    fmin: float = 0.0
    fmax: float = 12000.0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class MelSpectrogram:
    frames: np.ndarray  # (N, n_mels)
    hop: int
    sample_rate: int

    @property
    def n_mels(self) -> int:
        return self.frames.shape[1]

    def __len__(self) -> int:
        return len(self.frames)


def n_frames(n_samples: int, hop: int) -> int:
    return 1 + n_samples // hop


def stft(w: Waveform, n_fft: int = 1024, hop: int = 256, window: str = "hann") -> np.ndarray:
    """Centred STFT; returns complex (frames, n_fft // 2 + 1)."""
    if len(w) == 0:
        raise ValueError("empty waveform")
    if n_fft < 1 or n_fft & (n_fft - 1):
        raise ValueError(f"n_fft must be a power of two, got {n_fft}")
    if not 1 <= hop <= n_fft:
        raise ValueError(f"hop must lie in [1, n_fft], got {hop}")
    win = get_window(window, n_fft, fftbins=True)
    padded = np.pad(w.samples, n_fft // 2, mode="reflect")
    frames = sliding_window_view(padded, n_fft)[::hop]
    frames = frames[: n_frames(len(w), hop)]
    return np.fft.rfft(frames * win, axis=-1)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_fft: int, sample_rate: int, n_mels: int = 100, fmin: float = 0.0, fmax: float | None = None) -> np.ndarray:
    """Triangular filters with peaks equally spaced in HTK mel; unnormalised
    (peak weight 1).  Shape (n_mels, n_fft // 2 + 1)."""
    fmax = sample_rate / 2 if fmax is None else fmax
    if not 0 <= fmin < fmax <= sample_rate / 2:
        raise ValueError(f"need 0 <= fmin < fmax <= {sample_rate / 2}, got fmin={fmin}, fmax={fmax}")
    bins = np.fft.rfftfreq(n_fft, 1.0 / sample_rate)
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bins[None] - lo) / (mid - lo)
    falling = (hi - bins[None]) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    empty = np.flatnonzero(fb.sum(axis=1) == 0)
    if empty.size:
        raise ValueError(f"{n_mels} mel channels too many for n_fft={n_fft}: filter {int(empty[0])} covers no FFT bin")
    return fb


def log_mel(w: Waveform, config: MelConfig = MelConfig()) -> MelSpectrogram:
    if w.sample_rate != config.sample_rate:
        raise ValueError(f"sample rate {w.sample_rate} != configured {config.sample_rate}; resampling is not supported")
    power = np.abs(stft(w, config.n_fft, config.hop)) ** 2
    fb = mel_filterbank(config.n_fft, config.sample_rate, config.n_mels, config.fmin, config.fmax)
    return MelSpectrogram(np.log(power @ fb.T + LOG_FLOOR), config.hop, config.sample_rate)


def read_wav(path: str | Path) -> Waveform:
    """16-bit PCM mono WAV, scaled to [-1, 1)."""
    with wave.open(str(path), "rb") as fh:
        if fh.getnchannels() != 1:
            raise ValueError(f"{path}: expected mono audio, found {fh.getnchannels()} channels")
        if fh.getsampwidth() != 2:
            raise ValueError(f"{path}: expected 16-bit PCM, found {8 * fh.getsampwidth()}-bit samples")
        rate = fh.getframerate()
        raw = fh.readframes(fh.getnframes())
    return Waveform(np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0, rate)


def write_wav(path: str | Path, w: Waveform) -> None:
    pcm = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(w.sample_rate)
        fh.writeframes(pcm.tobytes())


def dump_features(path: str | Path, mel: MelSpectrogram) -> None:
    write_features(path, mel.frames)


def load_features(path: str | Path) -> np.ndarray:
    return read_features(path)
