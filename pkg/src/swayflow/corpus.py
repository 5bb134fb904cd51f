"""Synthetic infilling corpora whose features are a known function of the text.

Each symbol owns a fixed feature template and a fixed duration; an
utterance's clean features repeat each character's template for its
duration.  Observed features add i.i.d. Gaussian noise, so the rule gives
an exact oracle for both reconstruction error and symbol decoding.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .text import Vocabulary

DEFAULT_SYMBOLS = "abcdefghijklmnop"


@dataclass
class CorpusSpec:
    count: int = 2000
    symbols: str = DEFAULT_SYMBOLS
    feat_dim: int = 8
    min_chars: int = 3
    max_chars: int = 12
    max_frames: int = 64
    min_duration: int = 2
    max_duration: int = 6
    noise_std: float = 0.05
    template_scale: float = 1.0

    def __post_init__(self):
        if self.count < 0:
            raise ValueError("count must be nonnegative")
        if not 1 <= self.min_chars <= self.max_chars:
            raise ValueError("need 1 <= min_chars <= max_chars")
        if not 1 <= self.min_duration <= self.max_duration:
            raise ValueError("need 1 <= min_duration <= max_duration")
        if self.min_chars * self.max_duration > self.max_frames and self.min_chars * self.min_duration > self.max_frames:
            raise ValueError("max_frames too small for the shortest strings")
        if self.noise_std < 0:
            raise ValueError("noise_std must be nonnegative")


@dataclass
class SymbolRule:
    """Per-symbol templates (S, F) and durations (S,), indexed like ``symbols``."""

    symbols: str
    templates: np.ndarray
    durations: np.ndarray
    noise_std: float

    @classmethod
    def random(cls, spec: CorpusSpec, rng: np.random.Generator) -> SymbolRule:
        s = len(spec.symbols)
        templates = spec.template_scale * rng.standard_normal((s, spec.feat_dim))
        durations = rng.integers(spec.min_duration, spec.max_duration + 1, size=s)
        return cls(spec.symbols, templates, durations, spec.noise_std)

    @property
    def feat_dim(self) -> int:
        return self.templates.shape[1]

    def index(self, text: str) -> np.ndarray:
        return np.array([self.symbols.index(c) for c in text], dtype=np.int64)

    def n_frames(self, text: str) -> int:
        return int(self.durations[self.index(text)].sum())

    def frame_symbols(self, text: str) -> np.ndarray:
        """Symbol index of every frame of the clean rendering."""
        idx = self.index(text)
        return np.repeat(idx, self.durations[idx])

    def char_spans(self, text: str) -> list[tuple[int, int]]:
        ends = np.cumsum(self.durations[self.index(text)])
        starts = np.concatenate([[0], ends[:-1]])
        return [(int(a), int(b)) for a, b in zip(starts, ends)]

    def render(self, text: str) -> np.ndarray:
        return self.templates[self.frame_symbols(text)]

    def sample(self, text: str, rng: np.random.Generator) -> np.ndarray:
        clean = self.render(text)
        return clean + self.noise_std * rng.standard_normal(clean.shape)

    def nearest(self, frames: np.ndarray) -> np.ndarray:
        d = ((frames[:, None, :] - self.templates[None, :, :]) ** 2).sum(-1)
        return d.argmin(axis=1)

    def decode(self, frames: np.ndarray, text: str) -> str:
        """Majority vote of nearest-template labels within each character's
        frame span of ``text``; frame 0 is the first frame of ``text``."""
        labels = self.nearest(frames)
        out = []
        for a, b in self.char_spans(text):
            seg = labels[a:b]
            if len(seg) == 0:
                out.append("?")
                continue
            out.append(self.symbols[int(np.bincount(seg, minlength=len(self.symbols)).argmax())])
        return "".join(out)

    def to_dict(self) -> dict:
        return {
            "symbols": self.symbols,
            "templates": self.templates.tolist(),
            "durations": self.durations.tolist(),
            "noise_std": self.noise_std,
        }

    @classmethod
    def from_dict(cls, data: dict) -> SymbolRule:
        return cls(
            data["symbols"],
            np.asarray(data["templates"], dtype=np.float64),
            np.asarray(data["durations"], dtype=np.int64),
            float(data["noise_std"]),
        )


@dataclass
class Utterance:
    uid: str
    text: str
    features: np.ndarray


@dataclass
class Corpus:
    spec: CorpusSpec
    rule: SymbolRule
    items: list[Utterance]

    @property
    def vocab(self) -> Vocabulary:
        return Vocabulary(self.rule.symbols)

    def __len__(self) -> int:
        return len(self.items)

    def split(self, n_holdout: int) -> tuple[Corpus, Corpus]:
        return (
            Corpus(self.spec, self.rule, self.items[: len(self.items) - n_holdout]),
            Corpus(self.spec, self.rule, self.items[len(self.items) - n_holdout :]),
        )


def random_text(spec: CorpusSpec, rule: SymbolRule, rng: np.random.Generator) -> str:
    while True:
        n = int(rng.integers(spec.min_chars, spec.max_chars + 1))
        text = "".join(spec.symbols[i] for i in rng.integers(0, len(spec.symbols), size=n))
        if rule.n_frames(text) <= spec.max_frames:
            return text


def generate_synthetic_corpus(spec: CorpusSpec, rng: np.random.Generator) -> Corpus:
    rule = SymbolRule.random(spec, rng)
    items = []
    for i in range(spec.count):
        text = random_text(spec, rule, rng)
        items.append(Utterance(f"utt{i:06d}", text, rule.sample(text, rng)))
    return Corpus(spec, rule, items)


# ---------------------------------------------------------------------------
# on-disk format
# ---------------------------------------------------------------------------


def write_features(path: str | Path, arr: np.ndarray) -> None:
    """uint32 ndim, uint32 dims..., float32 data; all little-endian."""
    arr = np.ascontiguousarray(arr, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


def read_features(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise ValueError(f"{path}: truncated feature file")
    (ndim,) = struct.unpack_from("<I", raw, 0)
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise ValueError(f"{path}: truncated feature header")
    shape = struct.unpack_from(f"<{ndim}I", raw, 4)
    n = int(np.prod(shape)) if ndim else 1
    if len(raw) != head + 4 * n:
        raise ValueError(f"{path}: expected {n} float32 values for shape {shape}, file size disagrees")
    return np.frombuffer(raw, dtype="<f4", offset=head).reshape(shape).astype(np.float32)


MANIFEST = "manifest.tsv"
RULES = "rules.json"
VOCAB = "vocab.txt"


def save_corpus(corpus: Corpus, root: str | Path) -> None:
    root = Path(root)
    (root / "feats").mkdir(parents=True, exist_ok=True)
    with open(root / MANIFEST, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        writer.writerow(["id", "text", "features"])
        for utt in corpus.items:
            rel = f"feats/{utt.uid}.f32"
            write_features(root / rel, utt.features)
            writer.writerow([utt.uid, utt.text, rel])
    meta = {"spec": asdict(corpus.spec), "rule": corpus.rule.to_dict()}
    (root / RULES).write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    corpus.vocab.save(root / VOCAB)


def load_corpus(root: str | Path) -> Corpus:
    root = Path(root)
    if not (root / MANIFEST).exists():
        raise FileNotFoundError(f"{root}: no {MANIFEST}")
    meta = json.loads((root / RULES).read_text(encoding="utf-8"))
    spec = CorpusSpec(**meta["spec"])
    rule = SymbolRule.from_dict(meta["rule"])
    items = []
    with open(root / MANIFEST, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh, delimiter="\t")
        for row in reader:
            items.append(Utterance(row["id"], row["text"], read_features(root / row["features"])))
    return Corpus(spec, rule, items)
