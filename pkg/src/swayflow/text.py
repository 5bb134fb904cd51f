"""Character vocabulary, filler padding and ratio-based duration estimates."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

FILLER_ID = 0
FILLER_SYMBOL = "<F>"


class UnknownCharacterError(ValueError):
    def __init__(self, char: str, offset: int):
        super().__init__(f"character {char!r} at byte offset {offset} is not in the vocabulary")
        self.char = char
        self.offset = offset


class Vocabulary:
    """Ordered character symbols; ID 0 is reserved for the filler token."""

    def __init__(self, symbols: Iterable[str]):
        symbols = list(symbols)
        seen = set()
        for s in symbols:
            if len(s) != 1:
                raise ValueError(f"vocabulary symbols must be single characters, got {s!r}")
            if s in seen:
                raise ValueError(f"duplicate symbol {s!r}")
            seen.add(s)
        self.symbols: tuple[str, ...] = tuple(symbols)
        self._ids = {s: i + 1 for i, s in enumerate(self.symbols)}

    def __len__(self) -> int:
        return len(self.symbols) + 1

    def __contains__(self, char: str) -> bool:
        return char in self._ids

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.symbols == other.symbols

    @property
    def filler_id(self) -> int:
        return FILLER_ID

    def id(self, char: str) -> int:
        return self._ids[char]

    def symbol(self, idx: int) -> str:
        if idx == FILLER_ID:
            return FILLER_SYMBOL
        return self.symbols[idx - 1]

    def save(self, path: str | Path) -> None:
        lines = [FILLER_SYMBOL, *self.symbols]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> Vocabulary:
        text = Path(path).read_text(encoding="utf-8")
        if text.endswith("\n"):
            text = text[:-1]
        lines = text.split("\n")
        if not lines or lines[0] != FILLER_SYMBOL:
            raise ValueError(f"{path}: first line must be the filler token {FILLER_SYMBOL!r}")
        return cls(lines[1:])


def tokenize(text: str, vocab: Vocabulary) -> list[int]:
    ids = []
    offset = 0
    for ch in text:
        if ch not in vocab:
            raise UnknownCharacterError(ch, offset)
        ids.append(vocab.id(ch))
        offset += len(ch.encode("utf-8"))
    return ids


def detokenize(ids: Sequence[int], vocab: Vocabulary) -> str:
    return "".join(vocab.symbol(i) for i in ids if i != FILLER_ID)


@dataclass(frozen=True)
class ExtendedSequence:
    """Character IDs followed by fillers up to the frame count."""

    ids: tuple[int, ...]
    effective_len: int

    def __post_init__(self):
        if self.effective_len > len(self.ids):
            raise ValueError("effective length exceeds sequence length")
        if any(i != FILLER_ID for i in self.ids[self.effective_len :]):
            raise ValueError("positions past the effective length must be filler")

    def __len__(self) -> int:
        return len(self.ids)

    def strip(self) -> list[int]:
        return list(self.ids[: self.effective_len])


def pad_to_length(ids: Sequence[int], n_frames: int) -> ExtendedSequence:
    m = len(ids)
    if m > n_frames:
        raise ValueError(f"text of {m} characters does not fit in {n_frames} frames")
    return ExtendedSequence(tuple(ids) + (FILLER_ID,) * (n_frames - m), m)


def all_filler(n_frames: int) -> ExtendedSequence:
    return ExtendedSequence((FILLER_ID,) * n_frames, 0)


def estimate_duration(ref_frames: int, ref_char_count: int, gen_char_count: int) -> int:
    """Total frames for prompt + generation, scaling the prompt's frames per
    character to the generated text (rounded up)."""
    if ref_char_count <= 0:
        raise ValueError("reference character count must be positive")
    if ref_frames <= 0 or gen_char_count <= 0:
        raise ValueError("frame and character counts must be positive")
    return ref_frames + -(-ref_frames * gen_char_count // ref_char_count)
