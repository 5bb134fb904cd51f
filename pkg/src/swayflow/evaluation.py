"""Oracle-scored evaluation on synthetic corpora: held-out infilling and
leak-and-override cases."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .corpus import SymbolRule, Utterance
from .inference import InfillRequest, infill, infill_with_leak
from .model import VectorFieldModel
from .sampler import EvalCounter, FlowSchedule
from .text import Vocabulary, pad_to_length, tokenize


@dataclass
class InfillCase:
    """An utterance split at a character boundary: the first ``prompt_chars``
    characters are given as audio, the rest is generated."""

    uid: str
    text: str
    prompt_chars: int
    prompt_frames: int
    request: InfillRequest

    @property
    def gen_text(self) -> str:
        return self.text[self.prompt_chars :]


def prompt_split(text: str) -> int:
    return max(1, len(text) // 4)


def make_infill_case(utt: Utterance, rule: SymbolRule, vocab: Vocabulary) -> InfillCase:
    p = prompt_split(utt.text)
    n_prompt = rule.char_spans(utt.text)[p - 1][1]
    n = len(utt.features)
    mask = np.zeros(n)
    mask[n_prompt:] = 1.0
    z = pad_to_length(tokenize(utt.text, vocab), n)
    return InfillCase(utt.uid, utt.text, p, n_prompt, InfillRequest(utt.features, np.asarray(z.ids), mask))


def char_accuracy(decoded: str, text: str) -> float:
    return float(np.mean([a == b for a, b in zip(decoded, text)])) if text else 1.0


@dataclass
class InfillReport:
    mse: float
    noise_floor: float
    recovery: float
    n_cases: int
    n_symbols: int
    nfe: int
    per_case: list[dict] = field(default_factory=list)

    def summary(self) -> dict:
        return {k: v for k, v in self.__dict__.items() if k != "per_case"}


def evaluate_infilling(
    model: VectorFieldModel,
    cases: list[InfillCase],
    rule: SymbolRule,
    schedule: FlowSchedule,
    seed: int,
    batch_size: int = 50,
) -> InfillReport:
    """Masked-region MSE against the clean rule rendering, and the fraction
    of generated characters whose decoded symbol matches the text."""
    rng = np.random.default_rng(seed)
    sq_err = 0.0
    count = 0
    hits = 0
    symbols = 0
    counter = EvalCounter()
    per_case = []
    for lo in range(0, len(cases), batch_size):
        chunk = cases[lo : lo + batch_size]
        outs = infill(model, [c.request for c in chunk], schedule, rng, counter)
        for case, out in zip(chunk, outs):
            gen = out[case.prompt_frames :]
            clean = rule.render(case.text)[case.prompt_frames :]
            err = float(((gen - clean) ** 2).sum())
            decoded = rule.decode(gen, case.gen_text)
            ok = sum(a == b for a, b in zip(decoded, case.gen_text))
            sq_err += err
            count += gen.size
            hits += ok
            symbols += len(case.gen_text)
            per_case.append({"uid": case.uid, "target": case.gen_text, "decoded": decoded, "mse": err / gen.size})
    return InfillReport(
        mse=sq_err / max(count, 1),
        noise_floor=rule.noise_std**2,
        recovery=hits / max(symbols, 1),
        n_cases=len(cases),
        n_symbols=symbols,
        nfe=counter.total // max(1, -(-len(cases) // batch_size)),
        per_case=per_case,
    )


@dataclass
class LeakCase:
    base: InfillCase
    leak_text: str  # replaces the generated part in the leaked state
    leak: np.ndarray  # (L, F): prompt frames followed by a rendering of leak_text


def make_leak_case(utt: Utterance, rule: SymbolRule, vocab: Vocabulary, rng: np.random.Generator) -> LeakCase | None:
    """Leak a permutation of the target characters (same frame count,
    different content).  None when no distinct permutation exists."""
    base = make_infill_case(utt, rule, vocab)
    target = base.gen_text
    if len(set(target)) < 2:
        return None
    while True:
        leak_text = "".join(rng.permutation(list(target)))
        if leak_text != target:
            break
    leak = np.concatenate([utt.features[: base.prompt_frames], rule.sample(leak_text, rng)])
    return LeakCase(base, leak_text, leak)


@dataclass
class LeakReport:
    success_rate: float
    n_cases: int
    t_prime: float
    per_case: list[dict] = field(default_factory=list)

    def summary(self) -> dict:
        return {k: v for k, v in self.__dict__.items() if k != "per_case"}


def evaluate_leak_override(
    model: VectorFieldModel,
    cases: list[LeakCase],
    rule: SymbolRule,
    schedule: FlowSchedule,
    seed: int,
    t_prime: float = 0.1,
    batch_size: int = 50,
) -> LeakReport:
    """A case succeeds when the output decodes closer to the target text
    than to the leaked text (character accuracy under each transcript's
    own frame spans)."""
    rng = np.random.default_rng(seed)
    per_case = []
    for lo in range(0, len(cases), batch_size):
        chunk = cases[lo : lo + batch_size]
        outs = infill_with_leak(model, [c.base.request for c in chunk], [c.leak for c in chunk], schedule, rng, t_prime)
        for case, out in zip(chunk, outs):
            gen = out[case.base.prompt_frames :]
            target = case.base.gen_text
            dec_t = rule.decode(gen, target)
            dec_l = rule.decode(gen, case.leak_text)
            acc_t = char_accuracy(dec_t, target)
            acc_l = char_accuracy(dec_l, case.leak_text)
            per_case.append(
                {
                    "uid": case.base.uid,
                    "target": target,
                    "leaked": case.leak_text,
                    "decoded_as_target": dec_t,
                    "decoded_as_leak": dec_l,
                    "target_accuracy": acc_t,
                    "leak_accuracy": acc_l,
                    "success": acc_t > acc_l,
                }
            )
    rate = float(np.mean([c["success"] for c in per_case])) if per_case else 0.0
    return LeakReport(rate, len(per_case), t_prime, per_case)
