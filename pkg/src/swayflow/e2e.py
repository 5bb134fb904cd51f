"""Toy end-to-end run: train the default config on the synthetic corpus,
then score held-out infilling and leak-and-override against the rule
oracle."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .corpus import Corpus, CorpusSpec, generate_synthetic_corpus
from .evaluation import (
    InfillReport,
    LeakReport,
    evaluate_infilling,
    evaluate_leak_override,
    make_infill_case,
    make_leak_case,
)
from .model import ModelConfig, VectorFieldModel
from .sampler import build_schedule
from .training import Trainer, TrainingConfig
from .verify import Check

log = logging.getLogger(__name__)

TIME_BUDGET_S = 20 * 60


@dataclass
class E2ESettings:
    nfe: int = 32
    solver: str = "euler"
    sway: float = -1.0
    baseline_sway: float = 0.0
    cfg: float = 2.0
    t_prime: float = 0.1
    eval_seed: int = 1
    leak_seed: int = 2
    holdout: int = 100


@dataclass
class TrainingRun:
    trainer: Trainer
    losses: list[float]
    seconds: float
    max_clipped_norm: float = 0.0

    def window(self, end: int, width: int = 100) -> float:
        """Mean loss over the ``width`` updates ending at update ``end``."""
        lo = max(0, end - width)
        return float(np.mean(self.losses[lo:end]))


def train_toy(
    corpus: Corpus,
    model_cfg: ModelConfig | None = None,
    train_cfg: TrainingConfig | None = None,
    model_seed: int = 0,
    log_every: int = 500,
) -> TrainingRun:
    train_cfg = train_cfg or TrainingConfig()
    model = VectorFieldModel(model_cfg or ModelConfig(), seed=model_seed, dtype=train_cfg.dtype)
    trainer = Trainer(model, train_cfg, corpus)
    losses = []
    max_clipped = 0.0
    start = time.perf_counter()
    for _ in range(train_cfg.total_updates):
        losses.append(trainer.step())
        max_clipped = max(max_clipped, trainer.last_update_norm)
        if log_every and trainer.update % log_every == 0:
            log.info("update %d loss %.4f (%.0fs)", trainer.update, np.mean(losses[-log_every:]), time.perf_counter() - start)
    return TrainingRun(trainer, losses, time.perf_counter() - start, max_clipped)


@dataclass
class E2EResults:
    infill: InfillReport
    infill_baseline: InfillReport
    leak: LeakReport
    leak_baseline: LeakReport
    settings: E2ESettings = field(default_factory=E2ESettings)


def evaluate_toy(model: VectorFieldModel, heldout: Corpus, settings: E2ESettings | None = None) -> E2EResults:
    """Both schedules run on identical cases and noise seeds."""
    st = settings or E2ESettings()
    rule, vocab = heldout.rule, heldout.vocab
    cases = [make_infill_case(u, rule, vocab) for u in heldout.items]
    leak_rng = np.random.default_rng(st.leak_seed)
    leaks = [c for c in (make_leak_case(u, rule, vocab, leak_rng) for u in heldout.items) if c is not None]

    def sched(s):
        return build_schedule(st.nfe, s, st.solver, st.cfg)

    return E2EResults(
        infill=evaluate_infilling(model, cases, rule, sched(st.sway), st.eval_seed),
        infill_baseline=evaluate_infilling(model, cases, rule, sched(st.baseline_sway), st.eval_seed),
        leak=evaluate_leak_override(model, leaks, rule, sched(st.sway), st.eval_seed, st.t_prime),
        leak_baseline=evaluate_leak_override(model, leaks, rule, sched(st.baseline_sway), st.eval_seed, st.t_prime),
        settings=st,
    )


def e2e_checks(results: E2EResults, run: TrainingRun | None = None) -> list[Check]:
    r = results
    floor = r.infill.noise_floor
    checks = []
    if run is not None:
        checks.append(Check("e2e.train_seconds", run.seconds, f"<= {TIME_BUDGET_S}", run.seconds <= TIME_BUDGET_S))
        checks.append(Check("e2e.max_post_clip_norm", run.max_clipped_norm, "<= 1 + 1e-6", run.max_clipped_norm <= 1.0 + 1e-6))
        n = len(run.losses)
        if n >= 200:
            late, early = run.window(n), run.window(100)
            checks.append(Check("e2e.final_loss_below_initial", late, f"< {early:.6g}", late < early))
    checks += [
        Check("e2e.masked_mse", r.infill.mse, f"< {3 * floor:.6g} (3 x noise floor)", r.infill.mse < 3 * floor),
        Check("e2e.symbol_recovery", r.infill.recovery, ">= 0.9", r.infill.recovery >= 0.9),
        Check(
            "e2e.recovery_sway_vs_uniform",
            r.infill.recovery,
            f">= {r.infill_baseline.recovery:.6g} (s={r.settings.baseline_sway:g})",
            r.infill.recovery >= r.infill_baseline.recovery,
        ),
        Check("e2e.leak_override_success", r.leak.success_rate, ">= 0.8", r.leak.success_rate >= 0.8),
        Check(
            "e2e.leak_override_uniform_lower",
            r.leak_baseline.success_rate,
            f"< {r.leak.success_rate:.6g} (s={r.settings.sway:g})",
            r.leak_baseline.success_rate < r.leak.success_rate,
        ),
    ]
    return checks


def e2e_suite(corpus: Corpus | None = None, model: VectorFieldModel | None = None, seed: int = 0, settings: E2ESettings | None = None) -> Iterator[Check]:
    """Train from scratch unless a model is supplied; the corpus defaults
    to the synthetic one generated from ``seed``."""
    st = settings or E2ESettings()
    corpus = corpus or generate_synthetic_corpus(CorpusSpec(), np.random.default_rng(seed))
    train, heldout = corpus.split(st.holdout)
    run = None
    if model is None:
        run = train_toy(train, train_cfg=TrainingConfig(seed=seed), model_seed=seed)
        model = run.trainer.ema_model()
    yield from e2e_checks(evaluate_toy(model, heldout, st), run)
