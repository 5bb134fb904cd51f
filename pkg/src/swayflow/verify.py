"""Verification suites.  Each check yields a :class:`Check` carrying the
measured value, the bound it is held to, and a verdict; reports are one
JSON object per line."""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np
from scipy import stats

from . import tensor as T
from .gradcheck import grad_check
from .model import (
    ConvNeXtV2Block,
    ConvPositionEmbedding,
    DiTBlock,
    ModelConfig,
    TimestepEmbedding,
    VectorFieldModel,
)
from .sampler import (
    SWAY_MAX,
    SWAY_MIN,
    EvalCounter,
    FlowSchedule,
    build_schedule,
    cfg_combine,
    integrate,
    nfe_count,
    sway_cdf,
    sway_draws,
    sway_sample,
)
from .tensor import Tensor


@dataclass
class Check:
    name: str
    value: float | str
    bound: str
    passed: bool
    seconds: float = 0.0

    def to_json(self) -> str:
        value = self.value
        if isinstance(value, float) and not math.isfinite(value):
            value = str(value)
        return json.dumps(
            {"check": self.name, "value": value, "bound": self.bound, "verdict": "pass" if self.passed else "fail", "seconds": round(self.seconds, 3)}
        )


def _timed(name: str, fn: Callable[[], tuple[float | str, str, bool]]) -> Check:
    start = time.perf_counter()
    value, bound, ok = fn()
    return Check(name, value, bound, bool(ok), time.perf_counter() - start)


# ---------------------------------------------------------------------------
# sway
# ---------------------------------------------------------------------------


def ks_against_cdf(draws: np.ndarray, s: float) -> float:
    x = np.sort(draws)
    n = len(x)
    cdf = sway_cdf(x, s)
    upper = np.arange(1, n + 1) / n - cdf
    lower = cdf - np.arange(n) / n
    return float(max(upper.max(), lower.max()))


def sway_suite(seed: int = 0, n_draws: int = 1_000_000) -> Iterator[Check]:
    rng = np.random.default_rng(seed)
    for s in (-1.0, -0.5, 0.0, 1.0):
        draws = sway_draws(rng, n_draws, s)
        yield _timed(f"sway.ks_vs_cdf[s={s:g}]", lambda: (ks := ks_against_cdf(draws, s), "< 0.002", ks < 0.002))
        median = float(np.median(draws))
        if s < 0:
            yield Check(f"sway.median_left[s={s:g}]", median, "< 0.5", median < 0.5)
        elif s > 0:
            yield Check(f"sway.median_right[s={s:g}]", median, "> 0.5", median > 0.5)
        else:
            p = float(stats.kstest(draws, "uniform").pvalue)
            yield Check("sway.uniform_ks_pvalue[s=0]", p, "> 0.01", p > 0.01)
    yield from sway_shape_checks(seed)


def sway_shape_checks(seed: int = 0) -> Iterator[Check]:
    def endpoints():
        svals = np.concatenate([[SWAY_MIN, 0.0, SWAY_MAX], np.random.default_rng(seed).uniform(SWAY_MIN, SWAY_MAX, 17)])
        ok = all(sway_sample(0.0, s) == 0.0 and sway_sample(1.0, s) == 1.0 for s in svals)
        return ("exact" if ok else "inexact"), "f(0)=0 and f(1)=1 exactly", ok

    def monotone():
        rng = np.random.default_rng(seed + 1)
        worst = math.inf
        for s in rng.uniform(SWAY_MIN, SWAY_MAX, 20):
            a, b = rng.random(10_000), rng.random(10_000)
            lo, hi = np.minimum(a, b), np.maximum(a, b)
            worst = min(worst, float(np.min(sway_sample(hi, s) - sway_sample(lo, s))))
        return worst, ">= 0 on 20 x 10^4 pairs", worst >= 0.0

    def rejects():
        bad = [SWAY_MIN - 1e-9, SWAY_MAX + 1e-9, -2.0, 3.0]
        n = 0
        for s in bad:
            try:
                sway_sample(0.5, s)
            except ValueError:
                n += 1
        return f"{n}/{len(bad)}", "all out-of-range s rejected", n == len(bad)

    yield _timed("sway.endpoints", endpoints)
    yield _timed("sway.monotone", monotone)
    yield _timed("sway.range_rejected", rejects)


# ---------------------------------------------------------------------------
# solvers
# ---------------------------------------------------------------------------


def convergence_slope(solver: str, segments=(4, 8, 16, 32, 64)) -> float:
    per = {"euler": 1, "midpoint": 2, "heun3": 3}[solver]
    errs = []
    for n in segments:
        out = integrate(lambda x, t: x, np.array([1.0]), build_schedule(n * per, 0.0, solver))
        errs.append(abs(float(out[0]) - math.e))
    return float(np.polyfit(np.log(segments), np.log(errs), 1)[0])


def solvers_suite() -> Iterator[Check]:
    for solver, order in (("euler", 1), ("midpoint", 2), ("heun3", 3)):
        yield _timed(
            f"solvers.slope[{solver}]",
            lambda: (slope := convergence_slope(solver), f"within 0.2 of -{order}", abs(slope + order) <= 0.2),
        )

    def euler4():
        out = float(integrate(lambda x, t: x, np.array([1.0]), build_schedule(4, 0.0, "euler"))[0])
        return out, "== 2.44140625", out == 2.44140625

    yield _timed("solvers.euler4_exact", euler4)


# ---------------------------------------------------------------------------
# identities
# ---------------------------------------------------------------------------


def _cfg_checks(seed: int) -> Iterator[Check]:
    rng = np.random.default_rng(seed)
    v = rng.standard_normal((5, 7)).astype(np.float32)
    u = rng.standard_normal((5, 7)).astype(np.float32)

    def same_branch():
        ok = all(np.array_equal(cfg_combine(v, v, a), v) for a in (0.0, 0.5, 1.0, 2.0, 3.7))
        return ("bitwise" if ok else "differs"), "cfg_combine(v, v, a) == v bitwise", ok

    def alpha_zero():
        ok = np.array_equal(cfg_combine(v, u, 0.0), v)
        return ("bitwise" if ok else "differs"), "cfg_combine(v, u, 0) == v bitwise", ok

    def doubling():
        rows = []
        for solver, nfe in (("euler", 16), ("midpoint", 16), ("heun3", 15)):
            for alpha in (0.0, 2.0):
                sched = build_schedule(nfe, -1.0, solver, alpha)
                counter = EvalCounter()
                integrate(lambda x, t: -x, np.ones(3), sched, uncond=lambda x, t: x, counter=counter)
                rows.append(counter.total == nfe_count(sched) == nfe * (2 if alpha else 1))
        return f"{sum(rows)}/{len(rows)}", "counted evaluations == nfe_count == nfe x (2 if alpha > 0)", all(rows)

    yield _timed("identities.cfg_same_branch", same_branch)
    yield _timed("identities.cfg_alpha_zero", alpha_zero)
    yield _timed("identities.cfg_nfe_doubling", doubling)


def adaln_zero_identity(seed: int = 0, dtype=np.float32) -> bool:
    cfg = ModelConfig()
    rng = np.random.default_rng(seed)
    block = DiTBlock(cfg, rng, dtype)
    x = Tensor(rng.standard_normal((2, 11, cfg.dit_dim)), dtype=dtype)
    cond = Tensor(rng.standard_normal((2, cfg.dit_dim)), dtype=dtype)
    y = block(x, cond)
    model = VectorFieldModel(cfg, seed=seed, dtype=dtype)
    xs = Tensor(rng.standard_normal((2, 11, cfg.dit_dim)), dtype=dtype)
    stack = model.dit_stack(xs, model.embed_flow_step(np.array([0.3, 0.8])))
    return np.array_equal(y.data, x.data) and np.array_equal(stack.data, xs.data)


def rope_shift_error(seed: int = 0, shifts=(1, 7, 100)) -> float:
    from .model import Attention

    rng = np.random.default_rng(seed)
    attn = Attention(32, 4, 1e4, rng, np.float64)
    x = Tensor(rng.standard_normal((1, 9, 32)))
    ref, _ = attn.logits(x, offset=0)
    worst = 0.0
    for k in shifts:
        shifted, _ = attn.logits(x, offset=k)
        worst = max(worst, float(np.max(np.abs(shifted.data - ref.data)) / np.max(np.abs(ref.data))))
    return worst


def identities_suite(seed: int = 0) -> Iterator[Check]:
    yield from _cfg_checks(seed)
    yield _timed(
        "identities.adaln_zero_init",
        lambda: (("bitwise" if (ok := adaln_zero_identity(seed)) else "differs"), "DiT output == input bitwise at init", ok),
    )
    yield _timed("identities.rope_shift", lambda: (err := rope_shift_error(seed), "<= 1e-5 relative", err <= 1e-5))


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------


def _t(rng, *shape, positive=False, scale=1.0):
    a = rng.standard_normal(shape) * scale
    return Tensor(np.abs(a) + 0.5 if positive else a)


def primitive_cases(rng: np.random.Generator) -> dict[str, Callable[[], tuple[Callable[[], Tensor], list[Tensor]]]]:
    """One differentiable scalar function per registered primitive."""
    w = rng.standard_normal((3, 4))  # fixed projection to a scalar

    def scalarise(y: Tensor) -> Tensor:
        weights = np.resize(w, y.shape) if y.ndim else w[0, 0]
        return (y * Tensor(weights)).sum()

    def unary(fn, positive=False):
        def make():
            x = _t(rng, 3, 4, positive=positive)
            return (lambda: scalarise(fn(x))), [x]

        return make

    def binary(fn, positive=False):
        def make():
            a, b = _t(rng, 3, 4), _t(rng, 3, 4, positive=positive)
            return (lambda: scalarise(fn(a, b))), [a, b]

        return make

    def scalar_broadcast():
        a, b = _t(rng, 3, 4), Tensor(np.array(0.7))
        return (lambda: scalarise(T.mul(a, b) + T.add(b, a) - T.sub(b, a) + T.div(a, b))), [a, b]

    def matmul():
        a, b = _t(rng, 2, 3, 5), _t(rng, 5, 4)
        return (lambda: scalarise(T.matmul(a, b))), [a, b]

    def bmm():
        a, b = _t(rng, 2, 3, 5), _t(rng, 2, 5, 4)
        return (lambda: scalarise(T.bmm(a, b))), [a, b]

    def shape_ops():
        x = _t(rng, 2, 3, 4)
        return (lambda: scalarise(T.reshape(T.transpose(x, (1, 0, 2)), (3, 8))[:, :4] * 1.0)), [x]

    def expand():
        x = _t(rng, 1, 4)
        return (lambda: scalarise(T.expand(x, (3, 4)))), [x]

    def concat():
        a, b = _t(rng, 3, 1), _t(rng, 3, 3)
        return (lambda: scalarise(T.concat([a, b], axis=-1))), [a, b]

    def reductions():
        x = _t(rng, 3, 4, 2)
        return (lambda: scalarise(T.sum_(x, axis=-1) + T.mean(x, axis=-1)) + T.mean(x * x)), [x]

    def layer_norm():
        x, g, b = _t(rng, 3, 4), _t(rng, 4), _t(rng, 4)
        return (lambda: scalarise(T.layer_norm(x, g, b))), [x, g, b]

    emb_weights = np.random.default_rng(1234).standard_normal((6, 4))

    def embedding_fixed():
        table = _t(rng, 6, 4)
        ids = np.array([0, 2, 2, 5, 1, 0])
        return (lambda: (T.embedding(table, ids) * Tensor(emb_weights)).sum()), [table]

    def dwconv():
        x, k, b = _t(rng, 2, 6, 3), _t(rng, 3, 5), _t(rng, 3)
        proj = Tensor(rng.standard_normal((2, 6, 3)))
        return (lambda: (T.conv1d_depthwise(x, k, b) * proj).sum()), [x, k, b]

    def conv():
        x, k, b = _t(rng, 2, 6, 3), _t(rng, 3, 3, 2), _t(rng, 2)
        proj = Tensor(rng.standard_normal((2, 6, 2)))
        return (lambda: (T.conv1d(x, k, b) * proj).sum()), [x, k, b]

    def rope():
        x = _t(rng, 2, 5, 4)
        proj = Tensor(rng.standard_normal((2, 5, 4)))
        return (lambda: (T.rope(x, offset=3) * proj).sum()), [x]

    def softmax():
        x = _t(rng, 3, 4)
        return (lambda: scalarise(T.softmax(x))), [x]

    return {
        "add": binary(T.add),
        "sub": binary(T.sub),
        "mul": binary(T.mul),
        "div": binary(T.div, positive=True),
        "scalar_broadcast": scalar_broadcast,
        "neg": unary(lambda x: -x),
        "add_scalar": unary(lambda x: x + 1.5),
        "mul_scalar": unary(lambda x: x * -2.5),
        "pow_scalar": unary(lambda x: x**3),
        "exp": unary(T.exp),
        "log": unary(T.log, positive=True),
        "sqrt": unary(T.sqrt, positive=True),
        "tanh": unary(T.tanh),
        "gelu": unary(T.gelu),
        "silu": unary(T.silu),
        "matmul": matmul,
        "bmm": bmm,
        "transpose_reshape_slice": shape_ops,
        "expand": expand,
        "concat": concat,
        "sum_mean": reductions,
        "softmax": softmax,
        "layer_norm": layer_norm,
        "embedding": embedding_fixed,
        "conv1d_depthwise": dwconv,
        "conv1d": conv,
        "rope": rope,
    }


def tiny_model_config(**overrides) -> ModelConfig:
    base = dict(
        feat_dim=4,
        capacity=16,
        dit_layers=2,
        dit_dim=16,
        heads=2,
        ffn_mult=2,
        convnext_layers=1,
        convnext_dim=8,
        convnext_ffn_mult=2,
        convnext_kernel=3,
        conv_pos_kernel=5,
        freq_dim=8,
        vocab_size=6,
        dropout=0.0,
    )
    base.update(overrides)
    return ModelConfig(**base)


def _randomise(module, rng, scale=0.3):
    """Give zero-initialised parameters generic values so every path carries gradient."""
    for _, p in module.named_parameters():
        if not np.any(p.data):
            p.data[...] = scale * rng.standard_normal(p.shape)


def block_cases(rng: np.random.Generator) -> dict[str, Callable[[], tuple[Callable[[], Tensor], list[Tensor]]]]:
    cfg = tiny_model_config()
    dt = np.float64

    def convnext():
        block = ConvNeXtV2Block(8, 2, 3, rng, dt)
        _randomise(block, rng)
        x = _t(rng, 2, 6, 8)
        proj = Tensor(rng.standard_normal((2, 6, 8)))
        return (lambda: (block(x) * proj).sum()), [x, *block.parameters()]

    def dit():
        block = DiTBlock(cfg, rng, dt)
        _randomise(block, rng)
        x, c = _t(rng, 2, 6, 16), _t(rng, 2, 16)
        proj = Tensor(rng.standard_normal((2, 6, 16)))
        return (lambda: (block(x, c) * proj).sum()), [x, c, *block.parameters()]

    def conv_pos():
        emb = ConvPositionEmbedding(6, 5, rng, dt)
        x = _t(rng, 2, 7, 6)
        proj = Tensor(rng.standard_normal((2, 7, 6)))
        return (lambda: (emb(x) * proj).sum()), [x, *emb.parameters()]

    def flow_step_mlp():
        emb = TimestepEmbedding(cfg, rng, dt)
        t = np.array([0.1, 0.7])
        proj = Tensor(rng.standard_normal((2, 16)))
        return (lambda: (emb(t) * proj).sum()), list(emb.parameters())

    return {"convnext_v2": convnext, "dit_adaln_zero": dit, "conv_position": conv_pos, "flow_step_mlp": flow_step_mlp}


def model_loss_case(updates: int, seed: int = 0):
    """Full masked CFM loss of a 2-layer tiny model on a one-sample batch,
    optionally after ``updates`` optimiser steps."""
    from .corpus import CorpusSpec, generate_synthetic_corpus
    from .training import Trainer, TrainingConfig, make_batch

    spec = CorpusSpec(count=8, symbols="abcde", feat_dim=4, min_chars=2, max_chars=3, max_frames=6, min_duration=1, max_duration=2)
    corpus = generate_synthetic_corpus(spec, np.random.default_rng(seed))
    tcfg = TrainingConfig(peak_lr=1e-2, warmup_updates=2, total_updates=50, batch_size=2, precision="float64", seed=seed)
    trainer = Trainer(VectorFieldModel(tiny_model_config(), seed=seed, dtype=np.float64), tcfg, corpus)
    for _ in range(updates):
        trainer.step()
    batch = make_batch(corpus.items[:1], corpus.vocab, tcfg, np.random.default_rng(seed + 1))
    trainer.model.train()
    return (lambda: trainer.loss(batch, np.random.default_rng(seed + 2))[0]), list(trainer.model.parameters())


def gradcheck_suite(seed: int = 0, tolerance: float = 1e-4) -> Iterator[Check]:
    rng = np.random.default_rng(seed)
    bound = f"< {tolerance:g}"
    groups = [("primitive", primitive_cases(rng)), ("block", block_cases(rng))]
    for kind, cases in groups:
        for name, make in cases.items():
            def run(make=make):
                f, point = make()
                report = grad_check(f, point, tolerance=tolerance)
                return report.max_rel_error, bound, report.passed

            yield _timed(f"gradcheck.{kind}[{name}]", run)
    for updates in (0, 5):
        def run(updates=updates):
            f, point = model_loss_case(updates, seed)
            report = grad_check(f, point, tolerance=tolerance)
            return report.max_rel_error, bound, report.passed

        yield _timed(f"gradcheck.model_loss[updates={updates}]", run)


SUITES = {
    "sway": sway_suite,
    "solvers": solvers_suite,
    "gradcheck": gradcheck_suite,
    "identities": identities_suite,
}


def run_suite(name: str, **kwargs) -> list[Check]:
    if name not in SUITES and name != "e2e":
        raise KeyError(f"unknown suite {name!r}; valid suites: {', '.join([*SUITES, 'e2e'])}")
    if name == "e2e":
        from .e2e import e2e_suite

        return list(e2e_suite(**kwargs))
    return list(SUITES[name](**kwargs))
