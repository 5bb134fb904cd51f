"""Command-line entry point.

Exit codes: 0 success, 1 check or inference failure, 2 usage error.
Every command prints a JSON header line echoing its resolved settings.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, load_config, with_overrides
from .corpus import MANIFEST, Corpus, generate_synthetic_corpus, load_corpus, read_features, save_corpus, write_features
from .sampler import build_schedule, nfe_count
from .text import Vocabulary

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _emit(record: dict, stream=None) -> None:
    print(json.dumps(record, default=_jsonable), file=stream or sys.stdout, flush=True)


def _jsonable(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serialisable: {type(obj).__name__}")


def _resolve(args, overrides: dict) -> RunConfig:
    cfg = load_config(args.config)
    overrides = {"seed": args.seed, **overrides}
    return with_overrides(cfg, overrides)


def _require(path: str | None, what: str) -> Path:
    if not path:
        raise UsageError(f"missing {what}")
    return Path(path)


def _sampler_overrides(args) -> dict:
    return {
        "sampler.nfe": args.nfe,
        "sampler.sway": args.sway,
        "sampler.solver": args.solver,
        "sampler.cfg": args.cfg,
    }


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_corpus(args) -> int:
    cfg = _resolve(args, {"corpus.count": args.count, "paths.corpus": args.out})
    out = _require(cfg.paths.corpus, "output directory (--out or paths.corpus)")
    if out.exists() and any(out.iterdir()) and not args.force:
        raise UsageError(f"{out} exists and is not empty; pass --force to overwrite")
    _emit({"command": "gen-corpus", "config": cfg.to_dict()})
    corpus = generate_synthetic_corpus(cfg.corpus, np.random.default_rng(cfg.seed))
    if out.exists() and args.force:
        for stale in (out / "feats").glob("*.f32"):
            stale.unlink()
    save_corpus(corpus, out)
    frames = sum(len(u.features) for u in corpus.items)
    _emit({"summary": "gen-corpus", "count": len(corpus), "frames": frames, "noise_std": cfg.corpus.noise_std, "path": str(out)})
    return EXIT_OK


def _train_split(corpus: Corpus, holdout: int) -> Corpus:
    if holdout >= len(corpus):
        raise UsageError(f"holdout {holdout} leaves no training items out of {len(corpus)}")
    return corpus.split(holdout)[0]


def cmd_train(args) -> int:
    from .model import VectorFieldModel
    from .training import NonFiniteLossError, Trainer, load_checkpoint, lr_at, save_checkpoint

    cfg = _resolve(
        args,
        {
            "paths.corpus": args.corpus,
            "paths.checkpoint": args.checkpoint,
            "training.total_updates": args.total_updates,
            "training.seed": args.train_seed,
        },
    )
    corpus_dir = _require(cfg.paths.corpus, "corpus (--corpus or paths.corpus)")
    ckpt = _require(cfg.paths.checkpoint, "checkpoint path (--checkpoint or paths.checkpoint)")
    if not (corpus_dir / MANIFEST).exists():
        raise UsageError(f"{corpus_dir}: not a corpus directory (no {MANIFEST})")
    if args.resume and not ckpt.exists():
        raise UsageError(f"--resume: {ckpt} does not exist")
    _emit({"command": "train", "config": cfg.to_dict(), "updates": args.updates, "resume": args.resume})

    corpus = _train_split(load_corpus(corpus_dir), cfg.training.holdout)
    if args.resume:
        trainer = load_checkpoint(ckpt, corpus)
    else:
        trainer = Trainer(VectorFieldModel(cfg.model, seed=cfg.seed, dtype=cfg.training.dtype), cfg.training, corpus)
    target = trainer.cfg.total_updates if args.updates is None else trainer.update + args.updates
    if args.updates == 0:
        save_checkpoint(trainer, ckpt)
        _emit({"summary": "train", "update": trainer.update, "checkpoint": str(ckpt)})
        return EXIT_OK

    best = float("inf")
    window: list[float] = []
    best_path = ckpt.with_name(ckpt.stem + ".best" + ckpt.suffix)
    while trainer.update < target:
        try:
            loss = trainer.step()
        except NonFiniteLossError as err:
            _emit({"error": str(err)}, sys.stderr)
            return EXIT_FAIL
        window.append(loss)
        if trainer.update % args.log_every == 0 or trainer.update == target:
            mean = float(np.mean(window))
            t = trainer.cfg
            _emit({"update": trainer.update, "loss": mean, "lr": lr_at(trainer.update, t.peak_lr, t.warmup_updates, t.total_updates), "grad_norm": trainer.last_grad_norm})
            window.clear()
            if mean < best:
                best = mean
                save_checkpoint(trainer, best_path)
    save_checkpoint(trainer, ckpt)
    _emit({"summary": "train", "update": trainer.update, "checkpoint": str(ckpt), "best": str(best_path), "best_loss": best})
    return EXIT_OK


def _load_model(path: Path, use_ema: bool):
    from .training import load_inference_model

    if not path.exists():
        raise UsageError(f"checkpoint {path} does not exist")
    return load_inference_model(path, use_ema=use_ema)


def cmd_infer(args) -> int:
    from .inference import synthesize

    cfg = _resolve(args, {**_sampler_overrides(args), "paths.checkpoint": args.checkpoint, "paths.output": args.out, "paths.corpus": args.corpus})
    ckpt = _require(cfg.paths.checkpoint, "checkpoint (--checkpoint or paths.checkpoint)")
    if args.vocab:
        vocab = Vocabulary.load(args.vocab)
        rule = None
    elif cfg.paths.corpus:
        corpus = load_corpus(cfg.paths.corpus)
        vocab, rule = corpus.vocab, corpus.rule
    else:
        raise UsageError("need --vocab or --corpus for the character vocabulary")
    prompt = read_features(args.prompt_features) if args.prompt_features else None
    if (prompt is None) != (args.prompt_text is None):
        raise UsageError("--prompt-features and --prompt-text go together")
    _emit({"command": "infer", "config": cfg.to_dict(), "text": args.text, "prompt_text": args.prompt_text, "duration": args.duration})

    model = _load_model(ckpt, not args.live_weights)
    s = cfg.sampler
    schedule = build_schedule(s.nfe, s.sway, s.solver, s.cfg)
    try:
        gen = synthesize(model, vocab, prompt, args.prompt_text or "", args.text, schedule, np.random.default_rng(cfg.seed), args.duration)
    except ValueError as err:
        _emit({"error": str(err)}, sys.stderr)
        return EXIT_FAIL
    report = {"summary": "infer", "frames": len(gen.features), "total_frames": gen.total_frames, "prompt_frames": gen.prompt_frames, "nfe": gen.nfe, "expected_nfe": nfe_count(schedule)}
    if rule is not None and not prompt_mismatch(rule, args.prompt_text, prompt):
        try:
            report["decoded"] = rule.decode(gen.features, args.text)
        except ValueError:
            pass
    if cfg.paths.output:
        write_features(cfg.paths.output, gen.features)
        report["output"] = cfg.paths.output
    _emit(report)
    return EXIT_OK


def prompt_mismatch(rule, prompt_text, prompt) -> bool:
    """Decoding only makes sense when the frame layout follows the rule."""
    return prompt is not None and rule.n_frames(prompt_text) != len(prompt)


def cmd_schedule(args) -> int:
    cfg = _resolve(args, _sampler_overrides(args))
    s = cfg.sampler
    sched = build_schedule(s.nfe, s.sway, s.solver, s.cfg)
    _emit({"command": "schedule", "sampler": cfg.to_dict()["sampler"]})
    _emit({"steps": list(sched.steps), "segments": sched.segments, "nfe": sched.declared_nfe, "evaluations": nfe_count(sched)})
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import SUITES, run_suite

    valid = [*SUITES, "e2e"]
    if args.suite not in valid:
        raise UsageError(f"unknown suite {args.suite!r}; valid suites: {', '.join(valid)}")
    cfg = _resolve(args, {"paths.corpus": args.corpus, "paths.checkpoint": args.checkpoint})
    _emit({"command": "verify", "suite": args.suite, "seed": cfg.seed})
    kwargs: dict = {"seed": cfg.seed} if args.suite != "solvers" else {}
    if args.suite == "e2e":
        if cfg.paths.corpus:
            kwargs["corpus"] = load_corpus(cfg.paths.corpus)
        if cfg.paths.checkpoint:
            kwargs["model"] = _load_model(Path(cfg.paths.checkpoint), True)
    checks = run_suite(args.suite, **kwargs)
    for c in checks:
        print(c.to_json(), flush=True)
    return EXIT_OK if all(c.passed for c in checks) else EXIT_FAIL


def cmd_leak_override(args) -> int:
    from .evaluation import evaluate_leak_override, make_leak_case

    cfg = _resolve(args, {**_sampler_overrides(args), "sampler.t_prime": args.t_prime, "paths.checkpoint": args.checkpoint, "paths.corpus": args.corpus, "paths.output": args.out})
    ckpt = _require(cfg.paths.checkpoint, "checkpoint (--checkpoint or paths.checkpoint)")
    corpus_dir = _require(cfg.paths.corpus, "leak source corpus (--corpus or paths.corpus)")
    s = cfg.sampler
    schedule = build_schedule(s.nfe, s.sway, s.solver, s.cfg)
    if s.t_prime >= schedule.steps[-2]:
        raise UsageError(f"t_prime {s.t_prime} leaves no schedule step to integrate (last interior step {schedule.steps[-2]:.6g})")
    _emit({"command": "leak-override", "config": cfg.to_dict(), "cases": args.cases})

    corpus = load_corpus(corpus_dir)
    heldout = corpus.split(min(args.holdout, len(corpus)))[1]
    rng = np.random.default_rng(cfg.seed)
    cases = [c for c in (make_leak_case(u, corpus.rule, corpus.vocab, rng) for u in heldout.items) if c is not None][: args.cases]
    if not cases:
        raise UsageError("no usable leak cases in the held-out split")
    model = _load_model(ckpt, True)
    report = evaluate_leak_override(model, cases, corpus.rule, schedule, cfg.seed, s.t_prime)
    out = Path(cfg.paths.output) if cfg.paths.output else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "report.jsonl", "w", encoding="utf-8") as fh:
            for row in report.per_case:
                fh.write(json.dumps(row) + "\n")
    for row in report.per_case:
        _emit(row)
    _emit({"summary": "leak-override", **report.summary()})
    return EXIT_OK


def cmd_features(args) -> int:
    from .features import MelConfig, dump_features, log_mel, read_wav

    _emit({"command": "features", "wav": args.wav, "out": args.out, "mel": MelConfig().to_dict()})
    try:
        mel = log_mel(read_wav(args.wav))
    except (ValueError, OSError) as err:
        _emit({"error": str(err)}, sys.stderr)
        return EXIT_FAIL
    dump_features(args.out, mel)
    _emit({"summary": "features", "frames": len(mel), "n_mels": mel.n_mels})
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML run configuration")
    p.add_argument("--seed", type=int, help="global seed (default: config value)")


def _add_sampler(p: argparse.ArgumentParser) -> None:
    p.add_argument("--nfe", type=int)
    p.add_argument("--sway", type=float, help="sway coefficient s in [-1, 2/(pi-2)]")
    p.add_argument("--solver", choices=["euler", "midpoint", "heun3"])
    p.add_argument("--cfg", type=float, help="guidance strength alpha")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="swayflow", description="Flow-matching infilling toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-corpus", help="write a synthetic corpus")
    _add_common(p)
    p.add_argument("--out", help="output directory")
    p.add_argument("--count", type=int)
    p.add_argument("--force", action="store_true", help="overwrite a non-empty directory")
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("train", help="train or resume training")
    _add_common(p)
    p.add_argument("--corpus")
    p.add_argument("--checkpoint")
    p.add_argument("--updates", type=int, help="updates to run now (default: until total_updates)")
    p.add_argument("--total-updates", type=int, help="length of the learning-rate schedule")
    p.add_argument("--train-seed", type=int, help="seed of the training rng")
    p.add_argument("--resume", action="store_true")
    p.add_argument("--log-every", type=int, default=100)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="generate features for text")
    _add_common(p)
    _add_sampler(p)
    p.add_argument("--checkpoint")
    p.add_argument("--text", required=True, help="text to generate")
    p.add_argument("--prompt-features", help="shape-prefixed float32 prompt features")
    p.add_argument("--prompt-text")
    p.add_argument("--duration", type=int, help="total frames (prompt + generated)")
    p.add_argument("--vocab")
    p.add_argument("--corpus", help="corpus directory (vocabulary and decoding rule)")
    p.add_argument("--out")
    p.add_argument("--live-weights", action="store_true", help="use live instead of EMA weights")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("schedule", help="print a flow-step schedule")
    _add_common(p)
    _add_sampler(p)
    p.set_defaults(func=cmd_schedule)

    p = sub.add_parser("verify", help="run a verification suite")
    _add_common(p)
    p.add_argument("suite")
    p.add_argument("--corpus")
    p.add_argument("--checkpoint")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("leak-override", help="leak-and-override diagnostic")
    _add_common(p)
    _add_sampler(p)
    p.add_argument("--checkpoint")
    p.add_argument("--corpus", help="leak source corpus")
    p.add_argument("--t-prime", type=float)
    p.add_argument("--cases", type=int, default=100)
    p.add_argument("--holdout", type=int, default=100)
    p.add_argument("--out")
    p.set_defaults(func=cmd_leak_override)

    p = sub.add_parser("features", help="16-bit PCM WAV to log-mel features")
    p.add_argument("wav")
    p.add_argument("out")
    p.set_defaults(func=cmd_features)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as err:
        print(f"swayflow {args.command}: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, KeyError, OSError) as err:
        print(f"swayflow {args.command}: {err}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
