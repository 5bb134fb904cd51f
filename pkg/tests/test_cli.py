import json

import numpy as np
import pytest

from swayflow.cli import main
from swayflow.corpus import load_corpus, read_features, write_features

TINY_YAML = """\
model: {feat_dim: 4, capacity: 32, dit_layers: 1, dit_dim: 16, heads: 2, convnext_layers: 1,
        convnext_dim: 8, convnext_kernel: 3, conv_pos_kernel: 5, freq_dim: 8, vocab_size: 6}
training: {batch_size: 4, warmup_updates: 2, total_updates: 10, holdout: 4, peak_lr: 0.003}
corpus: {count: 20, symbols: abcde, feat_dim: 4, max_chars: 5, max_frames: 24}
"""


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    lines = [json.loads(line) for line in out.splitlines() if line.strip()]
    return code, lines, err


@pytest.fixture
def workspace(tmp_path, capsys):
    cfg = tmp_path / "run.yaml"
    cfg.write_text(TINY_YAML)
    code, _, _ = run(capsys, "gen-corpus", "--config", cfg, "--out", tmp_path / "corpus")
    assert code == 0
    return tmp_path, cfg


@pytest.fixture
def trained(workspace, capsys):
    root, cfg = workspace
    ck = root / "ck.npz"
    code, _, _ = run(capsys, "train", "--config", cfg, "--corpus", root / "corpus", "--checkpoint", ck, "--log-every", 5)
    assert code == 0
    return root, cfg, ck


# -- gen-corpus ----------------------------------------------------------------------


def test_gen_corpus_rows_and_header(tmp_path, capsys):
    code, lines, _ = run(capsys, "gen-corpus", "--out", tmp_path / "c", "--count", 7)
    assert code == 0
    assert lines[0]["command"] == "gen-corpus" and lines[0]["config"]["corpus"]["count"] == 7
    assert lines[-1]["count"] == 7 and lines[-1]["noise_std"] == 0.05
    assert len((tmp_path / "c" / "manifest.tsv").read_text().splitlines()) == 8


def test_gen_corpus_count_zero(tmp_path, capsys):
    code, lines, _ = run(capsys, "gen-corpus", "--out", tmp_path / "c", "--count", 0)
    assert code == 0 and lines[-1]["count"] == 0
    assert load_corpus(tmp_path / "c").items == []


def test_gen_corpus_refuses_non_empty_dir(tmp_path, capsys):
    (tmp_path / "c").mkdir()
    (tmp_path / "c" / "junk").write_text("x")
    code, _, err = run(capsys, "gen-corpus", "--out", tmp_path / "c", "--count", 2)
    assert code == 2 and "--force" in err
    code, _, _ = run(capsys, "gen-corpus", "--out", tmp_path / "c", "--count", 2, "--force")
    assert code == 0


def test_gen_corpus_seeded_bytes(tmp_path, capsys):
    for name in ("a", "b"):
        run(capsys, "gen-corpus", "--out", tmp_path / name, "--count", 5, "--seed", 4)
    for f in ("manifest.tsv", "rules.json", "vocab.txt", "feats/utt000003.f32"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


# -- train -----------------------------------------------------------------------------


def test_train_updates_zero_writes_init_checkpoint(workspace, capsys):
    root, cfg = workspace
    ck = root / "init.npz"
    code, lines, _ = run(capsys, "train", "--config", cfg, "--corpus", root / "corpus", "--checkpoint", ck, "--updates", 0)
    assert code == 0 and ck.exists() and lines[-1]["update"] == 0


def test_train_logs_and_best_checkpoint(trained):
    root, _, ck = trained
    assert ck.exists() and (root / "ck.best.npz").exists()


def test_train_log_fields(workspace, capsys):
    root, cfg = workspace
    code, lines, _ = run(capsys, "train", "--config", cfg, "--corpus", root / "corpus", "--checkpoint", root / "x.npz", "--log-every", 2)
    assert code == 0
    logs = [l for l in lines if "loss" in l and "update" in l and "summary" not in l]
    assert [l["update"] for l in logs] == [2, 4, 6, 8, 10]
    assert all({"lr", "grad_norm"} <= set(l) for l in logs)
    assert logs[-1]["lr"] == 0.0


def test_resume_reproduces_uninterrupted_run(workspace, capsys):
    root, cfg = workspace
    args = ("train", "--config", cfg, "--corpus", root / "corpus", "--log-every", 1)
    _, full, _ = run(capsys, *args, "--checkpoint", root / "full.npz", "--updates", 6)
    run(capsys, *args, "--checkpoint", root / "part.npz", "--updates", 3)
    _, rest, _ = run(capsys, *args, "--checkpoint", root / "part.npz", "--updates", 3, "--resume")
    losses = lambda lines: [l["loss"] for l in lines if "loss" in l and "summary" not in l]
    assert losses(full)[3:] == losses(rest)


def test_train_missing_corpus(tmp_path, capsys):
    code, _, err = run(capsys, "train", "--corpus", tmp_path, "--checkpoint", tmp_path / "c.npz")
    assert code == 2 and "not a corpus" in err


# -- infer -----------------------------------------------------------------------------


def test_infer_cfg_zero_halves_evaluations(trained, capsys):
    root, cfg, ck = trained
    base = ("infer", "--config", cfg, "--checkpoint", ck, "--corpus", root / "corpus", "--text", "abca", "--nfe", 8, "--duration", 14)
    _, guided, _ = run(capsys, *base, "--cfg", 2)
    _, plain, _ = run(capsys, *base, "--cfg", 0)
    assert guided[-1]["nfe"] == guided[-1]["expected_nfe"] == 16
    assert plain[-1]["nfe"] == 8
    assert "decoded" in plain[-1]


def test_infer_deterministic_and_prompt_discarded(trained, capsys):
    root, cfg, ck = trained
    corpus = load_corpus(root / "corpus")
    utt = corpus.items[0]
    write_features(root / "prompt.f32", utt.features)
    args = ("infer", "--config", cfg, "--checkpoint", ck, "--corpus", root / "corpus", "--text", "bad",
            "--prompt-features", root / "prompt.f32", "--prompt-text", utt.text, "--nfe", 4, "--seed", 3)
    for name in ("a", "b"):
        code, lines, _ = run(capsys, *args, "--out", root / f"{name}.f32")
        assert code == 0
    assert (root / "a.f32").read_bytes() == (root / "b.f32").read_bytes()
    summary = lines[-1]
    assert summary["prompt_frames"] == len(utt.features)
    assert summary["frames"] == summary["total_frames"] - summary["prompt_frames"]
    assert read_features(root / "a.f32").shape == (summary["frames"], 4)


def test_infer_text_too_long_for_duration(trained, capsys):
    root, cfg, ck = trained
    code, _, _ = run(capsys, "infer", "--config", cfg, "--checkpoint", ck, "--corpus", root / "corpus", "--text", "abcde", "--duration", 3)
    assert code == 1


def test_infer_needs_vocabulary(trained, capsys):
    root, cfg, ck = trained
    code, _, err = run(capsys, "infer", "--config", cfg, "--checkpoint", ck, "--text", "ab")
    assert code == 2 and "vocab" in err


# -- schedule and verify ------------------------------------------------------------------------


def test_schedule_command(capsys):
    code, lines, _ = run(capsys, "schedule", "--nfe", 4, "--sway", 0, "--cfg", 2)
    assert code == 0
    assert lines[1]["steps"] == [0.0, 0.25, 0.5, 0.75, 1.0]
    assert lines[1]["nfe"] == 4 and lines[1]["evaluations"] == 8


@pytest.mark.parametrize("argv", [("schedule", "--sway", "3"), ("schedule", "--solver", "heun3", "--nfe", "4"), ("verify", "nope")])
def test_usage_errors_exit_two(argv, capsys):
    code, _, err = run(capsys, *argv)
    assert code == 2
    if argv[0] == "verify":
        assert "sway" in err and "gradcheck" in err


def test_verify_identities_report(capsys):
    code, lines, _ = run(capsys, "verify", "identities")
    assert code == 0
    names = [l["check"] for l in lines[1:]]
    assert "identities.adaln_zero_init" in names
    assert all({"value", "bound", "verdict"} <= set(l) and l["verdict"] == "pass" for l in lines[1:])


def test_verify_solvers_emits_three_slopes(capsys):
    code, lines, _ = run(capsys, "verify", "solvers")
    assert code == 0
    assert sum("slope" in l["check"] for l in lines[1:]) == 3


# -- leak-override ----------------------------------------------------------------------------


def test_leak_override_writes_report(trained, capsys):
    root, cfg, ck = trained
    code, lines, _ = run(capsys, "leak-override", "--config", cfg, "--checkpoint", ck, "--corpus", root / "corpus",
                         "--holdout", 4, "--cases", 3, "--nfe", 8, "--out", root / "leak")
    assert code == 0
    assert lines[0]["config"]["sampler"]["t_prime"] == 0.1
    rows = (root / "leak" / "report.jsonl").read_text().splitlines()
    assert 1 <= len(rows) <= 3
    assert 0.0 <= lines[-1]["success_rate"] <= 1.0


@pytest.mark.parametrize("t_prime", ["0", "1.0", "0.8"])
def test_leak_override_rejects_bad_t_prime(trained, capsys, t_prime):
    root, cfg, ck = trained
    code, _, _ = run(capsys, "leak-override", "--config", cfg, "--checkpoint", ck, "--corpus", root / "corpus",
                     "--t-prime", t_prime, "--nfe", 4, "--sway", 0)
    assert code == 2


# -- features --------------------------------------------------------------------------------


def test_features_command(tmp_path, capsys):
    from swayflow.features import Waveform, write_wav

    write_wav(tmp_path / "a.wav", Waveform(0.1 * np.sin(np.arange(24000) * 0.1), 24000))
    code, lines, _ = run(capsys, "features", tmp_path / "a.wav", tmp_path / "a.f32")
    assert code == 0 and lines[-1]["frames"] == 94
    assert read_features(tmp_path / "a.f32").shape == (94, 100)
    code, _, _ = run(capsys, "features", tmp_path / "missing.wav", tmp_path / "b.f32")
    assert code == 1
