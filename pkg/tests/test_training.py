import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from swayflow.corpus import CorpusSpec, generate_synthetic_corpus
from swayflow.model import VectorFieldModel
from swayflow.training import (
    AdamState,
    CheckpointError,
    NonFiniteLossError,
    Trainer,
    TrainingConfig,
    adamw_update,
    choose_drop_mode,
    clip_grad_norm,
    ema_update,
    global_grad_norm,
    load_checkpoint,
    load_inference_model,
    lr_at,
    make_batch,
    make_infilling_mask,
    save_checkpoint,
)
from swayflow.tensor import Tensor
from swayflow.text import FILLER_ID
from swayflow.verify import tiny_model_config

TINY_SPEC = CorpusSpec(count=24, symbols="abcde", feat_dim=4, min_chars=2, max_chars=4, max_frames=12, min_duration=1, max_duration=3)


@pytest.fixture(scope="module")
def tiny_corpus():
    return generate_synthetic_corpus(TINY_SPEC, np.random.default_rng(0))


def tiny_trainer(corpus, **overrides):
    cfg = TrainingConfig(**{"peak_lr": 3e-3, "warmup_updates": 2, "total_updates": 40, "batch_size": 4, **overrides})
    model = VectorFieldModel(tiny_model_config(dropout=0.1), seed=0, dtype=cfg.dtype)
    return Trainer(model, cfg, corpus)


# -- config -------------------------------------------------------------------------


def test_default_config():
    cfg = TrainingConfig()
    assert (cfg.peak_lr, cfg.warmup_updates, cfg.batch_size, cfg.ema_decay) == (1e-3, 200, 16, 0.999)
    assert 3000 <= cfg.total_updates <= 10000
    assert cfg.mask_ratio_range == (0.7, 1.0)
    assert (cfg.cfg_drop_audio, cfg.cfg_drop_both, cfg.grad_clip_norm) == (0.3, 0.2, 1.0)
    assert (cfg.weight_decay, cfg.betas, cfg.adam_eps) == (0.01, (0.9, 0.999), 1e-8)


def test_config_roundtrip_and_validation():
    cfg = TrainingConfig(peak_lr=5e-4, precision="float64")
    assert TrainingConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(KeyError):
        TrainingConfig.from_dict({"lr": 1.0})
    for bad in (dict(mask_ratio_range=(0.9, 0.7)), dict(precision="float16"), dict(batch_size=0), dict(cfg_drop_audio=1.5)):
        with pytest.raises(ValueError):
            TrainingConfig(**bad)


# -- masks and dropout -------------------------------------------------------------------


def test_mask_example():
    mask = make_infilling_mask(10, (0.7, 1.0), np.random.default_rng(0), ratio=0.7)
    assert mask.sum() == 7
    ones = np.flatnonzero(mask)
    assert np.all(np.diff(ones) == 1)


@given(st.integers(1, 300), st.integers(0, 10_000))
def test_mask_is_one_contiguous_span(length, seed):
    rng = np.random.default_rng(seed)
    mask = make_infilling_mask(length, (0.7, 1.0), rng)
    ones = np.flatnonzero(mask)
    assert set(np.unique(mask)) <= {0.0, 1.0}
    assert len(ones) == 0 or ones[-1] - ones[0] + 1 == len(ones)
    assert round(0.7 * length) <= len(ones) <= length


def test_mask_fraction_mean():
    rng = np.random.default_rng(0)
    fractions = [make_infilling_mask(1000, (0.7, 1.0), rng).mean() for _ in range(100_000)]
    assert abs(np.mean(fractions) - 0.85) < 0.005


def test_staged_drop_frequencies():
    rng = np.random.default_rng(0)
    modes = [choose_drop_mode(rng, 0.3, 0.2) for _ in range(100_000)]
    assert abs(modes.count("drop_audio") / len(modes) - 0.30) < 0.01
    assert abs(modes.count("drop_audio_and_text") / len(modes) - 0.14) < 0.01


def test_batch_layout(tiny_corpus):
    items = tiny_corpus.items[:3]
    batch = make_batch(items, tiny_corpus.vocab, TrainingConfig(), np.random.default_rng(0))
    length = max(len(u.features) for u in items)
    assert batch.x1.shape == (3, length, 4)
    for i, u in enumerate(items):
        n = len(u.features)
        assert batch.lengths[i] == n
        np.testing.assert_array_equal(batch.masks[i, n:], 0.0)
        np.testing.assert_array_equal(batch.ids[i, len(u.text) :], FILLER_ID)
        assert batch.frame_mask[i].sum() == n


# -- learning rate, clipping, EMA, optimizer --------------------------------------------


@pytest.mark.parametrize(
    "update,expected",
    [(0, 0.0), (50, 0.5e-3), (100, 1e-3), (550, 0.5e-3), (1000, 0.0), (1200, 0.0)],
)
def test_lr_schedule_pointwise(update, expected):
    assert lr_at(update, 1e-3, 100, 1000) == pytest.approx(expected, abs=1e-18)


@given(st.integers(0, 2000))
def test_lr_bounded(update):
    assert 0.0 <= lr_at(update, 1e-3, 100, 1000) <= 1e-3


def test_clip_hand_value():
    grads = [np.array([3.0]), np.array([4.0])]
    clipped, norm = clip_grad_norm(grads, 1.0)
    assert norm == 5.0
    np.testing.assert_allclose(np.concatenate(clipped), [0.6, 0.8])
    same, _ = clip_grad_norm([np.array([0.3])], 1.0)
    assert same[0][0] == 0.3


@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=20), st.floats(0.1, 5.0))
def test_clip_never_exceeds_max(values, max_norm):
    grads = [np.array(values[: len(values) // 2 + 1]), np.array(values[len(values) // 2 + 1 :])]
    clipped, _ = clip_grad_norm(grads, max_norm)
    assert global_grad_norm(clipped) <= max_norm * (1 + 1e-12)


def test_ema_decay_power():
    shadow = {"w": np.array([0.0])}
    for _ in range(10):
        ema_update(shadow, {"w": np.array([1.0])}, 0.9)
    assert shadow["w"][0] == pytest.approx(1 - 0.9**10, rel=1e-12)


def test_ema_validation():
    with pytest.raises(KeyError):
        ema_update({"a": np.zeros(1)}, {"b": np.zeros(1)}, 0.9)
    with pytest.raises(ValueError):
        ema_update({"a": np.zeros(1)}, {"a": np.zeros(2)}, 0.9)


def test_adamw_first_step_is_sign_step():
    p = {"w": Tensor(np.array([1.0, -2.0]))}
    adamw_update(p, {"w": np.array([0.5, -3.0])}, AdamState(), 0.1, TrainingConfig(weight_decay=0.0))
    np.testing.assert_allclose(p["w"].data, [0.9, -1.9], atol=1e-9)


def test_lr_zero_freezes_parameters_but_advances_ema(tiny_corpus):
    trainer = tiny_trainer(tiny_corpus, peak_lr=0.0)
    before = {k: v.copy() for k, v in trainer.model.state_dict().items()}
    for k in trainer.ema:
        trainer.ema[k] = trainer.ema[k] + 1.0
    gap = {k: np.abs(trainer.ema[k] - before[k]).max() for k in before}
    for _ in range(3):
        trainer.step()
    for k, v in trainer.model.state_dict().items():
        np.testing.assert_array_equal(v, before[k])
        assert np.abs(trainer.ema[k] - v).max() < gap[k]
    assert trainer.opt.step == 3


def test_loss_finite_and_positive(tiny_corpus):
    trainer = tiny_trainer(tiny_corpus)
    loss, info = trainer.loss(trainer.sample_batch(), np.random.default_rng(0))
    assert np.isfinite(loss.item()) and loss.item() > 0
    assert len(info["modes"]) == 4


def test_training_reduces_loss(tiny_corpus):
    trainer = tiny_trainer(tiny_corpus, total_updates=150, peak_lr=1e-2, warmup_updates=10)
    losses = [trainer.step() for _ in range(150)]
    assert np.mean(losses[-30:]) < np.mean(losses[:30])
    assert trainer.last_grad_norm > 0


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_aborts(tiny_corpus):
    trainer = tiny_trainer(tiny_corpus)
    trainer.model.final.proj.weight.data[...] = np.inf
    with pytest.raises(NonFiniteLossError, match="lr="):
        trainer.step()


@pytest.mark.slow
def test_frozen_target_loss_falls_tenfold():
    # one fixed batch of the default toy task; t, x0 and dropout still resampled each update
    from swayflow.model import ModelConfig

    corpus = generate_synthetic_corpus(CorpusSpec(), np.random.default_rng(0))
    cfg = TrainingConfig(total_updates=3000, batch_size=4)
    trainer = Trainer(VectorFieldModel(ModelConfig(), seed=0), cfg, corpus)
    batch = make_batch(corpus.items[:4], corpus.vocab, cfg, np.random.default_rng(1))
    losses = [trainer.step(batch) for _ in range(20)]
    initial = np.mean(losses)
    while trainer.update < 3000 and np.mean(losses[-50:]) >= 0.1 * initial:
        losses.append(trainer.step(batch))
    assert np.mean(losses[-50:]) < 0.1 * initial


def test_ema_differs_from_live_weights(tiny_corpus):
    trainer = tiny_trainer(tiny_corpus)
    for _ in range(10):
        trainer.step()
    live = trainer.model.state_dict()
    assert any(not np.array_equal(live[k], trainer.ema[k]) for k in live)
    ema_model = trainer.ema_model()
    assert not ema_model.training


# -- checkpoints ---------------------------------------------------------------------------


def test_checkpoint_roundtrip_identical_next_loss(tiny_corpus, tmp_path):
    trainer = tiny_trainer(tiny_corpus)
    for _ in range(3):
        trainer.step()
    path = tmp_path / "ck.npz"
    save_checkpoint(trainer, path)
    restored = load_checkpoint(path, tiny_corpus)
    assert restored.update == 3 and restored.cfg == trainer.cfg
    for _ in range(2):
        assert restored.step() == trainer.step()
    for k, v in trainer.model.state_dict().items():
        np.testing.assert_array_equal(restored.model.state_dict()[k], v)
        np.testing.assert_array_equal(restored.ema[k], trainer.ema[k])


def test_inference_model_uses_ema(tiny_corpus, tmp_path):
    trainer = tiny_trainer(tiny_corpus)
    for _ in range(4):
        trainer.step()
    path = tmp_path / "ck.npz"
    trainer.save(path)
    ema = load_inference_model(path).state_dict()
    live = load_inference_model(path, use_ema=False).state_dict()
    for k in ema:
        np.testing.assert_array_equal(ema[k], trainer.ema[k])
        np.testing.assert_array_equal(live[k], trainer.model.state_dict()[k])


def test_truncated_checkpoint_rejected(tiny_corpus, tmp_path):
    path = tmp_path / "ck.npz"
    save_checkpoint(tiny_trainer(tiny_corpus), path)
    data = path.read_bytes()
    path.write_bytes(data[: len(data) // 2])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_missing_field_is_named(tiny_corpus, tmp_path):
    path = tmp_path / "ck.npz"
    save_checkpoint(tiny_trainer(tiny_corpus), path)
    with np.load(path) as npz:
        arrays = {k: npz[k] for k in npz.files}
    victim = next(k for k in arrays if k.startswith("ema/"))
    del arrays[victim]
    np.savez(path, **arrays)
    with pytest.raises(CheckpointError, match=victim):
        load_checkpoint(path)


def test_wrong_format_rejected(tmp_path):
    path = tmp_path / "x.npz"
    np.savez(path, meta=np.frombuffer(b'{"format": "other"}', dtype=np.uint8))
    with pytest.raises(CheckpointError, match="format"):
        load_checkpoint(path)
