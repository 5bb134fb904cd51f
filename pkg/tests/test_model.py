import numpy as np
import pytest

from swayflow import tensor as T
from swayflow.gradcheck import grad_check
from swayflow.model import (
    Attention,
    ConvNeXtV2Block,
    DiTBlock,
    ModelConfig,
    VectorFieldModel,
    drop_conditions,
    flow_step_features,
)
from swayflow.tensor import Tensor
from swayflow.text import FILLER_ID, all_filler, pad_to_length
from swayflow.verify import adaln_zero_identity, block_cases, rope_shift_error, tiny_model_config


def random_config(rng) -> ModelConfig:
    heads = int(rng.integers(1, 4))
    return ModelConfig(
        feat_dim=int(rng.integers(1, 9)),
        capacity=int(rng.integers(16, 40)),
        dit_layers=int(rng.integers(1, 3)),
        dit_dim=heads * 2 * int(rng.integers(1, 5)),
        heads=heads,
        ffn_mult=int(rng.integers(1, 3)),
        convnext_layers=int(rng.integers(0, 3)) or 1,
        convnext_dim=int(rng.integers(2, 12)),
        convnext_kernel=int(rng.choice([1, 3, 5])),
        conv_pos_kernel=int(rng.choice([3, 5, 7])),
        freq_dim=2 * int(rng.integers(2, 8)),
        vocab_size=int(rng.integers(2, 10)),
        dropout=0.0,
    )


def model_inputs(cfg, rng, batch=None, length=None):
    length = length or int(rng.integers(1, cfg.capacity + 1))
    shape = (length, cfg.feat_dim) if batch is None else (batch, length, cfg.feat_dim)
    ids_shape = shape[:-1]
    return (
        rng.standard_normal(shape),
        rng.standard_normal(shape),
        rng.integers(0, cfg.vocab_size, size=ids_shape),
    )


def test_output_shape_over_random_configs():
    rng = np.random.default_rng(3)
    for _ in range(10):
        cfg = random_config(rng)
        model = VectorFieldModel(cfg, seed=int(rng.integers(1000)))
        noisy, cond, ids = model_inputs(cfg, rng)
        assert model(noisy, cond, ids, float(rng.random())).shape == noisy.shape
        noisy, cond, ids = model_inputs(cfg, rng, batch=3)
        assert model(noisy, cond, ids, rng.random(3)).shape == noisy.shape


def test_default_config_matches_toy_scale():
    cfg = ModelConfig()
    assert (cfg.feat_dim, cfg.dit_layers, cfg.dit_dim, cfg.heads, cfg.ffn_mult) == (8, 2, 64, 4, 2)
    assert (cfg.convnext_layers, cfg.convnext_dim, cfg.capacity) == (2, 32, 256)
    assert cfg.dropout == 0.1 and cfg.rope_base == 1e4


@pytest.mark.parametrize("bad", [dict(dit_dim=30, heads=4), dict(heads=3, dit_dim=9), dict(conv_pos_kernel=4), dict(dropout=1.0)])
def test_invalid_configs(bad):
    with pytest.raises(ValueError):
        ModelConfig(**bad)


def test_config_dict_roundtrip():
    cfg = tiny_model_config()
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(KeyError):
        ModelConfig.from_dict({"layers": 3})


def test_stream_length_mismatch_rejected(rng):
    cfg = tiny_model_config()
    model = VectorFieldModel(cfg)
    x = rng.standard_normal((6, cfg.feat_dim))
    with pytest.raises(ValueError, match="length mismatch"):
        model(x, x, np.zeros(5, dtype=int), 0.5)
    with pytest.raises(ValueError):
        model(x, x[:5], np.zeros(6, dtype=int), 0.5)


def test_out_of_range_ids_and_capacity(rng):
    cfg = tiny_model_config()
    model = VectorFieldModel(cfg)
    x = rng.standard_normal((4, cfg.feat_dim))
    with pytest.raises(ValueError, match="out of range"):
        model(x, x, [0, 1, cfg.vocab_size, 0], 0.5)
    with pytest.raises(ValueError, match="out of range"):
        model.refine_text([-1, 0])
    long = rng.standard_normal((cfg.capacity + 1, cfg.feat_dim))
    with pytest.raises(ValueError, match="capacity"):
        model(long, long, np.zeros(cfg.capacity + 1, dtype=int), 0.5)


def test_accepts_extended_sequence(rng):
    cfg = tiny_model_config()
    model = VectorFieldModel(cfg, dtype=np.float64)
    x, c = rng.standard_normal((2, 5, cfg.feat_dim))
    seq = pad_to_length([1, 2, 3], 5)
    np.testing.assert_array_equal(model(x, c, seq, 0.3).data, model(x, c, np.array(seq.ids), 0.3).data)


def test_forward_deterministic(rng):
    cfg = tiny_model_config(dropout=0.1)
    noisy, cond, ids = model_inputs(cfg, rng, batch=2, length=7)
    a = VectorFieldModel(cfg, seed=5)(noisy, cond, ids, [0.2, 0.9])
    b = VectorFieldModel(cfg, seed=5)(noisy, cond, ids, [0.2, 0.9])
    np.testing.assert_array_equal(a.data, b.data)


def test_dropout_only_with_rng_in_training(rng):
    cfg = tiny_model_config(dropout=0.5)
    model = VectorFieldModel(cfg, seed=1)
    for blk in model.blocks:
        blk.ff2.weight.data[...] = rng.standard_normal(blk.ff2.weight.shape)
        blk.modulation.weight.data[...] = rng.standard_normal(blk.modulation.weight.shape)
    noisy, cond, ids = model_inputs(cfg, rng, length=6)
    base = model(noisy, cond, ids, 0.5).data
    model.eval()
    np.testing.assert_array_equal(model(noisy, cond, ids, 0.5, rng=np.random.default_rng(0)).data, base)
    model.train()
    assert not np.array_equal(model(noisy, cond, ids, 0.5, rng=np.random.default_rng(0)).data, base)


def test_padding_frames_do_not_leak(rng):
    cfg = tiny_model_config()
    model = VectorFieldModel(cfg, dtype=np.float64)
    noisy, cond, ids = model_inputs(cfg, rng, batch=1, length=8)
    mask = np.array([[1, 1, 1, 1, 1, 0, 0, 0]], dtype=bool)
    ref = model(noisy, cond, ids, 0.4, frame_mask=mask).data[:, :5]
    noisy2, cond2 = noisy.copy(), cond.copy()
    noisy2[:, 5:] = 99.0
    cond2[:, 5:] = -7.0
    np.testing.assert_allclose(model(noisy2, cond2, ids, 0.4, frame_mask=mask).data[:, :5], ref, atol=1e-12)


# -- flow-step embedding ---------------------------------------------------------


def test_flow_step_features_at_zero():
    feats = flow_step_features(0.0, 16)
    np.testing.assert_array_equal(feats[0, :8], 0.0)
    np.testing.assert_array_equal(feats[0, 8:], 1.0)


def test_flow_step_features_injective_on_grid():
    grid = np.round(np.arange(0, 1.0005, 1e-3), 3)
    feats = flow_step_features(grid, 64)
    gaps = np.linalg.norm(feats[1:] - feats[:-1], axis=1)
    assert gaps.min() > 1e-4
    assert len({tuple(np.round(f, 9)) for f in feats}) == len(grid)


def test_embed_flow_step_pure():
    model = VectorFieldModel(tiny_model_config())
    np.testing.assert_array_equal(model.embed_flow_step(0.37).data, model.embed_flow_step(0.37).data)


# -- text branch -------------------------------------------------------------------


def test_all_filler_text_is_token_independent():
    model = VectorFieldModel(tiny_model_config(), seed=2)
    a = model.refine_text(all_filler(9))
    b = model.refine_text(np.full(9, FILLER_ID))
    np.testing.assert_array_equal(a.data, b.data)
    # position dependent
    assert not np.allclose(a.data[0], a.data[1])


def test_convnext_identity_with_zero_projection(rng):
    block = ConvNeXtV2Block(8, 2, 3, rng, np.float64)
    block.pw2.weight.data[...] = 0.0
    block.pw2.bias.data[...] = 0.0
    x = Tensor(rng.standard_normal((2, 6, 8)))
    np.testing.assert_array_equal(block(x).data, x.data)


@pytest.mark.parametrize("name", ["convnext_v2", "dit_adaln_zero", "conv_position", "flow_step_mlp"])
def test_block_gradients(name):
    f, point = block_cases(np.random.default_rng(0))[name]()
    report = grad_check(f, point, tolerance=1e-4)
    assert report.passed, str(report)


# -- DiT and attention ---------------------------------------------------------------


def test_adaln_zero_identity_at_init():
    assert adaln_zero_identity(seed=0, dtype=np.float64)
    assert adaln_zero_identity(seed=4, dtype=np.float32)


def test_modulation_is_zero_at_init():
    model = VectorFieldModel(ModelConfig())
    for blk in model.blocks:
        assert not np.any(blk.modulation.weight.data)
        assert not np.any(blk.modulation.bias.data)


def test_rope_shift_invariance():
    assert rope_shift_error(seed=0, shifts=(7,)) <= 1e-5
    assert rope_shift_error(seed=1, shifts=(1, 100)) <= 1e-5


def test_rope_offset_zero_is_identity_rotation(rng):
    x = Tensor(rng.standard_normal((1, 2, 1, 4)))
    np.testing.assert_array_equal(T.rope(x, base=1e4, offset=0).data, x.data)


def test_attention_key_bias_masks_keys(rng):
    attn = Attention(8, 2, 1e4, rng, np.float64)
    x = rng.standard_normal((1, 5, 8))
    bias = Tensor(np.array([0, 0, 0, -1e9, -1e9], dtype=float)[None, None, None, :])
    masked = attn(Tensor(x), bias).data[:, :3]
    x2 = x.copy()
    x2[:, 3:] = 50.0
    np.testing.assert_allclose(attn(Tensor(x2), bias).data[:, :3], masked, atol=1e-12)


def test_dit_block_residual_changes_once_gates_open(rng):
    cfg = tiny_model_config()
    block = DiTBlock(cfg, rng, np.float64)
    block.modulation.bias.data[...] = 0.5
    x = Tensor(rng.standard_normal((1, 4, cfg.dit_dim)))
    c = Tensor(rng.standard_normal((1, cfg.dit_dim)))
    assert not np.array_equal(block(x, c).data, x.data)


# -- condition dropping -------------------------------------------------------------


def test_drop_conditions(rng):
    speech = rng.standard_normal((5, 3))
    seq = pad_to_length([1, 2], 5)
    s, z = drop_conditions(speech, seq, "keep")
    assert s is speech and z is seq
    s, z = drop_conditions(speech, seq, "drop_audio")
    np.testing.assert_array_equal(s, 0.0)
    assert z is seq
    s, z = drop_conditions(speech, seq, "drop_audio_and_text")
    np.testing.assert_array_equal(s, 0.0)
    assert z == all_filler(5)
    _, ids = drop_conditions(speech, np.array([[3, 4, 0]]), "drop_audio_and_text")
    np.testing.assert_array_equal(ids, [[0, 0, 0]])
    with pytest.raises(ValueError):
        drop_conditions(speech, seq, "drop_text")
