"""Clip encoder: shapes, init statistics, forward identities, gradients."""

import numpy as np

from tspkit import autodiff as ad
from tspkit import encoder as enc
from tspkit import pretrain
from tspkit.sampler import ClipLabels


def test_init_is_deterministic_per_seed():
    cfg = enc.EncoderConfig(channels_in=4, embed_dim=8, blocks=1)
    a = enc.init_params(cfg, seed=0)
    b = enc.init_params(cfg, seed=0)
    c = enc.init_params(cfg, seed=1)
    assert all(np.array_equal(x, y) for x, y in zip(a.arrays(), b.arrays()))
    assert not np.array_equal(a.stem_weight, c.stem_weight)


def test_stem_init_std_matches_he_scaling():
    cfg = enc.EncoderConfig(channels_in=64, height=1, width=1, embed_dim=256, blocks=0)
    params = enc.init_params(cfg, seed=0)
    expected = np.sqrt(2.0 / cfg.frame_dim)
    assert abs(params.stem_weight.std() - expected) / expected < 0.10


def test_param_count_shape_arithmetic():
    cfg = enc.EncoderConfig(channels_in=4, height=1, width=1, embed_dim=8, blocks=1)
    assert enc.param_count(cfg) == 440  # 40 stem + 400 block
    stem_only = enc.EncoderConfig(channels_in=4, height=1, width=1, embed_dim=8, blocks=0)
    assert enc.param_count(stem_only) == 40
    doubled = enc.EncoderConfig(channels_in=4, height=1, width=1, embed_dim=16, blocks=1)
    block = enc.param_count(doubled) - (16 * 4 + 16)
    assert block == 2 * (16 * 16 * 3 + 16)  # ~4x the d=8 block


def test_param_count_matches_actual_arrays():
    cfg = enc.EncoderConfig(channels_in=5, height=1, width=1, embed_dim=12, blocks=3)
    params = enc.init_params(cfg, seed=0)
    assert sum(a.size for a in params.arrays()) == enc.param_count(cfg)


def test_zero_input_no_blocks_gives_relu_of_bias():
    cfg = enc.EncoderConfig(channels_in=3, embed_dim=5, blocks=0)
    params = enc.init_params(cfg, seed=0)
    params.stem_bias[:] = np.array([-1.0, 0.5, 2.0, -0.25, 0.0])
    out = enc.forward_np(params, np.zeros((3, 7)))
    assert np.array_equal(out, np.maximum(params.stem_bias, 0.0))


def test_time_constant_clip_equals_single_frame_output_stem_only():
    # mean-pool identity: without temporal convs, a constant-in-time clip has
    # identical per-frame activations and pooling returns exactly that column
    cfg = enc.EncoderConfig(channels_in=6, embed_dim=10, blocks=0)
    params = enc.init_params(cfg, seed=3)
    frame = np.random.default_rng(0).standard_normal(6)
    clip = np.repeat(frame[:, None], 16, axis=1)
    h = np.maximum(params.stem_weight @ clip + params.stem_bias[:, None], 0.0)
    out = enc.forward_np(params, clip)
    assert all(np.array_equal(h[:, j], h[:, 0]) for j in range(16))
    assert np.array_equal(out, h[:, 0])
    # the stand-alone L=1 pass may differ by BLAS kernel rounding only
    single = enc.forward_np(params, frame[:, None])
    np.testing.assert_allclose(out, single, rtol=0, atol=1e-15)


def test_time_constant_clip_has_constant_interior_activations():
    # with zero-padded temporal convs only the two edge frames deviate
    cfg = enc.EncoderConfig(channels_in=6, embed_dim=10, blocks=1)
    params = enc.init_params(cfg, seed=3)
    frame = np.random.default_rng(1).standard_normal(6)
    clip = np.repeat(frame[:, None], 16, axis=1)
    h = np.maximum(params.stem_weight @ clip + params.stem_bias[:, None], 0.0)
    conv = enc._conv_np(h, params.blocks[0].conv1_kernel, params.blocks[0].conv1_bias)
    interior = conv[:, 2:-2]
    assert np.all(interior == interior[:, :1])
    assert not np.array_equal(conv[:, 0], conv[:, 1])


def test_output_dim_is_feature_dim_for_any_length():
    cfg = enc.EncoderConfig(channels_in=4, embed_dim=7, blocks=1)
    params = enc.init_params(cfg, seed=1)
    for length in (1, 4, 16, 33):
        out = enc.forward_np(params, np.ones((4, length)))
        assert out.shape == (7,)


def test_tape_and_numpy_forward_agree_exactly():
    cfg = enc.EncoderConfig(channels_in=8, embed_dim=12, blocks=2)
    params = enc.init_params(cfg, seed=5)
    rng = np.random.default_rng(7)
    for _ in range(5):
        frames = rng.standard_normal((8, 16))
        tape = ad.Tape()
        leaves = enc.EncoderLeaves(tape, params, requires_grad=False)
        out_tape = enc.forward(tape, leaves, frames)
        assert np.array_equal(out_tape.data, enc.forward_np(params, frames))


def test_geometry_mismatch_raises():
    cfg = enc.EncoderConfig(channels_in=4, embed_dim=8, blocks=0)
    params = enc.init_params(cfg, seed=0)
    try:
        enc.forward_np(params, np.zeros((5, 16)))
    except ad.ShapeError:
        return
    raise AssertionError("expected ShapeError")


def test_full_model_gradient_check_default_config():
    # default encoder width/depth (d=64, B=2) through the two-head loss
    cfg = enc.EncoderConfig(channels_in=16, embed_dim=64, blocks=2)
    rng = np.random.default_rng(11)
    clips = [(rng.standard_normal((16, 16)) * 0.5, ClipLabels(1, 2)),
             (rng.standard_normal((16, 16)) * 0.5, ClipLabels(0, None))]
    gfeat = rng.standard_normal(64) * 0.5
    build = pretrain.two_head_loss_builder(cfg, num_classes=8, mode="tsp",
                                           clips=clips, global_feat=gfeat)
    enc_params = enc.init_params(cfg, seed=0)
    heads = pretrain.init_heads(64, 8, "tsp", seed=0)
    vec = pretrain.flatten_params(enc_params, heads)
    res = ad.gradient_check(build, vec, coords=100, h=1e-6, seed=0)
    assert res.max_rel_err <= 1e-5
