"""Backbone checks: patch round-trip, residual identity, gradients."""

import numpy as np
import pytest

from layoutflow import autodiff as ad
from layoutflow.dit import (
    BaseModel,
    ModelConfig,
    patchify,
    run_block,
    timestep_features,
    unpatchify,
)
from layoutflow.errors import ConfigError, DimensionError, ValidationError

MICRO = ModelConfig(
    image_size=8, patch=4, d_model=8, heads=2, head_dim=4, depth=2, text_len=8, max_entities=2
)


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(d_model=65)
    with pytest.raises(ConfigError):
        ModelConfig(d_model=24, heads=4, head_dim=6)  # head_dim not divisible by 4
    with pytest.raises(ConfigError):
        ModelConfig(image_size=30)


def test_patchify_worked_example():
    # 8x8 single channel, patch 4: first token is the top-left 4x4 block
    img = np.arange(64, dtype=np.float64).reshape(8, 8, 1)
    tokens = patchify(ad.Array(img), 4)
    assert tokens.data.shape == (4, 16)
    expect = img[:4, :4, 0].reshape(-1)
    np.testing.assert_array_equal(tokens.data[0], expect)
    np.testing.assert_array_equal(tokens.data[1], img[:4, 4:, 0].reshape(-1))


def test_patchify_round_trip():
    rng = np.random.default_rng(0)
    img = rng.standard_normal((8, 8, 3))
    tokens = patchify(ad.Array(img), 4)
    back = unpatchify(tokens, 4, 8, 8, 3)
    np.testing.assert_array_equal(back.data, img)


def test_patchify_rejects_indivisible_image():
    with pytest.raises(DimensionError):
        patchify(ad.Array(np.zeros((9, 9, 1))), 4)


def test_timestep_features_at_zero():
    f = timestep_features(0.0, 8)
    np.testing.assert_array_equal(f, [0.0, 1.0] * 4)


def test_timestep_embed_validates_range():
    m = BaseModel(MICRO, rng=np.random.default_rng(0))
    with pytest.raises(ValidationError):
        m.timestep_embed(1.5)


def test_encode_text_rejects_bad_ids():
    m = BaseModel(MICRO, rng=np.random.default_rng(0))
    with pytest.raises(ValidationError):
        m.encode_text((0, 99))
    with pytest.raises(ValidationError):
        m.encode_text(())


def test_base_forward_shape_and_determinism():
    m = BaseModel(MICRO, rng=np.random.default_rng(0))
    rng = np.random.default_rng(1)
    x = rng.standard_normal((8, 8, 3))
    a = m.base_forward(x, 0.5, (2, 3, 4, 0)).data
    b = m.base_forward(x, 0.5, (2, 3, 4, 0)).data
    assert a.shape == (8, 8, 3)
    np.testing.assert_array_equal(a, b)


def test_zeroed_output_projections_reduce_to_head_pipeline():
    m = BaseModel(MICRO, rng=np.random.default_rng(2))
    for name, p in m.params.items():
        if ("/o_w" in name or "/o_b" in name or "/ff2_w" in name or "/ff2_b" in name) and name.startswith("block"):
            p.value.data[...] = 0.0
    rng = np.random.default_rng(3)
    x = rng.standard_normal((8, 8, 3))
    got = m.base_forward(x, 0.25, (2, 3)).data
    t_emb = m.timestep_embed(0.25)
    expect = m.finalize(m.embed_image(x), t_emb, x).data
    np.testing.assert_array_equal(got, expect)


def test_attention_rows_sum_to_one():
    m = BaseModel(MICRO, rng=np.random.default_rng(4))
    rng = np.random.default_rng(5)
    X = ad.Array(rng.standard_normal((4, 8)))
    C = ad.Array(rng.standard_normal((3, 8)))
    t_emb = m.timestep_embed(0.7)
    sink = []
    run_block(m.params, "block0", MICRO, X, C, t_emb, m.img_cs, m.zero_cs(3), attn_sink=sink)
    (attn,) = sink
    np.testing.assert_allclose(attn.sum(axis=-1), np.ones((2, 7)), atol=1e-12)


def test_condition_permutation_equivariance():
    # permuting condition tokens (all pinned at the origin) permutes the
    # condition output and leaves the image output unchanged
    m = BaseModel(MICRO, rng=np.random.default_rng(6))
    rng = np.random.default_rng(7)
    X = ad.Array(rng.standard_normal((4, 8)))
    C = ad.Array(rng.standard_normal((3, 8)))
    t_emb = m.timestep_embed(0.4)
    perm = [2, 0, 1]
    X1, C1 = run_block(m.params, "block0", MICRO, X, C, t_emb, m.img_cs, m.zero_cs(3))
    X2, C2 = run_block(
        m.params, "block0", MICRO, X, ad.Array(C.data[perm]), t_emb, m.img_cs, m.zero_cs(3)
    )
    np.testing.assert_allclose(X2.data, X1.data, atol=1e-10)
    np.testing.assert_allclose(C2.data, C1.data[perm], atol=1e-10)


def test_base_gradients_match_finite_differences():
    cfg = MICRO
    m = BaseModel(cfg, rng=np.random.default_rng(8))
    rng = np.random.default_rng(9)
    x = rng.standard_normal((8, 8, 3))
    target = rng.standard_normal((8, 8, 3))

    def f():
        out = m.base_forward(x, 0.3, (2, 5, 7))
        d = ad.sub(out, ad.Array(target))
        return ad.smul(ad.sum_all(ad.mul(d, d)), 1.0 / target.size)

    params = [m.params[k] for k in sorted(m.params)]
    assert ad.finite_diff_check(f, params) <= 1e-4
