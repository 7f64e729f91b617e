import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from blockstyle.attention import (
    BLOCKS,
    LAYOUT_BLOCK,
    NO_INJECTION,
    STYLE_BLOCK,
    AttnWeights,
    InjectionConfig,
    attention,
    block,
    decoupled_cross_attention,
    image_branch,
    make_preset,
    sdpa,
)
from blockstyle.errors import ConfigError, ShapeError
from blockstyle.kernel import SeededRng, rng_normal, softmax_rows


def weights(seed, c=6, ctx=5, d=4):
    rng = SeededRng(seed)

    def m(r, k):
        return rng_normal(rng, r * k).reshape(r, k)

    return AttnWeights(m(c, d), m(ctx, d), m(ctx, d), m(d, c), m(ctx, d), m(ctx, d))


def inputs(seed, n=3, c=6, ctx=5):
    rng = SeededRng(seed)
    return (rng_normal(rng, n * c).reshape(n, c), rng_normal(rng, 2 * ctx).reshape(2, ctx), rng_normal(rng, 4 * ctx).reshape(4, ctx))


def test_block_lookup():
    assert block(4).alias == "down_blocks.2.attentions.1"
    assert block("up_blocks.0.attentions.1").ordinal == 6
    assert block(LAYOUT_BLOCK).stage == "down"
    assert block(STYLE_BLOCK).stage == "up"
    with pytest.raises(ConfigError):
        block(12)
    with pytest.raises(ConfigError):
        block("up_blocks.9.attentions.0")


def test_sdpa_single_key():
    q = np.ones((3, 2))
    k = np.array([[5.0, -1.0]])
    v = np.array([[7.0, 8.0]])
    assert np.array_equal(sdpa(q, k, v), np.tile([[7.0, 8.0]], (3, 1)))


def test_sdpa_by_hand():
    q = np.array([[1.0, 0.0]])
    k = np.array([[1.0, 0.0], [0.0, 1.0]])
    v = np.array([[1.0], [3.0]])
    p = softmax_rows([[1 / np.sqrt(2), 0.0]])
    np.testing.assert_allclose(sdpa(q, k, v), p @ v, rtol=1e-15)


def test_sdpa_shape_error():
    with pytest.raises(ShapeError):
        sdpa(np.ones((2, 3)), np.ones((2, 4)), np.ones((2, 1)))


def test_weights_validate():
    w = weights(0)
    with pytest.raises(ShapeError):
        AttnWeights(w.w_q, w.w_k_text[:, :3], w.w_v_text, w.w_out)
    with pytest.raises(ShapeError):
        AttnWeights(w.w_q, w.w_k_text, w.w_v_text, w.w_out, w_k_img=w.w_k_img)


def test_weights_frozen_copies():
    arr = np.ones((6, 4))
    w = AttnWeights(arr, np.ones((5, 4)), np.ones((5, 4)), np.ones((4, 6)))
    arr[0, 0] = 9.0
    assert w.w_q[0, 0] == 1.0
    with pytest.raises(ValueError):
        w.w_q[0, 0] = 2.0


@settings(max_examples=50)
@given(st.integers(0, 10_000), st.floats(0.0, 2.0))
def test_decoupled_is_text_plus_scaled_image(seed, s):
    w = weights(seed)
    q, txt, img = inputs(seed + 1)
    expected = (attention(q, txt, w, project=False) + s * image_branch(q, img, w)) @ w.w_out
    np.testing.assert_allclose(decoupled_cross_attention(q, txt, img, s, w), expected, atol=1e-12)


def test_zero_scale_ignores_image():
    w = weights(3)
    q, txt, _ = inputs(4)
    assert decoupled_cross_attention(q, txt, None, 0.0, w).tobytes() == attention(q, txt, w).tobytes()


def test_negative_scale_rejected():
    w = weights(3)
    q, txt, img = inputs(4)
    with pytest.raises(ConfigError):
        decoupled_cross_attention(q, txt, img, -0.1, w)


def test_positive_scale_needs_image():
    w = weights(3)
    q, txt, _ = inputs(4)
    with pytest.raises(ConfigError):
        decoupled_cross_attention(q, txt, None, 1.0, w)


def test_image_branch_requires_projections():
    w = weights(3)
    plain = AttnWeights(w.w_q, w.w_k_text, w.w_v_text, w.w_out)
    q, _, img = inputs(4)
    with pytest.raises(ShapeError):
        image_branch(q, img, plain)


def test_presets():
    assert make_preset("all").active() == list(range(1, 12))
    assert make_preset("style").as_dict() == {"6": 1.0}
    assert make_preset("style+layout", 0.5).as_dict() == {"4": 0.5, "6": 0.5}
    assert make_preset("style+layout", 1.0, layout_strength=0.25).as_dict() == {"4": 0.25, "6": 1.0}
    assert make_preset("style", 0.0) == NO_INJECTION
    with pytest.raises(ConfigError):
        make_preset("everything")


def test_injection_config_validates():
    with pytest.raises(ConfigError):
        InjectionConfig({0: 1.0})
    with pytest.raises(ConfigError):
        InjectionConfig({3: 2.5})
    with pytest.raises(ConfigError):
        InjectionConfig({3: -1.0})
    inj = InjectionConfig({"up_blocks.0.attentions.1": 1.0, 2: 0.0})
    assert inj.active() == [6]
    assert inj.first_active() == 6
    assert NO_INJECTION.first_active() is None


def test_injection_config_immutable_and_hashable():
    inj = InjectionConfig({6: 1.0})
    with pytest.raises(TypeError):
        inj.scales[6] = 2.0
    assert hash(inj) == hash(InjectionConfig({6: 1.0}))
    assert inj == InjectionConfig({6: 1.0, 4: 0.0})


def test_block_table_order():
    assert [b.ordinal for b in BLOCKS] == list(range(1, 12))
