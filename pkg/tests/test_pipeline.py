import json
from dataclasses import replace

import numpy as np
import pytest

from blockstyle.attention import AttnWeights
from blockstyle.errors import ConfigError, ImageIOError
from blockstyle.imageio import Image, write_ppm
from blockstyle.kernel import seeded_normal
from blockstyle.pipeline import (
    COLOR_GAIN,
    IMAGE_SIZE,
    RunConfig,
    build_net,
    decode_latent,
    decode_latent_float,
    decoder_matrix,
    dumps,
    encode_latent,
    invert_report,
    layout_correlation,
    resize_nearest,
    style_distance,
    stylize,
    sweep_blocks,
    sweep_strength,
    sweep_subtraction,
)
from blockstyle.unet import CHANNELS, CTX_DIM, IMG_TOKENS, TOKENS, make_toy_net, make_zero_net, nets_equal

from helpers import red_stripes_reference


@pytest.fixture(scope="module")
def ref():
    return red_stripes_reference()


def cfg_for(ref, **kw):
    base = dict(prompt="a house", reference=ref, steps=6, seed=3)
    base.update(kw)
    return RunConfig(**base)


# --- decoder and metrics --------------------------------------------------------


def test_decoder_full_rank():
    D = decoder_matrix()
    assert D.shape == (CHANNELS, 48)
    np.testing.assert_allclose(D @ np.linalg.pinv(D), np.eye(CHANNELS), atol=1e-12)


def test_zero_latent_decodes_to_gray():
    img = decode_latent(np.zeros((TOKENS, CHANNELS)))
    assert (img.width, img.height) == (IMAGE_SIZE, IMAGE_SIZE)
    assert np.all(img.pixels == 128)


def test_colour_channel_paints_flat_offset():
    z = np.zeros((TOKENS, CHANNELS))
    z[:, 0] = 1.0
    f = decode_latent_float(z)
    np.testing.assert_allclose(f[..., 0], 0.5 + COLOR_GAIN)
    np.testing.assert_allclose(f[..., 1:], 0.5)


def test_encode_decode_round_trip():
    z = seeded_normal(1, (TOKENS, CHANNELS), 0.3)
    back = encode_latent(decode_latent(z))
    # the encoder projects each patch onto the decoder's range, so per patch the
    # error is at most the uint8 rounding error's norm (no clipping at this scale)
    diff = (back - z) @ decoder_matrix()
    assert np.linalg.norm(diff, axis=1).max() <= np.sqrt(48) * 0.5 / 255


def test_resize_nearest():
    img = Image.from_array(np.arange(12, dtype=np.uint8).reshape(2, 2, 3))
    big = resize_nearest(img, 4, 4)
    assert big.pixels[3, 3].tolist() == img.pixels[1, 1].tolist()
    assert resize_nearest(img, 2, 2) is img


def test_style_distance_bounds():
    red, blue = Image.solid((255, 0, 0)), Image.solid((0, 0, 255))
    assert style_distance(red, red) == 0.0
    assert style_distance(red, blue) == pytest.approx(2.0)


def test_layout_correlation(ref):
    assert layout_correlation(ref, ref) == pytest.approx(1.0)
    assert layout_correlation(ref, Image.solid((9, 9, 9))) == 0.0
    cols = Image.from_array(np.array(ref.pixels).transpose(1, 0, 2))
    assert layout_correlation(ref, cols) < 0.5


# --- config -------------------------------------------------------------------


@pytest.mark.parametrize(
    "kw",
    [
        {"prompt": " "},
        {"preset": "bogus"},
        {"strength": 2.5},
        {"subtract_lambda": -1.0},
        {"steps": 0},
        {"steps": 51},
        {"subtract": True},
        {"guidance": -1.0},
        {"reference": None},
    ],
)
def test_config_rejects(ref, kw):
    with pytest.raises(ConfigError):
        cfg_for(ref, **kw)


def test_config_from_dict(ref):
    cfg = RunConfig.from_dict({"reference": "x.ppm", "preset": "all", "invert_steps": [5, 10]})
    assert cfg.invert_steps == (5, 10)
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"reference": "x.ppm", "colour": "red"})


def test_echo_is_json(ref):
    cfg = cfg_for(ref, scales={"6": 0.5, 4: 1.0}, invert_steps=(2, 3))
    d = json.loads(dumps(cfg.echo()))
    assert d["reference"] == "<in-memory image>"
    assert d["scales"] == {"4": 1.0, "6": 0.5}


def test_dumps_rejects_nan():
    with pytest.raises(ValueError):
        dumps({"x": float("nan")})


def test_build_net_kinds(tmp_path):
    assert nets_equal(build_net({"kind": "toy", "seed": 2}), make_toy_net(2))
    assert nets_equal(build_net({"kind": "zero"}), make_zero_net())
    with pytest.raises(ConfigError):
        build_net({"kind": "planted", "seed": 2})
    with pytest.raises(ConfigError):
        build_net({"kind": "huge"})
    with pytest.raises(ConfigError):
        build_net({"kind": "toy", "colour": 1})
    with pytest.raises(ImageIOError):
        build_net({"path": str(tmp_path / "missing.istn")})


# --- stylize ------------------------------------------------------------------


def test_stylize_report_fields(ref):
    res = stylize(cfg_for(ref, content="stripes"))
    r = json.loads(dumps(res.report))
    assert set(r) == {"config", "injection", "latent_norm", "style_distance", "layout_correlation", "timings", "content_cosine"}
    assert r["injection"] == {"6": 1.0}
    assert r["timings"] == {"unet_evals": 6}
    assert res.image.width == IMAGE_SIZE


def test_stylize_reads_ppm(ref, tmp_path):
    write_ppm(tmp_path / "r.ppm", ref)
    a = stylize(cfg_for(ref))
    b = stylize(cfg_for(str(tmp_path / "r.ppm")))
    assert a.image == b.image


@pytest.mark.parametrize("preset", ["all", "style", "style+layout"])
def test_strength_zero_is_baseline(ref, preset):
    base = stylize(cfg_for(ref, scales={}))
    zero = stylize(cfg_for(ref, preset=preset, strength=0.0))
    assert base.latent.tobytes() == zero.latent.tobytes()


def test_injection_changes_output(ref):
    assert stylize(cfg_for(ref)).latent.tobytes() != stylize(cfg_for(ref, strength=0.0)).latent.tobytes()


def test_zero_lambda_matches_no_subtraction(ref):
    plain = stylize(cfg_for(ref, content="stripes"))
    lam0 = stylize(cfg_for(ref, content="stripes", subtract=True, subtract_lambda=0.0))
    assert plain.latent.tobytes() == lam0.latent.tobytes()


def test_subtraction_lowers_content_cosine(ref):
    a = stylize(cfg_for(ref, content="stripes"))
    b = stylize(cfg_for(ref, content="stripes", subtract=True, subtract_lambda=0.75))
    assert b.report["content_cosine"] < a.report["content_cosine"]


def test_guidance_doubles_evals(ref):
    assert stylize(cfg_for(ref, guidance=2.0)).report["timings"]["unet_evals"] == 12


def test_seed_changes_output(ref):
    assert stylize(cfg_for(ref, seed=1)).latent.tobytes() != stylize(cfg_for(ref, seed=2)).latent.tobytes()


# --- sweeps -------------------------------------------------------------------


def test_sweep_blocks_rows_reproducible(ref):
    cfg = cfg_for(ref, steps=4)
    rep = sweep_blocks(cfg, strength=0.8)
    base = stylize(cfg_for(ref, steps=4, scales={}))
    for row in (rep.rows[0], rep.rows[5], rep.rows[10]):
        single = stylize(replace(cfg, scales={row["block"]: 0.8}))
        assert row["delta_norm"] == float(np.linalg.norm(single.latent - base.latent))
        assert row["style_distance"] == single.report["style_distance"]
    assert sorted(rep.ranking) == list(range(1, 12))
    assert rep.timings == {"unet_evals": 4 * 12}


def test_sweep_parallel_matches_sequential(ref):
    cfg = cfg_for(ref, steps=3)
    seq = sweep_blocks(cfg, workers=1)
    par = sweep_blocks(cfg, workers=3)
    assert seq.to_json() == par.to_json()
    assert seq.contact_sheet() == par.contact_sheet()


def _twin_net():
    """Blocks 3 and 8 are identical image-only readers; every other block is zero."""
    d = 32
    cross = AttnWeights(
        w_q=seeded_normal(1, (CHANNELS, d), 0.2),
        w_k_text=seeded_normal(2, (CTX_DIM, d)),
        w_v_text=np.zeros((CTX_DIM, d)),
        w_out=seeded_normal(3, (d, CHANNELS), 0.2),
        w_k_img=seeded_normal(4, (CTX_DIM, d)),
        w_v_img=seeded_normal(5, (CTX_DIM, d)),
    )
    net = make_zero_net()
    net = replace(net, head=seeded_normal(6, (CHANNELS, CHANNELS), 0.3), image_proj=seeded_normal(7, (CTX_DIM, IMG_TOKENS * CTX_DIM), 0.2))
    for k in (3, 8):
        net = net.with_block(k, cross=cross)
    return net


def test_sweep_twin_blocks_tie(ref):
    rep = sweep_blocks(cfg_for(ref, net=_twin_net(), steps=5))
    scores = {r["block"]: r["delta_norm"] for r in rep.rows}
    assert scores[3] == scores[8] > 0
    assert all(v == 0.0 for k, v in scores.items() if k not in (3, 8))
    assert rep.ranking[:2] == [3, 8]


def test_sweep_subtraction(ref):
    rep = sweep_subtraction(cfg_for(ref, content="stripes", steps=3), [0.0, 0.5, 1.0])
    cos = [r["content_cosine"] for r in rep.rows]
    assert cos[0] > cos[1] > cos[2]
    assert rep.ranking == [1.0, 0.5, 0.0]
    with pytest.raises(ConfigError):
        sweep_subtraction(cfg_for(ref, steps=3), [0.0, 1.0])
    with pytest.raises(ConfigError):
        sweep_subtraction(cfg_for(ref, content="x", steps=3), [1.0, 0.5])


def test_sweep_strength(ref):
    rep = sweep_strength(cfg_for(ref, preset="all", steps=3), [0.0, 1.0, 2.0])
    assert rep.rows[0]["delta_norm"] == 0.0
    assert rep.rows[0]["layout_delta"] == pytest.approx(0.0, abs=1e-12)
    assert rep.rows[2]["delta_norm"] > 0.0
    assert rep.contact_sheet().width == 3 * IMAGE_SIZE
    with pytest.raises(ConfigError):
        sweep_strength(cfg_for(ref, steps=3), [0.0, 3.0])
    with pytest.raises(ConfigError):
        sweep_strength(cfg_for(ref, steps=3), [])


# --- inversion report ------------------------------------------------------------


def test_invert_report(ref):
    cfg = cfg_for(ref, schedule_T=100, steps=25, invert_steps=(10, 25, 50, 100))
    img, rep = invert_report(cfg)
    errs = [row["relative_error"] for row in rep["error_table"]]
    assert [row["steps"] for row in rep["error_table"]] == [10, 25, 50, 100]
    assert all(e > 0 for e in errs)
    assert all(b <= 1.05 * a for a, b in zip(errs, errs[1:]))
    assert rep["relative_error"] == pytest.approx(errs[1])
    assert rep["timings"] == {"unet_evals": 2 * (25 + 185)}
    assert img.width == IMAGE_SIZE


def test_invert_default_grid_respects_schedule(ref):
    _, rep = invert_report(cfg_for(ref, steps=5))
    assert [row["steps"] for row in rep["error_table"]] == [10, 25, 50]


def test_invert_rejects_long_grid(ref):
    with pytest.raises(ConfigError):
        invert_report(cfg_for(ref, invert_steps=(10, 100)))


def test_invert_guidance_axis(ref):
    _, rep = invert_report(cfg_for(ref, steps=5, invert_steps=(5,), invert_guidance=(1.0, 3.0)))
    table = rep["guidance_table"]
    assert [r["guidance"] for r in table] == [1.0, 3.0]
    assert table[0]["relative_error"] == rep["error_table"][0]["relative_error"]
    assert table[1]["relative_error"] != table[0]["relative_error"]
    assert rep["timings"] == {"unet_evals": 2 * (5 + 5) + 2 * 5 + 4 * 5}
