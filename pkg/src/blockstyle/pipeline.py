"""Stylization runs and the experiment sweeps built on them.

Metrics here are cheap deterministic proxies:

* style distance: L1 distance between normalized 8-bin hue histograms
* layout correlation: Pearson correlation of binarized luminance edge maps
* layout delta: 1 - layout correlation against the un-injected baseline
"""

from __future__ import annotations

import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace
from functools import lru_cache

import numpy as np

from .attention import BLOCKS, MAX_STRENGTH, NO_INJECTION, PRESETS, InjectionConfig, make_preset
from .diffusion import NoiseSchedule, ddim_invert, ddim_sample, round_trip_error
from .embedding import (
    SubtractionConfig,
    ToyJointSpace,
    cosine,
    encode_image_toy,
    encode_text_toy,
    encode_tokens,
    hue_histogram,
    luminance,
    subtract_content,
)
from .errors import ConfigError
from .imageio import Image, read_ppm
from .kernel import SeededRng, rng_normal
from .unet import CHANNELS, TOKENS, UNetTopology, load_net, make_planted_net, make_style_fixture_net, make_toy_net, make_zero_net

GRID = 8  # latent tokens form a GRID x GRID layout
PATCH = 4  # each token decodes to a PATCH x PATCH RGB patch
IMAGE_SIZE = GRID * PATCH
COLOR_GAIN = 0.15
DETAIL_GAIN = 0.03
DECODER_SEED = 0xDEC0DE
INVERT_STEP_GRID = (10, 25, 50, 100)


@lru_cache(maxsize=None)
def decoder_matrix() -> np.ndarray:
    """(CHANNELS, PATCH*PATCH*3) token-to-patch map.

    Channels 0-2 paint a flat R, G, B offset over the whole patch; the
    remaining channels add fixed seeded detail patterns.
    """
    w = np.zeros((CHANNELS, PATCH, PATCH, 3))
    for c in range(3):
        w[c, :, :, c] = COLOR_GAIN
    detail = rng_normal(SeededRng(DECODER_SEED), (CHANNELS - 3) * PATCH * PATCH * 3)
    w[3:] = DETAIL_GAIN * detail.reshape(CHANNELS - 3, PATCH, PATCH, 3)
    w = w.reshape(CHANNELS, -1)
    w.setflags(write=False)
    return w


def decode_latent_float(latent) -> np.ndarray:
    patches = np.asarray(latent, dtype=np.float64) @ decoder_matrix()
    img = patches.reshape(GRID, GRID, PATCH, PATCH, 3).transpose(0, 2, 1, 3, 4)
    return 0.5 + img.reshape(IMAGE_SIZE, IMAGE_SIZE, 3)


def decode_latent(latent) -> Image:
    return Image.from_array(np.clip(decode_latent_float(latent), 0.0, 1.0))


def resize_nearest(img: Image, width: int, height: int) -> Image:
    if (img.width, img.height) == (width, height):
        return img
    rows = (np.arange(height) * img.height) // height
    cols = (np.arange(width) * img.width) // width
    return Image(width, height, img.pixels[rows[:, None], cols[None, :]])


def encode_latent(img: Image) -> np.ndarray:
    """Least-squares inverse of the decoder, after resizing to 32x32."""
    px = resize_nearest(img, IMAGE_SIZE, IMAGE_SIZE).as_float() - 0.5
    patches = px.reshape(GRID, PATCH, GRID, PATCH, 3).transpose(0, 2, 1, 3, 4).reshape(TOKENS, -1)
    return patches @ np.linalg.pinv(decoder_matrix())


def hue_distribution(img: Image) -> np.ndarray:
    h = hue_histogram(img)
    total = h.sum()
    return h / total if total > 0 else h


def style_distance(a: Image, b: Image) -> float:
    return float(np.abs(hue_distribution(a) - hue_distribution(b)).sum())


def edge_map(img: Image) -> np.ndarray:
    lum = luminance(img.as_float())
    mag = np.hypot(np.gradient(lum, axis=0), np.gradient(lum, axis=1))
    return (mag > mag.mean()).astype(np.float64)


def pearson(a, b) -> float:
    a = np.ravel(a) - np.mean(a)
    b = np.ravel(b) - np.mean(b)
    den = math.sqrt(float(a @ a) * float(b @ b))
    return float(a @ b) / den if den > 0 else 0.0


def layout_correlation(a: Image, b: Image) -> float:
    b = resize_nearest(b, a.width, a.height)
    return pearson(edge_map(a), edge_map(b))


@dataclass(frozen=True)
class RunConfig:
    prompt: str = "a house"
    reference: object = None  # PPM path or Image
    content: str | None = None
    preset: str = "style"
    strength: float = 1.0
    layout_strength: float | None = None
    scales: dict | None = None  # explicit per-block scales; overrides preset
    subtract: bool = False
    subtract_lambda: float = 0.5
    renormalize: bool = True
    seed: int = 0
    steps: int = 50
    schedule_T: int = 50
    guidance: float = 1.0
    net: dict = field(default_factory=lambda: {"kind": "toy", "seed": 1})
    space_seed: int = 0
    invert_steps: tuple | None = None
    invert_guidance: tuple | None = None  # optional guidance axis for the inversion report
    out: str | None = None
    report: str | None = None

    def __post_init__(self):
        if not self.prompt or not self.prompt.split():
            raise ConfigError("prompt must be non-empty")
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}")
        if not 0.0 <= self.strength <= MAX_STRENGTH:
            raise ConfigError(f"strength must lie in [0, {MAX_STRENGTH}]")
        if not 0.0 <= self.subtract_lambda <= 2.0:
            raise ConfigError("subtraction lambda must lie in [0, 2]")
        if not 1 <= self.steps <= self.schedule_T:
            raise ConfigError(f"steps must lie in [1, {self.schedule_T}]")
        if self.subtract and not (self.content and self.content.split()):
            raise ConfigError("subtraction needs a content text")
        if not self.guidance >= 0.0:
            raise ConfigError("guidance must be non-negative")
        if self.reference is None:
            raise ConfigError("a reference image is required")
        if self.invert_guidance is not None and not all(g >= 0.0 for g in self.invert_guidance):
            raise ConfigError("inversion guidance values must be non-negative")

    def injection(self) -> InjectionConfig:
        if self.scales is not None:
            return InjectionConfig(self.scales)
        return make_preset(self.preset, self.strength, self.layout_strength)

    def echo(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["net"] = "<in-memory net>" if isinstance(self.net, UNetTopology) else dict(self.net)
        d["reference"] = self.reference if isinstance(self.reference, str) else "<in-memory image>"
        if self.scales is not None:
            d["scales"] = {str(k): v for k, v in sorted(self.scales.items(), key=lambda kv: int(kv[0]))}
        if self.invert_steps is not None:
            d["invert_steps"] = list(self.invert_steps)
        if self.invert_guidance is not None:
            d["invert_guidance"] = list(self.invert_guidance)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        names = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        d = dict(d)
        if d.get("invert_steps") is not None:
            d["invert_steps"] = tuple(int(s) for s in d["invert_steps"])
        if d.get("invert_guidance") is not None:
            d["invert_guidance"] = tuple(float(g) for g in d["invert_guidance"])
        return cls(**d)


@lru_cache(maxsize=32)
def _space(seed: int) -> ToyJointSpace:
    return ToyJointSpace.build(seed)


@lru_cache(maxsize=64)
def _net_cached(kind: str, seed: int, hot: int | None, space_seed: int) -> UNetTopology:
    if kind == "toy":
        return make_toy_net(seed)
    if kind == "zero":
        return make_zero_net()
    if kind == "planted":
        if hot is None:
            raise ConfigError("planted net needs hot_block")
        return make_planted_net(seed, hot)
    if kind == "style-fixture":
        return make_style_fixture_net(seed, _space(space_seed).projection)
    raise ConfigError(f"unknown net kind {kind!r}")


def build_net(spec, space_seed: int = 0) -> UNetTopology:
    if isinstance(spec, UNetTopology):
        return spec
    spec = dict(spec)
    unknown = set(spec) - {"kind", "seed", "hot_block", "path"}
    if unknown:
        raise ConfigError(f"unknown net keys: {', '.join(sorted(unknown))}")
    if spec.get("path") is not None:
        return load_net(spec["path"])
    hot = spec.get("hot_block")
    return _net_cached(spec.get("kind", "toy"), int(spec.get("seed", 1)), None if hot is None else int(hot), space_seed)


@dataclass
class _Setup:
    cfg: RunConfig
    net: UNetTopology
    sched: NoiseSchedule
    space: ToyJointSpace
    reference: Image
    ref_emb: np.ndarray
    text_ctx: np.ndarray
    x_T: np.ndarray


def _setup(cfg: RunConfig) -> _Setup:
    ref = cfg.reference if isinstance(cfg.reference, Image) else read_ppm(cfg.reference)
    space = _space(cfg.space_seed)
    sched = NoiseSchedule(cfg.schedule_T)
    x_T = rng_normal(SeededRng(cfg.seed), TOKENS * CHANNELS).reshape(TOKENS, CHANNELS)
    return _Setup(
        cfg,
        build_net(cfg.net, cfg.space_seed),
        sched,
        space,
        ref,
        encode_image_toy(space, ref),
        encode_tokens(space, cfg.prompt),
        x_T,
    )


def injected_embedding(s: _Setup, cfg: RunConfig) -> np.ndarray:
    if cfg.subtract and cfg.subtract_lambda > 0.0:
        content = encode_text_toy(s.space, cfg.content)
        return subtract_content(s.ref_emb, content, SubtractionConfig(cfg.subtract_lambda, cfg.renormalize))
    return s.ref_emb


def _generate(s: _Setup, cfg: RunConfig, emb, inj: InjectionConfig) -> np.ndarray:
    img_ctx = emb if inj.active() else None
    traj = ddim_sample(s.net, s.sched, s.x_T, s.text_ctx, img_ctx, inj, cfg.steps, cfg.guidance)
    return traj.end


def _unet_evals(cfg: RunConfig) -> int:
    return cfg.steps * (1 if cfg.guidance == 1.0 else 2)


@dataclass(frozen=True)
class StylizeResult:
    image: Image
    latent: np.ndarray
    embedding: np.ndarray
    report: dict


def _stylize(s: _Setup, cfg: RunConfig) -> StylizeResult:
    emb = injected_embedding(s, cfg)
    inj = cfg.injection()
    latent = _generate(s, cfg, emb, inj)
    image = decode_latent(latent)
    report = {
        "config": cfg.echo(),
        "injection": inj.as_dict(),
        "latent_norm": float(np.linalg.norm(latent)),
        "style_distance": style_distance(image, s.reference),
        "layout_correlation": layout_correlation(image, s.reference),
        "timings": {"unet_evals": _unet_evals(cfg)},
    }
    if cfg.content:
        report["content_cosine"] = cosine(emb, encode_text_toy(s.space, cfg.content))
    return StylizeResult(image, latent, emb, report)


def stylize(cfg: RunConfig) -> StylizeResult:
    """Encode the reference, optionally subtract content, sample and decode."""
    return _stylize(_setup(cfg), cfg)


@dataclass
class SweepReport:
    kind: str
    config: dict
    rows: list
    ranking: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)
    images: list = field(default_factory=list, repr=False)  # one per row, not serialized

    def contact_sheet(self) -> Image:
        """All row images side by side, in row order."""
        return Image.from_array(np.concatenate([im.pixels for im in self.images], axis=1))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "config": self.config, "scores": self.rows, "ranking": self.ranking, "timings": self.timings}

    def to_json(self) -> str:
        return dumps(self.to_dict())


def dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"


def _map(fn, items, workers: int):
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def _unzip(pairs):
    return [p[0] for p in pairs], [p[1] for p in pairs]


def _baseline(s: _Setup, cfg: RunConfig):
    latent = _generate(s, cfg, None, NO_INJECTION)
    return latent, decode_latent(latent)


def _score_row(res: StylizeResult, base_latent, base_image) -> dict:
    return {
        "delta_norm": float(np.linalg.norm(res.latent - base_latent)),
        "style_distance": res.report["style_distance"],
        "layout_correlation": res.report["layout_correlation"],
        "layout_delta": 1.0 - layout_correlation(res.image, base_image),
    }


def sweep_blocks(cfg: RunConfig, strength: float | None = None, workers: int = 1) -> SweepReport:
    """Inject into each block alone and rank blocks by output change."""
    strength = cfg.strength if strength is None else strength
    s = _setup(cfg)
    base_latent, base_image = _baseline(s, cfg)

    def run(b):
        res = _stylize(s, replace(cfg, scales={b.ordinal: strength}))
        row = _score_row(res, base_latent, base_image)
        return {"block": b.ordinal, "alias": b.alias, "stage": b.stage, **row}, res.image

    rows, images = _unzip(_map(run, BLOCKS, workers))
    ranking = [r["block"] for r in sorted(rows, key=lambda r: (-r["delta_norm"], r["block"]))]
    evals = _unet_evals(cfg) * (len(rows) + 1)
    return SweepReport("blocks", {**cfg.echo(), "sweep_strength": strength}, rows, ranking, {"unet_evals": evals}, images)


def _check_ascending(values, name, lo=0.0):
    values = [float(v) for v in values]
    if not values:
        raise ConfigError(f"{name} list is empty")
    if any(v < lo for v in values) or any(b <= a for a, b in zip(values, values[1:])):
        raise ConfigError(f"{name} must be ascending and >= {lo}")
    return values


def sweep_subtraction(cfg: RunConfig, lambdas, workers: int = 1) -> SweepReport:
    """Stylize at each subtraction scale; track leakage toward the content text."""
    lambdas = _check_ascending(lambdas, "lambda")
    if not (cfg.content and cfg.content.split()):
        raise ConfigError("subtraction sweep needs a content text")
    s = _setup(cfg)
    base_latent, base_image = _baseline(s, cfg)
    content = encode_text_toy(s.space, cfg.content)

    def run(lam):
        c = replace(cfg, subtract=True, subtract_lambda=lam)
        res = _stylize(s, c)
        row = _score_row(res, base_latent, base_image)
        return {"lambda": lam, "content_cosine": cosine(res.embedding, content), "reference_cosine": cosine(res.embedding, s.ref_emb), **row}, res.image

    rows, images = _unzip(_map(run, lambdas, workers))
    ranking = [r["lambda"] for r in sorted(rows, key=lambda r: (r["content_cosine"], r["lambda"]))]
    return SweepReport("subtraction", cfg.echo(), rows, ranking, {"unet_evals": _unet_evals(cfg) * (len(rows) + 1)}, images)


def sweep_strength(cfg: RunConfig, strengths, workers: int = 1) -> SweepReport:
    """Stylize the configured preset at each strength; report change vs. baseline."""
    strengths = _check_ascending(strengths, "strength")
    if strengths[-1] > MAX_STRENGTH:
        raise ConfigError(f"strengths must not exceed {MAX_STRENGTH}")
    s = _setup(cfg)
    base_latent, base_image = _baseline(s, cfg)

    def run(st):
        res = _stylize(s, replace(cfg, strength=st, scales=None))
        return {"strength": st, **_score_row(res, base_latent, base_image)}, res.image

    rows, images = _unzip(_map(run, strengths, workers))
    ranking = [r["strength"] for r in sorted(rows, key=lambda r: (-r["delta_norm"], r["strength"]))]
    return SweepReport("strength", cfg.echo(), rows, ranking, {"unet_evals": _unet_evals(cfg) * (len(rows) + 1)}, images)


def invert_report(cfg: RunConfig, workers: int = 1) -> tuple[Image, dict]:
    """DDIM-invert the reference latent, resample it, and tabulate the error.

    Returns the reconstruction at ``cfg.steps`` and a report with the
    relative latent error for each step count in the table.
    """
    s = _setup(cfg)
    x0 = encode_latent(s.reference)
    grid = cfg.invert_steps or tuple(n for n in INVERT_STEP_GRID if n <= cfg.schedule_T)
    for n in grid:
        if not 1 <= n <= cfg.schedule_T:
            raise ConfigError(f"invert step count {n} outside [1, {cfg.schedule_T}]")

    def rel_err(n):
        return round_trip_error(s.net, s.sched, x0, s.text_ctx, n, cfg.guidance)

    def rel_err_g(g):
        return round_trip_error(s.net, s.sched, x0, s.text_ctx, cfg.steps, g)

    inv = ddim_invert(s.net, s.sched, x0, s.text_ctx, cfg.steps, guidance=cfg.guidance)
    rec = ddim_sample(s.net, s.sched, inv.end, s.text_ctx, steps=cfg.steps, guidance=cfg.guidance).end
    image = decode_latent(rec)
    table = [{"steps": n, "relative_error": e} for n, e in zip(grid, _map(rel_err, grid, workers))]
    ref_px = resize_nearest(s.reference, IMAGE_SIZE, IMAGE_SIZE).as_float()
    report = {
        "config": cfg.echo(),
        "relative_error": float(np.linalg.norm(rec - x0) / np.linalg.norm(x0)),
        "pixel_rmse": float(np.sqrt(np.mean((image.as_float() - ref_px) ** 2))),
        "style_distance": style_distance(image, s.reference),
        "error_table": table,
        "timings": {"unet_evals": 2 * (cfg.steps + sum(grid)) * (1 if cfg.guidance == 1.0 else 2)},
    }
    if cfg.invert_guidance:
        errs = _map(rel_err_g, cfg.invert_guidance, workers)
        report["guidance_table"] = [{"guidance": g, "steps": cfg.steps, "relative_error": e} for g, e in zip(cfg.invert_guidance, errs)]
        report["timings"]["unet_evals"] += sum(2 * cfg.steps * (1 if g == 1.0 else 2) for g in cfg.invert_guidance)
    return image, report


def wall_clock(fn, *args, **kwargs):
    """Call ``fn`` and return ``(result, seconds)``."""
    t0 = time.perf_counter()
    out = fn(*args, **kwargs)
    return out, time.perf_counter() - t0
