"""An 11-block transformer denoiser with per-block image-injection hooks.

There is no spatial resampling: every block maps a (64 tokens x 32 channels)
latent to the same shape, so the blocks form a strict chain and an injection
at block k cannot touch the activations of blocks before k.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from functools import cached_property

import numpy as np

from . import istn
from .attention import NO_INJECTION, NUM_BLOCKS, AttnWeights, InjectionConfig, block, decoupled_cross_attention, attention
from .embedding import DIM as EMBED_DIM
from .errors import ConfigError, ImageIOError, ShapeError
from .kernel import SeededRng, as_tensor, matmul, rng_normal

TOKENS = 64
CHANNELS = 32
CTX_DIM = EMBED_DIM
IMG_TOKENS = 4
FF_HIDDEN = 64
T_MAX = 1000
LN_EPS = 1e-5


@dataclass(frozen=True)
class TransformerBlock:
    self_attn: AttnWeights
    cross: AttnWeights
    ff1: np.ndarray
    ff2: np.ndarray


@dataclass(frozen=True)
class UNetTopology:
    blocks: tuple
    image_proj: np.ndarray  # (CTX_DIM, IMG_TOKENS * CTX_DIM)
    head: np.ndarray  # (CHANNELS, CHANNELS)
    time_table: np.ndarray  # (T_MAX + 1, CHANNELS)

    def __post_init__(self):
        if len(self.blocks) != NUM_BLOCKS:
            raise ShapeError(f"a topology needs exactly {NUM_BLOCKS} blocks, got {len(self.blocks)}")

    def image_tokens(self, emb) -> np.ndarray:
        emb = as_tensor(emb, 1)
        if emb.shape != (CTX_DIM,):
            raise ShapeError(f"image embedding must have {CTX_DIM} values")
        return matmul(emb[None, :], self.image_proj).reshape(IMG_TOKENS, CTX_DIM)

    @cached_property
    def fused(self) -> "_FusedPlan":
        return _FusedPlan.build(self)

    def with_block(self, ordinal: int, **changes) -> "UNetTopology":
        blocks = list(self.blocks)
        blocks[ordinal - 1] = replace(blocks[ordinal - 1], **changes)
        return replace(self, blocks=tuple(blocks))


@dataclass(frozen=True)
class Trace:
    activations: tuple  # post-block latent after each of the 11 blocks
    eps: np.ndarray


def layer_norm(x: np.ndarray) -> np.ndarray:
    n = x.shape[1]
    d = x - np.add.reduce(x, axis=1, keepdims=True) / n
    var = np.add.reduce(d * d, axis=1, keepdims=True) / n
    return d / np.sqrt(var + LN_EPS)


def block_forward(blk: TransformerBlock, h, text_ctx, img_tokens, scale: float) -> np.ndarray:
    """Reference form of one block, built from the attention primitives."""
    a = layer_norm(h)
    h = h + attention(a, a, blk.self_attn)
    a = layer_norm(h)
    h = h + decoupled_cross_attention(a, text_ctx, img_tokens, scale, blk.cross)
    a = layer_norm(h)
    return h + matmul(np.tanh(matmul(a, blk.ff1)), blk.ff2)


def _softmax_inplace(z: np.ndarray) -> np.ndarray:
    z -= z.max(axis=1, keepdims=True)
    np.exp(z, out=z)
    z /= np.add.reduce(z, axis=1, keepdims=True)
    return z


@dataclass(frozen=True)
class _FusedPlan:
    """Per-net weight layout for the hot loop.

    Self-attention Q/K/V are one (C, 3d) matrix with the 1/sqrt(d) score scale
    folded into Q, and the text (and image) K/V of all blocks are stacked so a
    context is projected once per forward instead of once per block. The
    result matches ``block_forward`` up to rounding.
    """

    self_qkv: tuple
    cross_q: tuple
    text_kv: np.ndarray  # (CTX_DIM, NUM_BLOCKS * 2d)
    img_kv: np.ndarray
    head_dim: int

    @classmethod
    def build(cls, net: "UNetTopology") -> "_FusedPlan":
        d = net.blocks[0].self_attn.head_dim
        r = 1.0 / math.sqrt(d)
        self_qkv = tuple(np.hstack([b.self_attn.w_q * r, b.self_attn.w_k_text, b.self_attn.w_v_text]) for b in net.blocks)
        cross_q = tuple(b.cross.w_q * r for b in net.blocks)
        text_kv = np.hstack([np.hstack([b.cross.w_k_text, b.cross.w_v_text]) for b in net.blocks])
        img_kv = np.hstack([np.hstack([b.cross.w_k_img, b.cross.w_v_img]) for b in net.blocks])
        return cls(self_qkv, cross_q, text_kv, img_kv, d)


def unet_forward(net: UNetTopology, latent, t: int, text_ctx, img_ctx=None, inj: InjectionConfig = NO_INJECTION, trace: bool = False):
    """Predict the noise for ``latent`` at timestep ``t``.

    ``img_ctx`` is either a 64-dim image embedding (projected to 4 tokens by
    the net) or ready-made context tokens. Returns ``eps`` or ``(eps, Trace)``.
    """
    latent = as_tensor(latent, 2)
    if latent.shape != (TOKENS, CHANNELS):
        raise ShapeError(f"latent must be {TOKENS}x{CHANNELS}, got {latent.shape}")
    if not 0 <= t <= T_MAX:
        raise ConfigError(f"timestep {t} outside [0, {T_MAX}]")
    if img_ctx is None and inj.active():
        raise ConfigError("injection scales are set but no image context was given")
    text_ctx = as_tensor(text_ctx, 2)
    if text_ctx.shape[1] != CTX_DIM:
        raise ShapeError(f"text context must have {CTX_DIM} columns, got {text_ctx.shape}")
    plan = net.fused
    d = plan.head_dim
    text_kv = text_ctx @ plan.text_kv
    img_kv = None
    if inj.active():
        img_ctx = as_tensor(img_ctx)
        img_tokens = net.image_tokens(img_ctx) if img_ctx.ndim == 1 else img_ctx
        if img_tokens.ndim != 2 or img_tokens.shape[1] != CTX_DIM:
            raise ShapeError(f"image tokens must have {CTX_DIM} columns, got {img_tokens.shape}")
        img_kv = img_tokens @ plan.img_kv

    h = latent + net.time_table[t]
    acts = []
    for i, blk in enumerate(net.blocks):
        a = layer_norm(h)
        qkv = a @ plan.self_qkv[i]
        attn = _softmax_inplace(qkv[:, :d] @ qkv[:, d : 2 * d].T) @ qkv[:, 2 * d :]
        h = h + attn @ blk.self_attn.w_out

        a = layer_norm(h)
        q = a @ plan.cross_q[i]
        lo = 2 * d * i
        out = _softmax_inplace(q @ text_kv[:, lo : lo + d].T) @ text_kv[:, lo + d : lo + 2 * d]
        scale = inj.scale(i + 1)
        if scale != 0.0:
            out = out + scale * (_softmax_inplace(q @ img_kv[:, lo : lo + d].T) @ img_kv[:, lo + d : lo + 2 * d])
        h = h + out @ blk.cross.w_out

        a = layer_norm(h)
        h = h + np.tanh(a @ blk.ff1) @ blk.ff2
        if trace:
            acts.append(h)
    eps = layer_norm(h) @ net.head
    return (eps, Trace(tuple(acts), eps)) if trace else eps


def sinusoidal_table(length: int = T_MAX + 1, dim: int = CHANNELS, amplitude: float = 0.5) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = np.arange(length, dtype=np.float64)[:, None] * freqs[None, :]
    return amplitude * np.concatenate([np.sin(args), np.cos(args)], axis=1)


# (name, shape) in declaration order; also the ISTN serialization order.
_SELF_SHAPES = (("w_q", (CHANNELS, CHANNELS)), ("w_k_text", (CHANNELS, CHANNELS)), ("w_v_text", (CHANNELS, CHANNELS)), ("w_out", (CHANNELS, CHANNELS)))
_CROSS_SHAPES = (
    ("w_q", (CHANNELS, CHANNELS)),
    ("w_k_text", (CTX_DIM, CHANNELS)),
    ("w_v_text", (CTX_DIM, CHANNELS)),
    ("w_out", (CHANNELS, CHANNELS)),
    ("w_k_img", (CTX_DIM, CHANNELS)),
    ("w_v_img", (CTX_DIM, CHANNELS)),
)
_FF_SHAPES = (("ff1", (CHANNELS, FF_HIDDEN)), ("ff2", (FF_HIDDEN, CHANNELS)))
_TAIL_SHAPES = (("image_proj", (CTX_DIM, IMG_TOKENS * CTX_DIM)), ("head", (CHANNELS, CHANNELS)), ("time_table", (T_MAX + 1, CHANNELS)))


def _assemble(take) -> UNetTopology:
    """Build a topology by pulling each array, in declaration order, from ``take(shape)``."""
    blocks = []
    for _ in range(NUM_BLOCKS):
        sa = AttnWeights(**{name: take(shape) for name, shape in _SELF_SHAPES})
        cross = AttnWeights(**{name: take(shape) for name, shape in _CROSS_SHAPES})
        ff = {name: take(shape) for name, shape in _FF_SHAPES}
        blocks.append(TransformerBlock(sa, cross, **ff))
    image_proj = take(_TAIL_SHAPES[0][1])
    head = take(_TAIL_SHAPES[1][1])
    time_table = take(_TAIL_SHAPES[2][1])
    return UNetTopology(tuple(blocks), image_proj, head, time_table)


def make_zero_net() -> UNetTopology:
    return _assemble(lambda shape: np.zeros(shape))


def make_toy_net(seed: int) -> UNetTopology:
    """Seeded Gaussian weights scaled by 1/sqrt(fan_in). Seed 0 gives the all-zero net."""
    if seed == 0:
        return make_zero_net()
    rng = SeededRng(seed)
    table = sinusoidal_table()

    def take(shape):
        if shape == table.shape:
            return table
        return rng_normal(rng, shape[0] * shape[1]).reshape(shape) / math.sqrt(shape[0])

    return _assemble(take)


def zero_image_kv(net: UNetTopology, keep=()) -> UNetTopology:
    """Zero the image K/V projections of every block whose ordinal is not in ``keep``."""
    keep = {block(k).ordinal for k in keep}
    for ordinal in range(1, NUM_BLOCKS + 1):
        if ordinal not in keep:
            cross = net.blocks[ordinal - 1].cross
            cross = replace(cross, w_k_img=np.zeros_like(cross.w_k_img), w_v_img=np.zeros_like(cross.w_v_img))
            net = net.with_block(ordinal, cross=cross)
    return net


def make_planted_net(seed: int, hot_block) -> UNetTopology:
    """Toy net whose image K/V projections are zero everywhere except ``hot_block``."""
    return zero_image_kv(make_toy_net(seed), keep=(hot_block,))


def net_arrays(net: UNetTopology) -> list:
    out = []
    for blk in net.blocks:
        out += [getattr(blk.self_attn, name) for name, _ in _SELF_SHAPES]
        out += [getattr(blk.cross, name) for name, _ in _CROSS_SHAPES]
        out += [blk.ff1, blk.ff2]
    out += [net.image_proj, net.head, net.time_table]
    return out


def net_to_bytes(net: UNetTopology) -> bytes:
    return istn.pack(np.concatenate([np.ravel(a) for a in net_arrays(net)]))


def net_from_bytes(data: bytes) -> UNetTopology:
    flat = istn.unpack(data)
    pos = 0

    def take(shape):
        nonlocal pos
        n = shape[0] * shape[1]
        if pos + n > flat.size:
            raise ImageIOError("ISTN net stream is truncated")
        arr = flat[pos : pos + n].reshape(shape)
        pos += n
        return arr

    net = _assemble(take)
    if pos != flat.size:
        raise ImageIOError(f"ISTN net stream has {flat.size - pos} trailing values")
    return net


def save_net(path, net: UNetTopology) -> None:
    try:
        with open(path, "wb") as fh:
            fh.write(net_to_bytes(net))
    except OSError as exc:
        raise ImageIOError(f"cannot write {path}: {exc}") from exc


def load_net(path) -> UNetTopology:
    try:
        with open(path, "rb") as fh:
            return net_from_bytes(fh.read())
    except OSError as exc:
        raise ImageIOError(f"cannot read {path}: {exc}") from exc


def nets_equal(a: UNetTopology, b: UNetTopology) -> bool:
    return all(np.array_equal(x, y) for x, y in zip(net_arrays(a), net_arrays(b)))


STYLE_FIXTURE_GAIN = 4.0
HEAD_COLOR_GAIN = 6.0
LEAK_FIXTURE_GAIN = 3.0
COLOR_CHANNELS = 3


def make_style_fixture_net(seed: int, projection, style_gain: float = STYLE_FIXTURE_GAIN, head_gain: float = HEAD_COLOR_GAIN, leak_gain: float = LEAK_FIXTURE_GAIN) -> UNetTopology:
    """A toy net with a known style block.

    Latent channels 0-2 are colour channels: the block weights have zero rows
    for them (they still enter the layer-norm statistics), and the head passes
    them through with gain ``head_gain`` (identity elsewhere). Image
    token 0 is the un-mixed raw feature vector (``projection`` is the
    embedding space's mixing matrix); tokens 1-3 are seeded views with the hue
    dims zeroed. Block 6 has zero image keys and values that turn the hue
    histogram into a flat offset on the colour channels. Every other block
    gets amplified random image K/V, so injecting there disturbs the layout.
    """
    from .embedding import HUE_BINS, COLOR_WORDS, _hue_color

    base = make_toy_net(seed if seed else 1)
    rng = SeededRng(seed ^ 0xF1C7)
    proj = np.zeros((CTX_DIM, IMG_TOKENS * CTX_DIM))
    proj[:, :CTX_DIM] = np.asarray(projection)
    for i in range(1, IMG_TOKENS):
        view = rng_normal(rng, CTX_DIM * CTX_DIM).reshape(CTX_DIM, CTX_DIM) / math.sqrt(CTX_DIM)
        view[:, :HUE_BINS] = 0.0
        proj[:, i * CTX_DIM : (i + 1) * CTX_DIM] = view

    hues = sorted(COLOR_WORDS.values())
    v_style = np.zeros((CTX_DIM, CHANNELS))
    for b in range(HUE_BINS):
        rgb = np.asarray(_hue_color(hues[b])) / 255.0
        v_style[b, :COLOR_CHANNELS] = -style_gain * (rgb - 0.5)

    def blind(w):
        w = np.array(w)
        w[:COLOR_CHANNELS] = 0.0
        return w

    head = np.eye(CHANNELS)
    head[:COLOR_CHANNELS, :COLOR_CHANNELS] *= head_gain
    net = replace(base, image_proj=proj, head=head)
    for ordinal in range(1, NUM_BLOCKS + 1):
        blk = net.blocks[ordinal - 1]
        sa = replace(blk.self_attn, w_q=blind(blk.self_attn.w_q), w_k_text=blind(blk.self_attn.w_k_text), w_v_text=blind(blk.self_attn.w_v_text))
        cross = replace(blk.cross, w_q=blind(blk.cross.w_q))
        if ordinal == 6:
            # pre-compensate the output projection so the offset lands on the colour channels
            v = np.linalg.solve(cross.w_out.T, v_style.T).T
            cross = replace(cross, w_k_img=np.zeros_like(cross.w_k_img), w_v_img=v)
        else:
            cross = replace(cross, w_k_img=leak_gain * cross.w_k_img, w_v_img=leak_gain * cross.w_v_img)
        net = net.with_block(ordinal, self_attn=sa, cross=cross, ff1=blind(blk.ff1))
    return net
