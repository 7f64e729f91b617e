"""Single-head attention, IP-Adapter style decoupled cross-attention, and the
11-block injection map (4 down, 1 mid, 6 up)."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from types import MappingProxyType

import numpy as np

from .errors import ConfigError, ShapeError
from .kernel import as_tensor, matmul, softmax_rows

MAX_STRENGTH = 2.0


@dataclass(frozen=True)
class BlockId:
    ordinal: int
    stage: str
    alias: str


# Ordinals 6 and 7 carry swapped SDXL names so that the sixth block is the
# up_blocks.0.attentions.1 style block.
BLOCKS = (
    BlockId(1, "down", "down_blocks.1.attentions.0"),
    BlockId(2, "down", "down_blocks.1.attentions.1"),
    BlockId(3, "down", "down_blocks.2.attentions.0"),
    BlockId(4, "down", "down_blocks.2.attentions.1"),
    BlockId(5, "mid", "mid_block.attentions.0"),
    BlockId(6, "up", "up_blocks.0.attentions.1"),
    BlockId(7, "up", "up_blocks.0.attentions.0"),
    BlockId(8, "up", "up_blocks.0.attentions.2"),
    BlockId(9, "up", "up_blocks.1.attentions.0"),
    BlockId(10, "up", "up_blocks.1.attentions.1"),
    BlockId(11, "up", "up_blocks.1.attentions.2"),
)
NUM_BLOCKS = len(BLOCKS)
LAYOUT_BLOCK = 4
STYLE_BLOCK = 6
PRESETS = ("all", "style", "style+layout")


def block(key) -> BlockId:
    """Look a block up by ordinal or alias."""
    for b in BLOCKS:
        if key == b.ordinal or key == b.alias:
            return b
    raise ConfigError(f"unknown block {key!r}")


@dataclass(frozen=True)
class AttnWeights:
    """Projections for one attention layer.

    ``w_k_img``/``w_v_img`` may be None for layers without an image branch
    (self-attention). Shapes: w_q (C, d), w_k_* (ctx_dim, d), w_v_* (ctx_dim, d),
    w_out (d, C).
    """

    w_q: np.ndarray
    w_k_text: np.ndarray
    w_v_text: np.ndarray
    w_out: np.ndarray
    w_k_img: np.ndarray | None = None
    w_v_img: np.ndarray | None = None

    def __post_init__(self):
        for name in ("w_q", "w_k_text", "w_v_text", "w_out", "w_k_img", "w_v_img"):
            val = getattr(self, name)
            if val is not None:
                arr = as_tensor(val, 2).copy()
                arr.setflags(write=False)
                object.__setattr__(self, name, arr)
        d = self.head_dim
        if self.w_k_text.shape[1] != d or self.w_v_text.shape[1] != self.w_out.shape[0]:
            raise ShapeError("text K/V projections do not match the query/output dims")
        if (self.w_k_img is None) != (self.w_v_img is None):
            raise ShapeError("image K and V projections must be given together")
        if self.w_k_img is not None:
            if self.w_k_img.shape[1] != d or self.w_v_img.shape[1] != self.w_v_text.shape[1]:
                raise ShapeError("image K/V output dims must equal the text K/V output dims")

    @property
    def head_dim(self) -> int:
        return self.w_q.shape[1]

    def arrays(self):
        return [self.w_q, self.w_k_text, self.w_v_text, self.w_out, self.w_k_img, self.w_v_img]


def sdpa(q, k, v) -> np.ndarray:
    """softmax(q k^T / sqrt(d)) v"""
    if q.shape[1] != k.shape[1] or k.shape[0] != v.shape[0]:
        raise ShapeError(f"attention shapes do not conform: q{q.shape} k{k.shape} v{v.shape}")
    scores = matmul(q, k.T) / math.sqrt(q.shape[1])
    return matmul(softmax_rows(scores), v)


def attention(q_in, ctx, w: AttnWeights, project: bool = True) -> np.ndarray:
    """Text-half attention: queries from ``q_in``, keys/values from ``ctx``."""
    q_in = as_tensor(q_in, 2)
    ctx = as_tensor(ctx, 2)
    out = sdpa(matmul(q_in, w.w_q), matmul(ctx, w.w_k_text), matmul(ctx, w.w_v_text))
    return matmul(out, w.w_out) if project else out


def image_branch(q_in, img_ctx, w: AttnWeights) -> np.ndarray:
    """Pre-projection image attention term (before scaling)."""
    if w.w_k_img is None:
        raise ShapeError("layer has no image K/V projections")
    q_in = as_tensor(q_in, 2)
    img_ctx = as_tensor(img_ctx, 2)
    return sdpa(matmul(q_in, w.w_q), matmul(img_ctx, w.w_k_img), matmul(img_ctx, w.w_v_img))


def decoupled_cross_attention(q_in, text_ctx, img_ctx, scale: float, w: AttnWeights, project: bool = True) -> np.ndarray:
    """Attn(Q, K_text, V_text) + scale * Attn(Q, K_img, V_img), then w_out.

    At ``scale == 0`` the image branch is skipped, so the result is bitwise the
    text-only attention and ``img_ctx`` may be None.
    """
    if not scale >= 0.0:
        raise ConfigError(f"injection scale must be non-negative, got {scale}")
    out = attention(q_in, text_ctx, w, project=False)
    if scale != 0.0:
        if img_ctx is None:
            raise ConfigError("positive injection scale without an image context")
        out = out + scale * image_branch(q_in, img_ctx, w)
    return matmul(out, w.w_out) if project else out


@dataclass(frozen=True)
class InjectionConfig:
    """Per-block image-injection scales keyed by ordinal; absent means 0."""

    scales: dict = field(default_factory=dict)

    def __post_init__(self):
        clean = {}
        for key, val in dict(self.scales).items():
            b = block(int(key) if isinstance(key, str) and key.isdigit() else key)
            val = float(val)
            if not math.isfinite(val) or not 0.0 <= val <= MAX_STRENGTH:
                raise ConfigError(f"scale for block {b.ordinal} must lie in [0, {MAX_STRENGTH}], got {val}")
            clean[b.ordinal] = val
        object.__setattr__(self, "scales", MappingProxyType(dict(sorted(clean.items()))))

    def scale(self, ordinal: int) -> float:
        return self.scales.get(ordinal, 0.0)

    def active(self) -> list[int]:
        return [k for k, v in self.scales.items() if v > 0.0]

    def first_active(self) -> int | None:
        act = self.active()
        return act[0] if act else None

    def as_dict(self) -> dict:
        return {str(k): v for k, v in self.scales.items()}

    def _effective(self):
        # absent means 0, so explicit zero entries do not change behaviour
        return tuple((k, v) for k, v in self.scales.items() if v != 0.0)

    def __eq__(self, other):
        if not isinstance(other, InjectionConfig):
            return NotImplemented
        return self._effective() == other._effective()

    def __hash__(self):
        return hash(self._effective())


NO_INJECTION = InjectionConfig()


def make_preset(name: str, strength: float = 1.0, layout_strength: float | None = None) -> InjectionConfig:
    """Named injection presets.

    ``all`` sets every block, ``style`` only the style block (6) and
    ``style+layout`` blocks 4 and 6. ``layout_strength`` overrides block 4 in
    the combined preset; it defaults to ``strength``.
    """
    if not strength >= 0.0:
        raise ConfigError(f"strength must be non-negative, got {strength}")
    if name == "all":
        return InjectionConfig({b.ordinal: strength for b in BLOCKS})
    if name == "style":
        return InjectionConfig({STYLE_BLOCK: strength})
    if name == "style+layout":
        layout = strength if layout_strength is None else layout_strength
        return InjectionConfig({LAYOUT_BLOCK: layout, STYLE_BLOCK: strength})
    raise ConfigError(f"unknown preset {name!r}; expected one of {', '.join(PRESETS)}")
