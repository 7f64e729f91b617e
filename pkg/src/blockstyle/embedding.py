"""A small deterministic joint text/image embedding space.

Images are summarized by a 64-dim raw feature vector:

* 8 dims: chroma-weighted hue histogram (45 degree bins centred on 0, 45, ...)
* 8 dims: luminance-gradient energy per orientation (22.5 degree bins)
* 48 dims: per-patch mean RGB (4x4 grid, centred at 0.5)

Lexicon words are directions in that same raw space, derived from a canonical
image per word plus a little seeded noise. Both encoders then apply one shared
orthonormal mixing matrix and normalize, so text and image embeddings live in
the same space and can be added and subtracted.
"""

from __future__ import annotations

import colorsys
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateError, InputError, ConfigError
from .imageio import Image
from .kernel import SeededRng, rng_normal

DIM = 64
HUE_BINS = 8
GRAD_BINS = 8
PATCH_GRID = 4

HUE_WEIGHT = 4.0
GRAD_WEIGHT = 8.0
LEXICON_NOISE = 0.25
DEGENERATE_NORM = 1e-9

COLOR_WORDS = {
    "red": 0.0,
    "orange": 45.0,
    "lime": 90.0,
    "green": 135.0,
    "cyan": 180.0,
    "blue": 225.0,
    "violet": 270.0,
    "magenta": 315.0,
}


def _hue_color(deg):
    r, g, b = colorsys.hsv_to_rgb(deg / 360.0, 1.0, 1.0)
    return tuple(int(round(255 * c)) for c in (r, g, b))


def _stripes(size, axis, period=4):
    idx = np.arange(size)
    on = (idx // (period // 2)) % 2 == 0
    px = np.where(on, 255, 0).astype(np.uint8)
    grid = np.broadcast_to(px[:, None] if axis == 0 else px[None, :], (size, size))
    return Image.from_array(np.repeat(grid[:, :, None], 3, axis=2))


def _diagonal(size, period=4):
    i, j = np.indices((size, size))
    on = ((i + j) // (period // 2)) % 2 == 0
    return Image.from_array(np.repeat(np.where(on, 255, 0).astype(np.uint8)[:, :, None], 3, axis=2))


def _checker(size, cell=4):
    i, j = np.indices((size, size))
    on = ((i // cell) + (j // cell)) % 2 == 0
    return Image.from_array(np.repeat(np.where(on, 255, 0).astype(np.uint8)[:, :, None], 3, axis=2))


def canonical_image(word: str, size: int = 16) -> Image:
    """The reference image a lexicon word is anchored to."""
    if word in COLOR_WORDS:
        return Image.solid(_hue_color(COLOR_WORDS[word]), size, size)
    if word == "bright":
        return Image.solid((255, 255, 255), size, size)
    if word == "dark":
        return Image.solid((0, 0, 0), size, size)
    if word == "stripes":
        return _stripes(size, axis=0)
    if word == "columns":
        return _stripes(size, axis=1)
    if word == "diagonal":
        return _diagonal(size)
    if word == "checker":
        return _checker(size)
    raise KeyError(word)


LEXICON_WORDS = tuple(COLOR_WORDS) + ("bright", "dark", "stripes", "columns", "diagonal", "checker")


def luminance(rgb: np.ndarray) -> np.ndarray:
    return rgb[..., 0] * 0.2126 + rgb[..., 1] * 0.7152 + rgb[..., 2] * 0.0722


def hue_histogram(img: Image) -> np.ndarray:
    """Chroma-weighted hue histogram, divided by the pixel count."""
    rgb = img.as_float()
    mx = rgb.max(axis=2)
    chroma = mx - rgb.min(axis=2)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    safe = np.where(chroma > 0, chroma, 1.0)
    h = np.where(
        mx == r,
        ((g - b) / safe) % 6.0,
        np.where(mx == g, (b - r) / safe + 2.0, (r - g) / safe + 4.0),
    )
    deg = h * 60.0
    bins = np.floor(deg / (360.0 / HUE_BINS) + 0.5).astype(np.int64) % HUE_BINS
    hist = np.bincount(bins.ravel(), weights=chroma.ravel(), minlength=HUE_BINS)
    return hist / (img.width * img.height)


def gradient_histogram(img: Image) -> np.ndarray:
    lum = luminance(img.as_float())
    gy = np.gradient(lum, axis=0) if img.height > 1 else np.zeros_like(lum)
    gx = np.gradient(lum, axis=1) if img.width > 1 else np.zeros_like(lum)
    mag = np.hypot(gx, gy)
    theta = np.arctan2(gy, gx) % np.pi
    bins = np.floor(theta / (np.pi / GRAD_BINS) + 0.5).astype(np.int64) % GRAD_BINS
    hist = np.bincount(bins.ravel(), weights=mag.ravel(), minlength=GRAD_BINS)
    return hist / (img.width * img.height)


def patch_means(img: Image) -> np.ndarray:
    rgb = img.as_float() - 0.5
    out = []
    for rows in np.array_split(np.arange(img.height), PATCH_GRID):
        for cols in np.array_split(np.arange(img.width), PATCH_GRID):
            patch = rgb[rows[:, None], cols[None, :]] if len(rows) and len(cols) else np.zeros((1, 1, 3))
            out.append(patch.reshape(-1, 3).mean(axis=0))
    return np.concatenate(out)


def image_features(img: Image) -> np.ndarray:
    """Raw (pre-projection) 64-dim feature vector of an image."""
    if img.width * img.height == 0:
        raise InputError("zero-area image")
    return np.concatenate(
        [HUE_WEIGHT * hue_histogram(img), GRAD_WEIGHT * gradient_histogram(img), patch_means(img)]
    )


def normalize(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v)
    if not n > DEGENERATE_NORM:
        raise DegenerateError(f"cannot normalize a vector of norm {n:.3g}")
    return v / n


def _token_seed(space_seed: int, token: str) -> int:
    digest = hashlib.sha256(f"{space_seed}:{token}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def _random_unit(seed: int) -> np.ndarray:
    return normalize(rng_normal(SeededRng(seed), DIM))


def _mixing_matrix(seed: int) -> np.ndarray:
    g = rng_normal(SeededRng(seed ^ 0x5EED_0F_9A1C), DIM * DIM).reshape(DIM, DIM)
    q, r = np.linalg.qr(g)
    return q * np.sign(np.diag(r))[None, :]


@dataclass(frozen=True)
class ToyJointSpace:
    seed: int
    lexicon: dict = field(repr=False)  # word -> raw-space unit direction
    projection: np.ndarray = field(repr=False)

    @classmethod
    def build(cls, seed: int = 0) -> "ToyJointSpace":
        lexicon = {}
        for word in LEXICON_WORDS:
            anchor = normalize(image_features(canonical_image(word)))
            lexicon[word] = normalize(anchor + LEXICON_NOISE * _random_unit(_token_seed(seed, word)))
        return cls(seed, lexicon, _mixing_matrix(seed))

    def lexicon_json(self) -> str:
        words = {w: [float(x) for x in v] for w, v in sorted(self.lexicon.items())}
        return json.dumps({"dim": DIM, "seed": self.seed, "words": words}, indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_lexicon_json(cls, text: str) -> "ToyJointSpace":
        doc = json.loads(text)
        if doc.get("dim") != DIM:
            raise ConfigError(f"lexicon dimension {doc.get('dim')} != {DIM}")
        lexicon = {w: np.asarray(v, dtype=np.float64) for w, v in doc["words"].items()}
        for w, v in lexicon.items():
            if v.shape != (DIM,):
                raise ConfigError(f"lexicon entry {w!r} has {v.size} values")
        return cls(int(doc["seed"]), lexicon, _mixing_matrix(int(doc["seed"])))

    def project(self, raw) -> np.ndarray:
        return self.projection @ np.asarray(raw, dtype=np.float64)

    def token_direction(self, token: str) -> np.ndarray:
        if token in self.lexicon:
            return self.lexicon[token]
        return _random_unit(_token_seed(self.seed, token))


def tokenize(text: str) -> list[str]:
    return text.lower().split()


def encode_image_toy(space: ToyJointSpace, img: Image) -> np.ndarray:
    return normalize(space.project(image_features(img)))


def encode_text_toy(space: ToyJointSpace, text: str) -> np.ndarray:
    tokens = tokenize(text)
    if not tokens:
        raise InputError("text has no tokens")
    mean = np.mean([space.token_direction(t) for t in tokens], axis=0)
    return normalize(space.project(mean))


def encode_tokens(space: ToyJointSpace, text: str) -> np.ndarray:
    """One embedding row per whitespace token, for use as a text context."""
    tokens = tokenize(text)
    if not tokens:
        raise InputError("text has no tokens")
    return np.stack([normalize(space.project(space.token_direction(t))) for t in tokens])


@dataclass(frozen=True)
class SubtractionConfig:
    lam: float = 0.5
    renormalize: bool = True

    def __post_init__(self):
        if not np.isfinite(self.lam) or not 0.0 <= self.lam <= 2.0:
            raise ConfigError(f"subtraction scale must lie in [0, 2], got {self.lam}")


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise InputError(f"embeddings from different spaces: {a.shape} vs {b.shape}")
    return a, b


def subtract_content(img_emb, content_emb, cfg: SubtractionConfig = SubtractionConfig()) -> np.ndarray:
    """Remove ``cfg.lam`` times the content embedding from an image embedding."""
    img_emb, content_emb = _check_pair(img_emb, content_emb)
    out = img_emb - cfg.lam * content_emb
    if not np.linalg.norm(out) >= DEGENERATE_NORM:
        raise DegenerateError("content subtraction cancelled the image embedding")
    return normalize(out) if cfg.renormalize else out


def joint_query(img_emb, txt_emb, weight: float = 1.0) -> np.ndarray:
    img_emb, txt_emb = _check_pair(img_emb, txt_emb)
    total = normalize(img_emb) + weight * normalize(txt_emb)
    if not np.linalg.norm(total) >= DEGENERATE_NORM:
        raise DegenerateError("joint query terms cancel")
    return normalize(total)


def cosine(a, b) -> float:
    a, b = _check_pair(a, b)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise InputError("cosine of a zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def rank_by_cosine(query, items) -> list[int]:
    """Indices of ``items`` ordered by decreasing cosine to ``query`` (ties by index)."""
    scores = [cosine(query, it) for it in items]
    return sorted(range(len(scores)), key=lambda i: (-scores[i], i))
