"""Shared test builders: the planted retrieval corpus and reference images."""

import numpy as np

from blockstyle.embedding import canonical_image
from blockstyle.imageio import Image
from blockstyle.kernel import SeededRng

CAR_COLORS = {
    "red": (255, 0, 0),
    "blue": (0, 64, 255),
    "green": (0, 200, 60),
    "orange": (255, 190, 0),
    "magenta": (255, 0, 190),
    "cyan": (0, 255, 255),
}
TEXTURES = ("street", "columns", "checker", "diagonal", "plain", "noise")


def _pick(rng, n):
    return int(rng.next_u64(1)[0] % n)


def texture(kind, rng, size=16):
    phase = _pick(rng, 4)
    i, j = np.indices((size, size))
    if kind == "street":
        v = ((i + phase) // 2) % 2
    elif kind == "columns":
        v = ((j + phase) // 2) % 2
    elif kind == "checker":
        v = ((i // 4) + (j // 4) + phase) % 2
    elif kind == "diagonal":
        v = ((i + j + phase) // 2) % 2
    elif kind == "plain":
        v = np.full((size, size), 0.5)
    else:
        v = rng.uniform(size * size).reshape(size, size)
    g = 0.2 + 0.6 * v
    return np.repeat(g[:, :, None], 3, axis=2)


def add_cars(px, rgb, rng, n=3, size=16):
    px = px.copy()
    for _ in range(n):
        r, c = (int(x % (size - 3)) for x in rng.next_u64(2))
        px[r : r + 3, c : c + 4] = np.asarray(rgb) / 255.0
    return px


def planted_corpus(seed, size=64):
    """A shuffled corpus where exactly one item is a striped "street" with red "cars".

    Returns ``(items, target_index, empty_street_query_image)``. Distractors
    include empty streets, streets with non-red cars, and red cars on other
    textures.
    """
    rng = SeededRng(seed)
    items = [Image.from_array(add_cars(texture("street", rng), CAR_COLORS["red"], rng))]
    while len(items) < size:
        kind = TEXTURES[_pick(rng, len(TEXTURES))]
        color = list(CAR_COLORS)[_pick(rng, len(CAR_COLORS))]
        if kind == "street" and color == "red":
            color = "blue"
        base = texture(kind, rng)
        px = base if _pick(rng, 3) == 0 else add_cars(base, CAR_COLORS[color], rng)
        items.append(Image.from_array(px))
    perm = np.argsort(rng.uniform(size), kind="stable")
    items = [items[p] for p in perm]
    target = int(np.flatnonzero(perm == 0)[0])
    query = Image.from_array(texture("street", rng))
    return items, target, query


def red_stripes_reference():
    """Red-on-black horizontal stripes: a reference with both hue and layout."""
    px = np.array(canonical_image("stripes").pixels)
    px[..., 1:] //= 3
    return Image.from_array(px)
