"""Procedural desk dataset: one anti-aliased shape on a smooth background.

Classes are shape types. Colors, size, position and background gradient
are random. Everything is a pure function of the seed.
"""

from __future__ import annotations

import numpy as np

from .data_io import Dataset

CLASSES = ("circle", "square", "triangle", "plus", "ring", "diamond", "hbar", "vbar")
COLORS = {
    "red": (0.85, 0.15, 0.15),
    "green": (0.15, 0.75, 0.2),
    "blue": (0.15, 0.3, 0.9),
    "yellow": (0.9, 0.85, 0.15),
    "white": (0.95, 0.95, 0.95),
    "black": (0.08, 0.08, 0.08),
}
SUPERSAMPLE = 4


def _coverage(kind: str, size: int, cx: float, cy: float, r: float, angle: float) -> np.ndarray:
    s = SUPERSAMPLE
    coords = (np.arange(size * s) + 0.5) / s
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    dx, dy = xx - cx, yy - cy
    ca, sa = np.cos(angle), np.sin(angle)
    u, v = ca * dx + sa * dy, -sa * dx + ca * dy
    if kind == "circle":
        inside = dx**2 + dy**2 <= r**2
    elif kind == "ring":
        d2 = dx**2 + dy**2
        inside = (d2 <= r**2) & (d2 >= (0.55 * r) ** 2)
    elif kind == "square":
        inside = (np.abs(u) <= 0.8 * r) & (np.abs(v) <= 0.8 * r)
    elif kind == "diamond":
        inside = np.abs(dx) + np.abs(dy) <= r
    elif kind == "triangle":
        # upward triangle inscribed in the radius-r circle
        inside = (dy <= 0.5 * r) & (dy >= -r + 1.732 * np.abs(dx))
    elif kind == "plus":
        w = 0.33 * r
        inside = ((np.abs(u) <= r) & (np.abs(v) <= w)) | ((np.abs(v) <= r) & (np.abs(u) <= w))
    elif kind == "hbar":
        inside = (np.abs(dx) <= r) & (np.abs(dy) <= 0.3 * r)
    elif kind == "vbar":
        inside = (np.abs(dy) <= r) & (np.abs(dx) <= 0.3 * r)
    else:
        raise ValueError(f"unknown shape {kind!r}")
    return inside.reshape(size, s, size, s).mean(axis=(1, 3))


def render(kind: str, color: str, rng: np.random.Generator, size: int = 32) -> np.ndarray:
    """Render one (size, size, 3) image of ``kind`` in ``color``."""
    r = rng.uniform(0.22, 0.34) * size
    margin = r + 1
    cx, cy = rng.uniform(margin, size - margin, size=2)
    angle = rng.uniform(-0.3, 0.3) if kind in ("square", "plus") else 0.0
    cov = _coverage(kind, size, cx, cy, r, angle)[..., None]

    # background: linear gradient between two muted colors
    c0, c1 = rng.uniform(0.25, 0.7, size=(2, 3))
    theta = rng.uniform(0, 2 * np.pi)
    t = np.linspace(-0.5, 0.5, size)
    yy, xx = np.meshgrid(t, t, indexing="ij")
    ramp = (np.cos(theta) * xx + np.sin(theta) * yy + 0.5)[..., None]
    bg = c0 + (c1 - c0) * ramp

    fg = np.asarray(COLORS[color]) + rng.normal(0, 0.04, size=3)
    img = (1 - cov) * bg + cov * fg
    img = img + rng.normal(0, 0.015, size=img.shape)
    return np.clip(img, 0, 1).astype(np.float32)


def caption_of(kind: str, color: str) -> list[str]:
    return ["a", "photo", "of", "a", color, kind]


def make_shapes(n: int, seed: int, size: int = 32, split: str = "train", with_captions: bool = False):
    """Generate ``n`` images with balanced labels.

    Returns a :class:`Dataset`, plus the list of colors when
    ``with_captions`` is set.
    """
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % len(CLASSES)
    rng.shuffle(labels)
    names = list(COLORS)
    images = np.empty((n, size, size, 3), dtype=np.float32)
    colors = []
    for i, lab in enumerate(labels):
        color = names[rng.integers(len(names))]
        images[i] = render(CLASSES[lab], color, rng, size)
        colors.append(color)
    ds = Dataset(images, labels.astype(np.int64), split)
    return (ds, colors) if with_captions else ds
