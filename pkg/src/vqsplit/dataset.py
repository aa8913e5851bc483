"""Deterministic procedural dataset: colored shapes, solid or striped.

Every sample is a pure function of (seed, index): the label cycles through
the eight classes and the jitter stream is seeded per sample, so the same
pair always renders the identical image regardless of how many samples are
drawn around it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .labels import CLASS_NAMES, NUM_CLASSES, split_class

IMAGE_SIZE = 32
STRIPE_PERIOD = 8

# foreground hues; luminance jitter scales these, keeping the max channel
# well above the background band so shapes always stand out
_FG_PALETTE = np.array([
    [1.00, 0.30, 0.30],
    [0.30, 1.00, 0.35],
    [0.35, 0.60, 1.00],
    [1.00, 0.90, 0.30],
])


@dataclass(frozen=True)
class ToySample:
    image: np.ndarray  # (3, 32, 32) float32 in [0, 1]
    label: int
    label_name: str


def _shape_mask(shape: str, cx: float, cy: float, r: float,
                size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    if shape == "circle":
        return (xx - cx) ** 2 + (yy - cy) ** 2 <= r ** 2
    if shape == "square":
        return np.maximum(np.abs(xx - cx), np.abs(yy - cy)) <= r
    if shape == "triangle":
        # apex at the top, base at the bottom
        inside_rows = (yy >= cy - r) & (yy <= cy + r)
        half_width = (yy - (cy - r)) / 2.0
        return inside_rows & (np.abs(xx - cx) <= half_width)
    if shape == "cross":
        arm = r / 2.5
        vert = (np.abs(xx - cx) <= arm) & (np.abs(yy - cy) <= r)
        horiz = (np.abs(yy - cy) <= arm) & (np.abs(xx - cx) <= r)
        return vert | horiz
    raise ValueError(f"unknown shape {shape!r}")


def render_sample(seed: int, index: int, size: int = IMAGE_SIZE) -> ToySample:
    """Render one sample; bit-identical for the same (seed, index)."""
    label = index % NUM_CLASSES
    shape, texture = split_class(label)
    rng = np.random.default_rng([seed, index])

    r = rng.uniform(8.0, 12.0) * (size / IMAGE_SIZE)
    cx = rng.uniform(r + 2, size - r - 2)
    cy = rng.uniform(r + 2, size - r - 2)
    # gray background with a slight tint; palette foreground with luminance
    # jitter: enough color variety to matter, little enough that the
    # codebook's capacity goes to structure instead of hue
    bg = np.clip(rng.uniform(0.05, 0.30) + rng.uniform(-0.03, 0.03, size=3),
                 0.0, 0.33)
    fg = _FG_PALETTE[rng.integers(0, len(_FG_PALETTE))] * rng.uniform(0.75, 1.0)
    stripe_vertical = bool(rng.integers(0, 2))
    phase = int(rng.integers(0, STRIPE_PERIOD))

    mask = _shape_mask(shape, cx, cy, r, size)
    if texture == "striped":
        yy, xx = np.mgrid[0:size, 0:size]
        coord = xx if stripe_vertical else yy
        band = ((coord + phase) % STRIPE_PERIOD) < STRIPE_PERIOD // 2
        mask = mask & band

    img = np.broadcast_to(bg[:, None, None], (3, size, size)).copy()
    img[:, mask] = fg[:, None]
    return ToySample(image=img.astype(np.float32), label=label,
                     label_name=CLASS_NAMES[label])


def generate_toy_dataset(seed: int, count: int) -> list[ToySample]:
    if count <= 0:
        raise ValueError(f"count must be positive, got {count}")
    return [render_sample(seed, i) for i in range(count)]


def dataset_arrays(samples: list[ToySample]) -> tuple[np.ndarray, np.ndarray]:
    """Stack samples into (images, labels) arrays for batched training."""
    images = np.stack([s.image for s in samples])
    labels = np.array([s.label for s in samples], dtype=np.int64)
    return images, labels
