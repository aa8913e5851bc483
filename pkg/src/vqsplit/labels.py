"""Canonical class vocabulary for the toy shape dataset.

Eight classes: four shapes, each solid or striped. The class id encodes
(shape, texture) as shape_index * 2 + texture_index; label names read
"<texture> <shape>", e.g. "striped triangle".
"""

from __future__ import annotations

SHAPES = ("circle", "square", "triangle", "cross")
TEXTURES = ("solid", "striped")

CLASS_NAMES = tuple(f"{tex} {shape}" for shape in SHAPES for tex in TEXTURES)
NUM_CLASSES = len(CLASS_NAMES)


def class_id(shape: str, texture: str) -> int:
    return SHAPES.index(shape) * len(TEXTURES) + TEXTURES.index(texture)


def split_class(label: int) -> tuple[str, str]:
    """class id -> (shape, texture)."""
    if not 0 <= label < NUM_CLASSES:
        raise ValueError(f"class id {label} out of range [0, {NUM_CLASSES})")
    return SHAPES[label // len(TEXTURES)], TEXTURES[label % len(TEXTURES)]
