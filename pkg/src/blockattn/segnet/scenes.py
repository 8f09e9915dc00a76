"""Synthetic "regular anatomy" scenes: four structures at jittered canonical positions.

Classes: 0 background, 1 left ellipse, 2 right ellipse, 3 bar, 4 disc.  The two
ellipses are rendered with low contrast against the background; the bar and
disc are bright/dark.  Structure centres jitter by at most 4 pixels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SIZE = 64
NUM_CLASSES = 5
CLASS_NAMES = ("background", "left-ellipse", "right-ellipse", "bar", "disc")
JITTER = 4
NOISE_SIGMA = 0.05

BACKGROUND_LEVEL = 0.40
LEVELS = {1: 0.47, 2: 0.47, 3: 0.85, 4: 0.12}

# (row, col) canonical centres
CENTRES = {1: (30.0, 17.0), 2: (30.0, 47.0), 3: (51.0, 32.0), 4: (12.0, 32.0)}


@dataclass
class Scene:
    image: np.ndarray      # [1, 64, 64] in [0, 1]
    labels: np.ndarray     # [64, 64] int
    seed: int
    shapes: dict

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels.ravel(), minlength=NUM_CLASSES)


def shape_masks(shapes: dict, size: int = SIZE) -> dict[int, np.ndarray]:
    """Analytic membership of every pixel centre in each structure."""
    rr, cc = np.mgrid[0:size, 0:size].astype(np.float64)
    masks = {}
    for k in (1, 2):
        cy, cx, a, b = shapes[k]
        masks[k] = ((cc - cx) / a) ** 2 + ((rr - cy) / b) ** 2 <= 1.0
    cy, cx, half_w, half_h = shapes[3]
    masks[3] = (np.abs(cc - cx) <= half_w) & (np.abs(rr - cy) <= half_h)
    cy, cx, radius = shapes[4]
    masks[4] = (cc - cx) ** 2 + (rr - cy) ** 2 <= radius ** 2
    return masks


def generate_scene(seed: int) -> Scene:
    rng = np.random.default_rng(seed)

    def centre(k):
        cy, cx = CENTRES[k]
        return cy + rng.uniform(-JITTER, JITTER), cx + rng.uniform(-JITTER, JITTER)

    shapes = {}
    for k in (1, 2):
        cy, cx = centre(k)
        shapes[k] = (cy, cx, rng.uniform(8.5, 10.5), rng.uniform(6.0, 7.0))
    cy, cx = centre(3)
    shapes[3] = (cy, cx, rng.uniform(12.0, 15.0), rng.uniform(4.5, 6.0))
    cy, cx = centre(4)
    shapes[4] = (cy, cx, rng.uniform(6.0, 7.0))

    masks = shape_masks(shapes)
    labels = np.zeros((SIZE, SIZE), dtype=np.int64)
    for k in (1, 2, 3, 4):
        labels[masks[k] & (labels == 0)] = k

    rr, cc = np.mgrid[0:SIZE, 0:SIZE] / SIZE
    phase = rng.uniform(0, 2 * np.pi, size=2)
    texture = 0.03 * np.sin(2 * np.pi * 1.5 * rr + phase[0]) * np.cos(2 * np.pi * 1.5 * cc + phase[1])
    image = np.full((SIZE, SIZE), BACKGROUND_LEVEL) + texture
    for k, level in LEVELS.items():
        image[labels == k] = level + texture[labels == k]
    image += rng.normal(0.0, NOISE_SIGMA, size=image.shape)
    image = np.clip(image, 0.0, 1.0)
    return Scene(image[None].astype(np.float64), labels, int(seed), shapes)


def generate_split(n_train: int = 48, n_test: int = 48, seed: int = 0):
    """Disjoint train/test scene lists derived from ``seed``."""
    base = 1_000_003 * (seed + 1)
    train = [generate_scene(base + i) for i in range(n_train)]
    test = [generate_scene(base + 500_000 + i) for i in range(n_test)]
    return train, test


def stack(scenes: list[Scene]) -> tuple[np.ndarray, np.ndarray]:
    return np.stack([s.image for s in scenes]), np.stack([s.labels for s in scenes])
