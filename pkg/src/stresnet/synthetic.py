"""Procedural test content: a textured canvas panned across frames."""

import numpy as np

from .dataset import FrameSequence


def textured_canvas(height, width, seed=0):
    """Smooth gradients, sinusoidal texture, hard-edged shapes and mild noise."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    img = 90 + 60 * (xx / max(width - 1, 1)) + 30 * np.sin(yy / 9.0)
    for _ in range(6):
        fy, fx = rng.uniform(0.05, 0.6, 2)
        img += rng.uniform(5, 20) * np.sin(fy * yy + fx * xx + rng.uniform(0, 2 * np.pi))
    for _ in range(max(2, height * width // 4000)):
        r0, c0 = rng.integers(0, height), rng.integers(0, width)
        size = rng.integers(6, 24)
        img[r0:r0 + size, c0:c0 + size] = rng.uniform(20, 235)
    img += rng.normal(0, 2.0, img.shape)
    return np.clip(np.round(img), 0, 255).astype(np.uint8)


def panning_sequence(height, width, frames, dx=2, dy=1, seed=0) -> FrameSequence:
    """Crop a window drifting by (dy, dx) pixels per frame over a larger canvas."""
    canvas = textured_canvas(height + abs(dy) * frames + 1, width + abs(dx) * frames + 1, seed)
    out = []
    for t in range(frames):
        r = t * dy if dy >= 0 else abs(dy) * (frames - t)
        c = t * dx if dx >= 0 else abs(dx) * (frames - t)
        out.append(canvas[r:r + height, c:c + width])
    return FrameSequence(out)
