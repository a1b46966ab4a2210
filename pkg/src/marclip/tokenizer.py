"""Lossless continuous tokenizer.

Images are patchified (2x2 pixels -> one token of 12 channels), then 2x2
blocks of tokens are grouped into one token, giving an 8x8 grid of
48-channel tokens for a 32x32 image. Per-channel normalization uses
train-split statistics. The whole pipeline is exactly invertible; all
normalization arithmetic runs in float64 and results are rounded back to
float32 pixels on the way out.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

PATCH = 2
GROUP = 2


@dataclass
class Tokenizer:
    """Holds per-channel normalization stats; identity stats by default."""

    channels: int = 48
    mean: np.ndarray = field(default=None)
    scale: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.mean is None:
            self.mean = np.zeros(self.channels, dtype=np.float64)
        if self.scale is None:
            self.scale = np.ones(self.channels, dtype=np.float64)
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.scale = np.asarray(self.scale, dtype=np.float64)

    def grid_side(self, image_side: int) -> int:
        return image_side // (PATCH * GROUP)

    def tokenize(self, image: np.ndarray) -> np.ndarray:
        """(H, W, 3) image -> (n_tokens, channels) normalized float64 grid."""
        raw = patchify(image)
        return (raw - self.mean) / self.scale

    def detokenize(self, grid: np.ndarray, image_side: int) -> np.ndarray:
        """Exact inverse of tokenize; returns float32 pixels."""
        raw = np.asarray(grid, dtype=np.float64) * self.scale + self.mean
        return unpatchify(raw, image_side).astype(np.float32)

    def tokenize_batch(self, images: np.ndarray) -> np.ndarray:
        return np.stack([self.tokenize(img) for img in images])


def patchify(image: np.ndarray) -> np.ndarray:
    """(H, W, 3) -> (n_tokens, 48) raw (unnormalized) float64 tokens."""
    image = np.asarray(image)
    h, w, c = image.shape
    if h != w or h % (PATCH * GROUP) != 0:
        raise ValueError(f"image side must be square and divisible by {PATCH * GROUP}, got {image.shape}")
    side = h // PATCH
    # pixels -> (side, side, PATCH*PATCH*c) patch tokens
    x = image.astype(np.float64).reshape(side, PATCH, side, PATCH, c)
    x = x.transpose(0, 2, 1, 3, 4).reshape(side, side, PATCH * PATCH * c)
    # group 2x2 blocks of patch tokens into one token
    g = side // GROUP
    x = x.reshape(g, GROUP, g, GROUP, PATCH * PATCH * c)
    x = x.transpose(0, 2, 1, 3, 4).reshape(g * g, GROUP * GROUP * PATCH * PATCH * c)
    return x


def unpatchify(grid: np.ndarray, image_side: int) -> np.ndarray:
    """(n_tokens, 48) raw tokens -> (H, W, 3) float64 image."""
    c = 3
    side = image_side // PATCH
    g = side // GROUP
    x = np.asarray(grid, dtype=np.float64).reshape(g, g, GROUP, GROUP, PATCH * PATCH * c)
    x = x.transpose(0, 2, 1, 3, 4).reshape(side, side, PATCH * PATCH * c)
    x = x.reshape(side, side, PATCH, PATCH, c).transpose(0, 2, 1, 3, 4)
    return x.reshape(image_side, image_side, c)


def fit_normalization(images: np.ndarray, channels: int = 48) -> Tokenizer:
    """Per-channel mean/std over a train image stack.

    Stats are snapped to float32 so they serialize exactly; degenerate
    (constant) channels get scale 1 to stay invertible.
    """
    raw = np.stack([patchify(img) for img in images])  # (N, n_tokens, C)
    flat = raw.reshape(-1, raw.shape[-1])
    mean = flat.mean(axis=0)
    std = flat.std(axis=0)
    std = np.where(std < 1e-8, 1.0, std)
    mean = mean.astype(np.float32).astype(np.float64)
    std = std.astype(np.float32).astype(np.float64)
    return Tokenizer(channels=channels, mean=mean, scale=std)
