"""Masking-ratio schedule family (WM/FX/UNI/CD), the clipped-Gaussian
ratio sampler, mask construction, and the two per-sample loss gates."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

KINDS = ("WM", "FX", "UNI", "CD")


@dataclass
class MaskingScheduleConfig:
    kind: str = "WM"
    sigma: float = 0.55
    warmup_epochs: float = 36.0
    gamma: float = 0.5       # min ratio for the diffusion loss (strict)
    phi: float = 0.75        # max ratio for the contrastive loss (inclusive)
    r_min: float = 0.0
    r_max: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown masking schedule kind '{self.kind}'")
        if not (0.0 <= self.gamma < 1.0):
            raise ValueError(f"gamma must be in [0,1), got {self.gamma}")
        if not (0.0 < self.phi <= 1.0):
            raise ValueError(f"phi must be in (0,1], got {self.phi}")
        if self.sigma < 0.0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")
        if self.warmup_epochs < 1e-9:
            raise ValueError(f"warmup_epochs must be positive, got {self.warmup_epochs}")
        if not (0.0 <= self.r_min < self.r_max <= 1.0):
            raise ValueError(f"bad ratio bounds [{self.r_min}, {self.r_max}]")


@dataclass
class MaskState:
    mask: np.ndarray          # bool, True = masked
    masked_count: int
    ratio_drawn: float


def schedule_mean(config: MaskingScheduleConfig, progress: float) -> float:
    """Mean masking ratio at a fractional-epoch training progress.

    WM ramps 0 -> 1 over warmup_epochs then holds at 1; CD is the
    mirror-image cooldown; FX is pinned at 1; UNI ignores the mean.
    """
    if config.kind == "WM":
        return min(progress / config.warmup_epochs, 1.0)
    if config.kind == "CD":
        return max(1.0 - progress / config.warmup_epochs, 0.0)
    return 1.0  # FX (and unused for UNI)


def sample_ratio(config: MaskingScheduleConfig, mu: float, rng: np.random.Generator) -> float:
    """One masking-ratio draw: Gaussian clipped (not resampled) to the
    configured bounds, so the bounds carry point masses; UNI is uniform."""
    if config.kind == "UNI":
        return float(rng.uniform(config.r_min, config.r_max))
    r = mu + config.sigma * float(rng.standard_normal())
    return float(min(max(r, config.r_min), config.r_max))


def make_mask(r: float, n_tokens: int, rng: np.random.Generator) -> MaskState:
    """Mask exactly ceil(r * n_tokens) positions, uniformly without
    replacement; any r > 0 masks at least one token."""
    if n_tokens < 1:
        raise ValueError(f"n_tokens must be >= 1, got {n_tokens}")
    if not (0.0 <= r <= 1.0):
        raise ValueError(f"ratio must be in [0,1], got {r}")
    k = math.ceil(r * n_tokens)
    mask = np.zeros(n_tokens, dtype=bool)
    if k > 0:
        mask[rng.permutation(n_tokens)[:k]] = True
    return MaskState(mask=mask, masked_count=k, ratio_drawn=float(r))


def diffusion_gate(r: float, gamma: float) -> bool:
    """Sample contributes to the diffusion loss iff strictly more than a
    gamma fraction of tokens is masked."""
    return r > gamma


def clip_gate(r: float, phi: float) -> bool:
    """Sample contributes to the contrastive loss iff its masking ratio
    does not exceed phi (cap inclusive)."""
    return r <= phi
