"""Cosine noise schedule, forward noising, the gated diffusion loss,
symmetric InfoNCE, and the joint objective."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .masking import MaskState, MaskingScheduleConfig, clip_gate, diffusion_gate
from .model import Model


@dataclass
class NoiseSchedule:
    T: int
    s: float
    alpha_bar: np.ndarray      # length T+1, float64, closed form
    betas: np.ndarray          # length T+1 (index 0 unused), clipped at 0.999


def build_cosine_schedule(T: int = 1000, s: float = 0.008) -> NoiseSchedule:
    t = np.arange(T + 1, dtype=np.float64)
    f = np.cos(((t / T + s) / (1.0 + s)) * (np.pi / 2.0)) ** 2
    alpha_bar = f / f[0]
    betas = np.zeros(T + 1, dtype=np.float64)
    betas[1:] = np.minimum(1.0 - alpha_bar[1:] / alpha_bar[:-1], 0.999)
    return NoiseSchedule(T=T, s=s, alpha_bar=alpha_bar, betas=betas)


def q_sample(x0: np.ndarray, t, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    ab = schedule.alpha_bar[np.asarray(t)]
    ab = np.reshape(ab, np.shape(ab) + (1,) * (x0.ndim - np.ndim(ab)))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


@dataclass
class LossBreakdown:
    diffusion: float
    contrastive: float
    lam: float
    joint: float
    diff_count: int
    clip_count: int
    joint_tensor: Tensor | None = field(default=None, repr=False)


def diffusion_loss(model: Model, x0_tokens: np.ndarray, masks: list[MaskState],
                   cond_vectors: Tensor, schedule: NoiseSchedule,
                   rng: np.random.Generator, n_noise: int = 4,
                   gamma: float = 0.5, head_fn=None, cond_index=None):
    """Mean of ||eps - eps_hat||^2 over (gated sample, masked token, noise
    draw). cond_vectors is the decoder output z, evaluated once per sample
    and reused across the n_noise draws. Returns (scalar Tensor,
    per-sample float list, contributing-sample count).

    head_fn overrides the model's diffusion head (oracle injection in
    tests); signature (x_t, t, z) -> eps_hat Tensor.

    cond_index maps batch sample i to its row of cond_vectors, so callers
    may evaluate the decoder only on gate-passing samples.
    """
    b, n, ch = x0_tokens.shape
    head = head_fn if head_fn is not None else model.diffusion_head
    dtype = x0_tokens.dtype
    if cond_index is None:
        cond_index = np.arange(b)

    rows_i, rows_pos = [], []
    sample_of_row = []
    contributing = []
    for i, m in enumerate(masks):
        # RNG draws happen for every sample so gating never shifts the
        # stream consumed by later samples
        t_i = rng.integers(1, schedule.T + 1, size=n_noise)
        pos = np.flatnonzero(m.mask)
        eps_i = rng.standard_normal((n_noise, len(pos), ch))
        if not diffusion_gate(m.ratio_drawn, gamma) or len(pos) == 0:
            continue
        contributing.append((i, t_i, pos, eps_i.astype(dtype)))

    if not contributing:
        zero = Tensor(np.asarray(0.0, dtype=dtype))
        return zero, [0.0] * b, 0

    xt_rows, t_rows, eps_rows = [], [], []
    zi_rows, zp_rows = [], []
    row_sample = []
    for i, t_i, pos, eps_i in contributing:
        x0_rows = x0_tokens[i][pos]                      # (P, C)
        for d in range(n_noise):
            xt = q_sample(x0_rows, np.full(len(pos), t_i[d]), eps_i[d], schedule)
            xt_rows.append(xt.astype(dtype))
            t_rows.append(np.full(len(pos), t_i[d]))
            eps_rows.append(eps_i[d])
            zi_rows.append(np.full(len(pos), cond_index[i]))
            zp_rows.append(pos)
            row_sample.append(np.full(len(pos), i))

    xt_all = np.concatenate(xt_rows)
    t_all = np.concatenate(t_rows)
    eps_all = np.concatenate(eps_rows)
    z_all = cond_vectors[np.concatenate(zi_rows), np.concatenate(zp_rows)]
    row_sample = np.concatenate(row_sample)

    eps_hat = head(xt_all, t_all, z_all)
    diff = eps_hat - Tensor(eps_all)
    sq = (diff * diff).sum(axis=-1)                      # (M,) per-row squared norm
    loss = sq.mean()

    per_sample = [0.0] * b
    for i, _, _, _ in contributing:
        sel = row_sample == i
        per_sample[i] = float(sq.data[sel].mean())
    return loss, per_sample, len(contributing)


def info_nce(img_embs: Tensor, txt_embs: Tensor, logit_scale) -> Tensor:
    """Symmetric InfoNCE over cosine-similarity logits; embeddings must be
    unit-norm, logit_scale = 1/tau (Tensor or float)."""
    n = img_embs.shape[0]
    sims = img_embs @ txt_embs.swapaxes(0, 1)
    logits = sims * logit_scale
    l_i = _cross_entropy_diag(logits)
    l_t = _cross_entropy_diag(logits.swapaxes(0, 1))
    return (l_i + l_t) * 0.5


def _cross_entropy_diag(logits: Tensor) -> Tensor:
    n = logits.shape[0]
    shift = logits.data.max(axis=1, keepdims=True)       # constant, for stability
    z = logits - Tensor(shift)
    lse = z.exp().sum(axis=1).log()
    diag = z[np.arange(n), np.arange(n)]
    return (lse - diag).mean()


def joint_loss(diff_term: Tensor, diff_per_sample, diff_count: int,
               clip_term: Tensor, clip_count: int, lam: float = 0.005) -> LossBreakdown:
    joint = diff_term + lam * clip_term
    return LossBreakdown(
        diffusion=float(diff_term.data),
        contrastive=float(clip_term.data),
        lam=lam,
        joint=float(joint.data),
        diff_count=diff_count,
        clip_count=clip_count,
        joint_tensor=joint,
    )


def contrastive_select(masks: list[MaskState], phi: float) -> np.ndarray:
    """Indices of samples whose masking ratio passes the clip gate."""
    return np.array([i for i, m in enumerate(masks) if clip_gate(m.ratio_drawn, phi)],
                    dtype=np.int64)
