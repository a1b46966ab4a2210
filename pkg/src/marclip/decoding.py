"""Iterative set-of-tokens generation: cosine mask annealing with fully
random reveal orders, per-token ancestral DDPM sampling over a respaced
timestep subsequence, classifier-free guidance, semantically aligned
candidate selection, and NFE budget accounting."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .losses import NoiseSchedule
from .model import Model
from .rng import STREAM_DECODE, substream
from .tokenizer import Tokenizer


class InfeasibleBudget(ValueError):
    def __init__(self, msg: str, suggestion: tuple[int, int] | None = None):
        super().__init__(msg)
        self.suggestion = suggestion  # (k, t_switch)


@dataclass
class DecodeConfig:
    steps: int = 64
    temperature: float = 1.0
    cfg_weight: float = 1.0
    cfg_schedule: str = "constant"   # "constant" | "linear"
    infer_steps: int = 100
    k: int = 1
    t_switch: int = 0
    nfe_budget: int | None = None
    seed: int = 0
    x0_clip: float | None = 6.0

    def __post_init__(self):
        if self.cfg_weight < 0:
            raise ValueError(f"cfg weight must be >= 0, got {self.cfg_weight}")
        if self.cfg_schedule not in ("constant", "linear"):
            raise ValueError(f"unknown cfg schedule '{self.cfg_schedule}'")
        if self.k > 1 and not (1 <= self.t_switch < self.steps):
            raise ValueError(f"t_switch must be in [1, steps) when k > 1, got {self.t_switch}")

    @property
    def guided(self) -> bool:
        return self.cfg_weight > 0.0


@dataclass
class NfeLedger:
    encoder_forwards: int = 0
    decoder_forwards: int = 0
    head_evals: int = 0   # one per (branch, respaced timestep) batched call

    def as_dict(self):
        return {"encoder_forwards": self.encoder_forwards,
                "decoder_forwards": self.decoder_forwards,
                "head_evals": self.head_evals}


@dataclass
class Candidate:
    latents: np.ndarray          # (n_tokens, C), zeros where still masked
    revealed: np.ndarray         # bool (n_tokens,)
    rng: np.random.Generator
    score: float | None = None


def anneal_ratio(step: int, total_steps: int) -> float:
    """Masking ratio after `step`; reaches exactly 0 at the last step."""
    if step + 1 >= total_steps:
        return 0.0
    return math.cos((math.pi / 2.0) * (step + 1) / total_steps)


def unmask_plan(total_steps: int, n_tokens: int) -> list[int]:
    """Per-step reveal counts: cosine-annealed masked-count targets,
    adjusted so every step reveals at least one token and the counts sum
    to n_tokens."""
    if not 1 <= total_steps <= n_tokens:
        raise ValueError(f"steps must be in [1, n_tokens], got {total_steps}")
    ks = []
    m_prev = n_tokens
    for s in range(total_steps):
        target = math.ceil(anneal_ratio(s, total_steps) * n_tokens)
        m = min(m_prev - 1, target)
        m = max(m, total_steps - 1 - s)
        ks.append(m_prev - m)
        m_prev = m
    return ks


def resample_timesteps(T: int = 1000, infer_steps: int = 100) -> np.ndarray:
    """Evenly strided decreasing subsequence from T to 0 (inclusive)."""
    if not 1 <= infer_steps <= T:
        raise ValueError(f"infer_steps must be in [1, T], got {infer_steps}")
    ts = np.round(np.linspace(T, 0, infer_steps + 1)).astype(np.int64)
    if not np.all(np.diff(ts) < 0):
        raise ValueError("respaced timesteps are not strictly decreasing")
    return ts


def cfg_eps(eps_u: np.ndarray, eps_c: np.ndarray, omega: float) -> np.ndarray:
    """Guided noise prediction; endpoints return the raw branch exactly."""
    if omega == 0.0:
        return eps_u
    if omega == 1.0:
        return eps_c
    return eps_u + omega * (eps_c - eps_u)


def omega_at(config: DecodeConfig, step: int) -> float:
    if config.cfg_schedule == "linear":
        if config.steps == 1:
            return config.cfg_weight
        return config.cfg_weight * step / (config.steps - 1)
    return config.cfg_weight


def ddpm_sample(eps_fn, x_init: np.ndarray, schedule: NoiseSchedule,
                ts: np.ndarray, rng: np.random.Generator,
                temperature: float = 1.0, x0_clip: float | None = None) -> np.ndarray:
    """Ancestral sampling along the respaced subsequence; posterior
    variances are recomputed from alpha-bar ratios. Injected noise is
    scaled by the temperature; temperature 0 is deterministic."""
    x = x_init
    ab = schedule.alpha_bar
    for j in range(len(ts) - 1):
        t, tp = int(ts[j]), int(ts[j + 1])
        ab_t, ab_p = ab[t], ab[tp]
        eps = eps_fn(x, t)
        x0 = (x - np.sqrt(1.0 - ab_t) * eps) / np.sqrt(ab_t)
        if x0_clip is not None:
            x0 = np.clip(x0, -x0_clip, x0_clip)
        alpha_eff = ab_t / ab_p
        beta_eff = 1.0 - alpha_eff
        denom = 1.0 - ab_t
        mean = (np.sqrt(ab_p) * beta_eff / denom) * x0 \
            + (np.sqrt(alpha_eff) * (1.0 - ab_p) / denom) * x
        var = beta_eff * (1.0 - ab_p) / denom
        noise = rng.standard_normal(x.shape)
        x = mean + temperature * np.sqrt(max(var, 0.0)) * noise
    return x


def budget_to_switch(nfe_budget: int, steps: int, k: int) -> int:
    """Switch step keeping K*t_switch + (steps - t_switch) == budget."""
    if k < 1:
        raise InfeasibleBudget(f"k must be >= 1, got {k}")
    if k == 1:
        if nfe_budget != steps:
            raise InfeasibleBudget(
                f"k=1 decoding always costs {steps} steps, budget {nfe_budget} infeasible",
                suggestion=(1, 0))
        return 0
    t, rem = divmod(nfe_budget - steps, k - 1)
    if rem != 0 or not 1 <= t < steps:
        near = min(max(round((nfe_budget - steps) / (k - 1)), 1), steps - 1)
        raise InfeasibleBudget(
            f"budget {nfe_budget} infeasible for steps={steps}, k={k}; "
            f"nearest feasible is t_switch={near} (budget {k * near + steps - near})",
            suggestion=(k, near))
    return t


def nfe_plan(config: DecodeConfig, n_tokens: int | None = None) -> dict:
    """Analytic counter totals for a (sad_)decode run."""
    s, k, t = config.steps, config.k, config.t_switch
    unit_steps = k * t + (s - t) if k > 1 else s
    branches = 2 if config.guided else 1
    return {
        "encoder_forwards": unit_steps + (k if k > 1 else 0),
        "decoder_forwards": unit_steps * branches,
        "head_evals": unit_steps * branches * config.infer_steps,
    }


class Decoder:
    """Holds the frozen model plus per-prompt conditioning; runs decode
    and SAD decode with full NFE accounting."""

    def __init__(self, model: Model, tokenizer: Tokenizer, schedule: NoiseSchedule,
                 config: DecodeConfig):
        self.model = model
        self.tokenizer = tokenizer
        self.schedule = schedule
        self.config = config
        self.ts = resample_timesteps(schedule.T, config.infer_steps)
        self.plan = unmask_plan(config.steps, model.config.n_tokens)

    def _conds(self, caption: np.ndarray):
        from . import synthdata
        cond_c = self.model.text_encode_cond(caption[None])
        cond_u = self.model.text_encode_cond(synthdata.null_caption()[None])
        return cond_c, cond_u

    def _step(self, cand: Candidate, k_s: int, omega: float,
              conds, ledger: NfeLedger, force_branch: str | None = None):
        cfg = self.config
        model = self.model
        n, ch = cand.latents.shape
        mask = ~cand.revealed
        enc = model.encoder_forward(cand.latents[None], mask[None])
        ledger.encoder_forwards += 1
        cond_c, cond_u = conds

        if force_branch == "cond":
            branches = {"c": model.decoder_forward(enc, mask[None], cond_c)}
        elif force_branch == "uncond" or not cfg.guided:
            branches = {"u": model.decoder_forward(enc, mask[None], cond_u)}
        else:
            branches = {"u": model.decoder_forward(enc, mask[None], cond_u),
                        "c": model.decoder_forward(enc, mask[None], cond_c)}
        ledger.decoder_forwards += len(branches)

        pos = cand.rng.permutation(np.flatnonzero(mask))[:k_s]
        z_rows = {b: z.data[0][pos] for b, z in branches.items()}

        def eps_fn(x, t):
            t_arr = np.full(len(pos), t)
            out = {}
            for b, zr in z_rows.items():
                out[b] = model.diffusion_head(x, t_arr, Tensor(zr)).data
            ledger.head_evals += len(z_rows)
            if "u" in out and "c" in out:
                return cfg_eps(out["u"], out["c"], omega)
            return next(iter(out.values()))

        x_init = cand.rng.standard_normal((k_s, ch))
        vals = ddpm_sample(eps_fn, x_init, self.schedule, self.ts, cand.rng,
                           temperature=cfg.temperature, x0_clip=cfg.x0_clip)
        if not np.all(np.isfinite(vals)):
            raise FloatingPointError("non-finite latents during decoding")
        cand.latents[pos] = vals.astype(cand.latents.dtype)
        cand.revealed[pos] = True

    def _score(self, cand: Candidate, txt_emb: np.ndarray, ledger: NfeLedger) -> float:
        enc = self.model.encoder_forward(cand.latents[None], (~cand.revealed)[None])
        ledger.encoder_forwards += 1
        return float(enc.pooled.data[0] @ txt_emb)

    def sad_decode(self, caption: np.ndarray, score_fn=None):
        """Run K candidate trajectories to t_switch, keep the best-aligned
        one, and finish it. K=1 degenerates to plain decoding. Returns
        (image, ledger, info)."""
        cfg = self.config
        n = self.model.config.n_tokens
        ch = self.model.config.token_channels
        dtype = self.model.config.np_dtype
        ledger = NfeLedger()
        conds = self._conds(caption)
        txt_emb = self.model.text_encode_contrastive(caption[None]).data[0]

        cands = [Candidate(latents=np.zeros((n, ch), dtype=dtype),
                           revealed=np.zeros(n, dtype=bool),
                           rng=substream(cfg.seed, STREAM_DECODE, i))
                 for i in range(cfg.k)]
        selected = 0
        for step in range(cfg.steps):
            if cfg.k > 1 and step == cfg.t_switch:
                for c in cands:
                    if score_fn is not None:
                        c.score = float(score_fn(c.latents, c.revealed, caption))
                    else:
                        c.score = self._score(c, txt_emb, ledger)
                selected = int(np.argmax([c.score for c in cands]))  # ties: lowest index
                cands = [cands[selected]]
            omega = omega_at(cfg, step)
            try:
                for c in cands:
                    self._step(c, self.plan[step], omega, conds, ledger)
            except FloatingPointError as e:
                raise FloatingPointError(f"{e} (decode step {step})") from e

        final = cands[0]
        assert final.revealed.all()
        side = int(math.sqrt(n)) * 4
        image = self.tokenizer.detokenize(final.latents.astype(np.float64), side)
        info = {"selected": selected, "score": final.score,
                "final_alignment": self._alignment(final, txt_emb)}
        return image, ledger, info

    def decode(self, caption: np.ndarray, force_branch: str | None = None):
        """Single-trajectory decoding (K forced to 1)."""
        cfg = self.config
        if cfg.k != 1:
            cfg = DecodeConfig(**{**cfg.__dict__, "k": 1, "t_switch": 0})
            return Decoder(self.model, self.tokenizer, self.schedule, cfg).decode(
                caption, force_branch=force_branch)
        if force_branch is None:
            return self.sad_decode(caption)
        # single-branch variant used by the guidance identity checks
        n = self.model.config.n_tokens
        ch = self.model.config.token_channels
        ledger = NfeLedger()
        conds = self._conds(caption)
        cand = Candidate(latents=np.zeros((n, ch), dtype=self.model.config.np_dtype),
                         revealed=np.zeros(n, dtype=bool),
                         rng=substream(cfg.seed, STREAM_DECODE, 0))
        for step in range(cfg.steps):
            self._step(cand, self.plan[step], omega_at(cfg, step), conds, ledger,
                       force_branch=force_branch)
        side = int(math.sqrt(n)) * 4
        image = self.tokenizer.detokenize(cand.latents.astype(np.float64), side)
        return image, ledger, {"selected": 0, "score": None, "final_alignment": None}

    def _alignment(self, cand: Candidate, txt_emb: np.ndarray) -> float:
        enc = self.model.encoder_forward(cand.latents[None],
                                         np.zeros((1, len(cand.revealed)), dtype=bool))
        return float(enc.pooled.data[0] @ txt_emb)


def write_ppm(path, image: np.ndarray):
    """Binary P6 file; input pixels in [-1, 1]."""
    u8 = np.clip((image + 1.0) * 127.5, 0, 255).astype(np.uint8)
    h, w = u8.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(u8.tobytes())


def write_sample_manifest(path, prompt_tokens, config: DecodeConfig,
                          ledger: NfeLedger, info: dict):
    line = {
        "prompt_tokens": [int(t) for t in np.asarray(prompt_tokens).ravel()],
        "seed": config.seed, "steps": config.steps, "cfg_weight": config.cfg_weight,
        "k": config.k, "t_switch": config.t_switch,
        "nfe": ledger.as_dict(), "score": info.get("score"),
    }
    with open(path, "a") as f:
        f.write(json.dumps(line) + "\n")
