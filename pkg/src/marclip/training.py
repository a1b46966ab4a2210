"""Training loop: per-sample masking, gated joint loss, label dropout for
classifier-free guidance, LR warmup, EMA tracking, and checkpoint IO."""

from __future__ import annotations

import dataclasses
import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import synthdata
from .autodiff import Tensor, backward
from .losses import (LossBreakdown, NoiseSchedule, build_cosine_schedule,
                     contrastive_select, diffusion_loss, info_nce, joint_loss)
from .masking import (MaskingScheduleConfig, diffusion_gate, make_mask,
                      sample_ratio, schedule_mean)
from .model import EncoderOutput, Model, ModelConfig
from .optim import AdamW, ema_update, zero_grads
from .rng import (STREAM_DATA, STREAM_DROPOUT, STREAM_EVAL, STREAM_MASK,
                  STREAM_NOISE, substream)
from .tokenizer import Tokenizer, fit_normalization

CKPT_MAGIC = b"DRMC"
CKPT_VERSION = 1

METRIC_COLUMNS = ["step", "epoch", "lr", "mask_mean", "diff_loss", "clip_loss",
                  "joint", "diff_count", "clip_count", "grad_norm"]


class CheckpointError(IOError):
    pass


class BadMagic(CheckpointError):
    pass


class VersionMismatch(CheckpointError):
    pass


class TruncatedCheckpoint(CheckpointError):
    pass


class ShapeMismatch(CheckpointError):
    pass


class NonFiniteLoss(RuntimeError):
    def __init__(self, component: str):
        super().__init__(f"non-finite loss in component '{component}'")
        self.component = component


@dataclass
class TrainConfig:
    epochs: int = 49
    batch_size: int = 64
    peak_lr: float = 8e-4
    lr_warmup_epochs: float = 12.0
    lam: float = 0.005
    ema_decay: float = 0.99
    label_dropout: float = 0.1
    n_noise: int = 4
    weight_decay: float = 0.04
    clip_norm: float | None = 3.0
    seed: int = 0
    dataset_size: int = 1280
    image_side: int = 32
    hflip: bool = False
    diffusion_T: int = 1000
    val_every: int = 50
    val_size: int = 128
    mask: MaskingScheduleConfig = field(default_factory=MaskingScheduleConfig)
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if not (0.0 <= self.label_dropout <= 1.0):
            raise ValueError(f"label_dropout must be in [0,1], got {self.label_dropout}")
        if self.epochs > 0 and self.lr_warmup_epochs >= self.epochs:
            raise ValueError("lr warmup must be shorter than the run")
        if self.dataset_size < self.batch_size:
            raise ValueError(
                f"dataset_size {self.dataset_size} smaller than batch_size {self.batch_size}")

    @property
    def steps_per_epoch(self) -> int:
        return max(self.dataset_size // self.batch_size, 1)


@dataclass
class TrainState:
    config: TrainConfig
    model: Model
    opt: AdamW
    ema: dict[str, np.ndarray]
    tokenizer: Tokenizer
    schedule: NoiseSchedule
    step: int = 0

    @property
    def epoch(self) -> float:
        return self.step / self.config.steps_per_epoch

    def ema_model(self) -> Model:
        return self.model.frozen_copy(self.ema)


def init_state(config: TrainConfig, tokenizer: Tokenizer | None = None) -> TrainState:
    model = Model(config.model, seed=config.seed)
    opt = AdamW(lr=config.peak_lr, weight_decay=config.weight_decay,
                clip_norm=config.clip_norm)
    ema = model.param_arrays()
    if tokenizer is None:
        tokenizer = Tokenizer(channels=config.model.token_channels)
    return TrainState(config=config, model=model, opt=opt, ema=ema,
                      tokenizer=tokenizer,
                      schedule=build_cosine_schedule(config.diffusion_T))


def lr_at(step: int, config: TrainConfig) -> float:
    """Linear warmup to the peak, constant afterwards; step 0 is lr 0."""
    warmup_steps = config.lr_warmup_epochs * config.steps_per_epoch
    if warmup_steps <= 0:
        return config.peak_lr
    return config.peak_lr * min(step / warmup_steps, 1.0)


def train_step(state: TrainState, images: np.ndarray, captions: np.ndarray) -> tuple[LossBreakdown, dict]:
    cfg = state.config
    model = state.model
    step = state.step
    b = len(images)
    if b == 0:
        raise ValueError("empty batch")

    if cfg.hflip:
        flip_rng = substream(cfg.seed, STREAM_DATA, 4, step)
        flips = flip_rng.uniform(size=b) < 0.5
        images = np.where(flips[:, None, None, None], images[:, :, ::-1, :], images)

    grids = state.tokenizer.tokenize_batch(images).astype(cfg.model.np_dtype)
    progress = step / cfg.steps_per_epoch
    mu = schedule_mean(cfg.mask, progress)
    masks = []
    for i in range(b):
        rng_i = substream(cfg.seed, STREAM_MASK, step, i)
        r = sample_ratio(cfg.mask, mu, rng_i)
        masks.append(make_mask(r, cfg.model.n_tokens, rng_i))

    enc = model.encoder_forward(grids, masks)

    drop_rng = substream(cfg.seed, STREAM_DROPOUT, step)
    drops = drop_rng.uniform(size=b) < cfg.label_dropout
    cond_caps = captions.copy()
    cond_caps[drops] = synthdata.null_caption()

    # the decoder only feeds the diffusion head, so evaluate it (and the
    # conditioning tower) just for the samples that pass the diffusion gate
    gated = np.array([i for i, m in enumerate(masks)
                      if diffusion_gate(m.ratio_drawn, cfg.mask.gamma)], dtype=np.int64)
    noise_rng = substream(cfg.seed, STREAM_NOISE, step)
    if len(gated) > 0:
        cond = model.text_encode_cond(cond_caps[gated])
        sub = EncoderOutput(final=enc.final[gated], tap=None, pooled=None,
                            pooled_raw=None, index=enc.index[gated],
                            valid=enc.valid[gated], masks=enc.masks[gated])
        z = model.decoder_forward(sub, enc.masks[gated], cond)
        cond_index = np.full(b, -1)
        cond_index[gated] = np.arange(len(gated))
        diff_term, diff_per_sample, diff_count = diffusion_loss(
            model, grids, masks, z, state.schedule, noise_rng,
            n_noise=cfg.n_noise, gamma=cfg.mask.gamma, cond_index=cond_index)
    else:
        # keep the noise stream aligned with the gated path
        for m in masks:
            noise_rng.integers(1, state.schedule.T + 1, size=cfg.n_noise)
            noise_rng.standard_normal((cfg.n_noise, int(m.masked_count), grids.shape[-1]))
        diff_term = Tensor(np.asarray(0.0, dtype=cfg.model.np_dtype))
        diff_per_sample, diff_count = [0.0] * b, 0

    sel = contrastive_select(masks, cfg.mask.phi)
    if len(sel) > 0:
        img_e = enc.pooled[sel]
        txt_e = model.text_encode_contrastive(captions[sel])
        clip_term = info_nce(img_e, txt_e, model.logit_scale())
    else:
        clip_term = Tensor(np.asarray(0.0, dtype=cfg.model.np_dtype))

    bd = joint_loss(diff_term, diff_per_sample, diff_count,
                    clip_term, len(sel), lam=cfg.lam)
    if not np.isfinite(bd.diffusion):
        raise NonFiniteLoss("diffusion")
    if not np.isfinite(bd.contrastive):
        raise NonFiniteLoss("contrastive")

    zero_grads(model.params)
    backward(bd.joint_tensor)
    lr = lr_at(step, cfg)
    gnorm = state.opt.step(model.params, lr=lr)
    zero_grads(model.params)
    ema_update(state.ema, model.params, cfg.ema_decay)
    state.step += 1

    extras = {"lr": lr, "mask_mean": mu, "grad_norm": gnorm,
              "dropped": int(drops.sum()), "ratios": [m.ratio_drawn for m in masks]}
    return bd, extras


def epoch_batches(cfg: TrainConfig, images: np.ndarray, captions: np.ndarray, epoch: int):
    """Deterministic per-epoch shuffle into full batches."""
    perm = substream(cfg.seed, STREAM_DATA, 5, epoch).permutation(len(images))
    spe = cfg.steps_per_epoch
    for j in range(spe):
        idx = perm[j * cfg.batch_size:(j + 1) * cfg.batch_size]
        yield images[idx], captions[idx]


def val_diffusion_loss(state: TrainState, val_images: np.ndarray,
                       val_captions: np.ndarray) -> float:
    """Diffusion loss of the EMA model on a fixed validation batch, with a
    constant RNG key so successive evaluations are directly comparable.
    Uses the terminal masking distribution (mean 1)."""
    cfg = state.config
    model = state.ema_model()
    grids = state.tokenizer.tokenize_batch(val_images).astype(cfg.model.np_dtype)
    masks = []
    for i in range(len(val_images)):
        rng_i = substream(cfg.seed, STREAM_EVAL, 0, i)
        r = sample_ratio(cfg.mask, 1.0, rng_i)
        masks.append(make_mask(r, cfg.model.n_tokens, rng_i))
    enc = model.encoder_forward(grids, masks)
    cond = model.text_encode_cond(val_captions)
    z = model.decoder_forward(enc, masks, cond)
    noise_rng = substream(cfg.seed, STREAM_EVAL, 1)
    term, _, count = diffusion_loss(model, grids, masks, z, state.schedule,
                                    noise_rng, n_noise=cfg.n_noise,
                                    gamma=cfg.mask.gamma)
    return float(term.data) if count else float("nan")


def train_run(config: TrainConfig, images: np.ndarray | None = None,
              captions: np.ndarray | None = None,
              state: TrainState | None = None,
              max_steps: int | None = None,
              metrics: list | None = None,
              val_metrics: list | None = None) -> TrainState:
    """Run (or continue) training; appends one metrics row per step.

    Data defaults to the deterministic synthetic train split; tokenizer
    stats are fitted from it on a fresh run.
    """
    cfg = config
    if images is None:
        images, captions = synthdata.generate_arrays(
            cfg.seed, cfg.dataset_size, "train", side=cfg.image_side)
    if state is None:
        tok = fit_normalization(images, channels=cfg.model.token_channels)
        state = init_state(cfg, tokenizer=tok)

    val_images = val_captions = None
    if val_metrics is not None:
        val_images, val_captions = synthdata.generate_arrays(
            cfg.seed, cfg.val_size, "val", side=cfg.image_side)

    total_steps = cfg.epochs * cfg.steps_per_epoch
    if max_steps is not None:
        total_steps = min(total_steps, state.step + max_steps)
    while state.step < total_steps:
        epoch = state.step // cfg.steps_per_epoch
        for bi, (bimg, bcap) in enumerate(epoch_batches(cfg, images, captions, epoch)):
            if state.step >= total_steps:
                break
            if bi != state.step % cfg.steps_per_epoch:
                continue  # resumed mid-epoch: skip already-consumed batches
            bd, ex = train_step(state, bimg, bcap)
            if metrics is not None:
                metrics.append({
                    "step": state.step - 1, "epoch": round((state.step - 1) / cfg.steps_per_epoch, 6),
                    "lr": ex["lr"], "mask_mean": ex["mask_mean"],
                    "diff_loss": bd.diffusion, "clip_loss": bd.contrastive,
                    "joint": bd.joint, "diff_count": bd.diff_count,
                    "clip_count": bd.clip_count, "grad_norm": ex["grad_norm"],
                })
            if val_metrics is not None and (state.step % cfg.val_every == 0 or state.step == total_steps):
                val_metrics.append({
                    "step": state.step,
                    "val_diff_loss": val_diffusion_loss(state, val_images, val_captions),
                })
    return state


# -- checkpoint serialization -----------------------------------------

_DTYPE_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1,
                np.dtype("int64"): 2, np.dtype("uint8"): 3}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def _write_record(f, name: str, arr: np.ndarray):
    nb = name.encode()
    f.write(struct.pack("<I", len(nb)))
    f.write(nb)
    f.write(struct.pack("<B", _DTYPE_CODES[arr.dtype]))
    f.write(struct.pack("<I", arr.ndim))
    if arr.ndim:
        f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    payload = arr.astype(arr.dtype.newbyteorder("<")).tobytes()
    f.write(struct.pack("<Q", len(payload)))
    f.write(payload)


def _read_exact(f, n: int) -> bytes:
    b = f.read(n)
    if len(b) != n:
        raise TruncatedCheckpoint("checkpoint file ended early")
    return b


def _read_record(f):
    head = f.read(4)
    if not head:
        return None
    if len(head) != 4:
        raise TruncatedCheckpoint("checkpoint file ended early")
    (name_len,) = struct.unpack("<I", head)
    name = _read_exact(f, name_len).decode()
    (code,) = struct.unpack("<B", _read_exact(f, 1))
    (ndim,) = struct.unpack("<I", _read_exact(f, 4))
    shape = struct.unpack(f"<{ndim}Q", _read_exact(f, 8 * ndim)) if ndim else ()
    (nbytes,) = struct.unpack("<Q", _read_exact(f, 8))
    data = np.frombuffer(_read_exact(f, nbytes), dtype=_CODE_DTYPES[code])
    return name, data.reshape(shape).copy()


def save_checkpoint(path, state: TrainState):
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<I", CKPT_VERSION))
    meta = {
        "step": state.step,
        "opt_step_count": state.opt.step_count,
        "config": dataclasses.asdict(state.config),
    }
    meta_bytes = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    _write_record(buf, "__meta__", meta_bytes)
    _write_record(buf, "tok/mean", state.tokenizer.mean)
    _write_record(buf, "tok/scale", state.tokenizer.scale)
    for k, t in state.model.params.items():
        _write_record(buf, f"param/{k}", t.data)
    for k, a in state.ema.items():
        _write_record(buf, f"ema/{k}", a)
    for k, a in state.opt.m.items():
        _write_record(buf, f"opt.m/{k}", a)
    for k, a in state.opt.v.items():
        _write_record(buf, f"opt.v/{k}", a)
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_checkpoint(path) -> TrainState:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CKPT_MAGIC:
            raise BadMagic(f"bad checkpoint magic {magic!r}")
        (version,) = struct.unpack("<I", _read_exact(f, 4))
        if version != CKPT_VERSION:
            raise VersionMismatch(f"unsupported checkpoint version {version}")
        records = {}
        while True:
            rec = _read_record(f)
            if rec is None:
                break
            records[rec[0]] = rec[1]

    meta = json.loads(records.pop("__meta__").tobytes().decode())
    cfg_d = meta["config"]
    cfg_d["mask"] = MaskingScheduleConfig(**cfg_d["mask"])
    cfg_d["model"] = ModelConfig(**cfg_d["model"])
    config = TrainConfig(**cfg_d)

    tok = Tokenizer(channels=config.model.token_channels,
                    mean=records.pop("tok/mean"), scale=records.pop("tok/scale"))
    state = init_state(config, tokenizer=tok)
    state.step = meta["step"]
    state.opt.step_count = meta["opt_step_count"]
    params = {k[len("param/"):]: v for k, v in records.items() if k.startswith("param/")}
    missing = set(state.model.params) - set(params)
    if missing:
        raise CheckpointError(f"missing parameter records: {sorted(missing)[:3]}...")
    try:
        state.model.load_param_arrays(params)
    except ValueError as e:
        raise ShapeMismatch(str(e)) from e
    state.ema = {k[len("ema/"):]: v for k, v in records.items() if k.startswith("ema/")}
    state.opt.m = {k[len("opt.m/"):]: v for k, v in records.items() if k.startswith("opt.m/")}
    state.opt.v = {k[len("opt.v/"):]: v for k, v in records.items() if k.startswith("opt.v/")}
    return state
