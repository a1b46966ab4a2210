"""Encoder-decoder transformer with a per-token MLP diffusion head.

The vision encoder sees only learnable buffer tokens plus the unmasked
latent tokens (padded per batch with an attention mask). The decoder
rebuilds the full-length sequence with a learnable mask token, attends
over text conditioning via cross-attention, and emits one conditioning
vector z per grid position. Two small text towers provide contrastive
embeddings and decoder conditioning; text never reaches the encoder.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import synthdata
from .autodiff import (
    Tensor,
    concat,
    gather_rows,
    l2_normalize,
    layer_norm,
    scatter_rows,
    softmax,
)
from .masking import MaskState

NEG_INF = -np.inf


@dataclass
class ModelConfig:
    width: int = 64
    heads: int = 4
    enc_blocks: int = 2
    dec_blocks: int = 2
    text_blocks: int = 2
    buffer_tokens: int = 8
    head_layers: int = 6
    embed_dim: int = 64            # contrastive space
    n_tokens: int = 64
    token_channels: int = 48
    caption_len: int = synthdata.CAPTION_LEN
    vocab_size: int = synthdata.VOCAB_SIZE
    clip_loss_layer: int | None = None   # 1-based encoder block; None = last
    clip_tokens: str = "all"             # "all" | "buffer"
    mlp_ratio: int = 4
    dtype: str = "float32"

    def __post_init__(self):
        if self.width % self.heads != 0:
            raise ValueError(f"width {self.width} not divisible by heads {self.heads}")
        if self.clip_tokens not in ("all", "buffer"):
            raise ValueError(f"clip_tokens must be 'all' or 'buffer', got {self.clip_tokens}")
        if self.clip_loss_layer is not None and not (1 <= self.clip_loss_layer <= self.enc_blocks):
            raise ValueError(f"clip_loss_layer out of range: {self.clip_loss_layer}")

    @property
    def tap_layer(self) -> int:
        return self.clip_loss_layer if self.clip_loss_layer is not None else self.enc_blocks

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)


@dataclass
class EncoderOutput:
    final: Tensor            # (B, buffers+U, width) after final layer norm
    tap: Tensor              # features at the configured pooling layer
    pooled: Tensor           # (B, embed_dim) L2-normalized
    pooled_raw: Tensor       # (B, width) mean-pooled, pre-projection
    index: np.ndarray        # (B, U) original grid positions of token rows
    valid: np.ndarray        # (B, U) 1.0 where a token row is real
    masks: np.ndarray        # (B, n_tokens) bool, True = masked


def sinusoidal_embedding(t: np.ndarray, dim: int, max_period: float = 10000.0) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-np.log(max_period) * np.arange(half) / half)
    ang = np.asarray(t, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


class Model:
    def __init__(self, config: ModelConfig, params: dict[str, Tensor] | None = None,
                 seed: int = 0):
        self.config = config
        self.params = params if params is not None else self._init_params(seed)

    # -- parameters ----------------------------------------------------

    def _init_params(self, seed: int) -> dict[str, Tensor]:
        from .rng import STREAM_INIT, substream
        rng = substream(seed, STREAM_INIT)
        c = self.config
        dt = c.np_dtype
        p: dict[str, Tensor] = {}

        def norm(name, *shape, std=0.02):
            p[name] = Tensor(rng.normal(0.0, std, shape).astype(dt), requires_grad=True)

        def zeros(name, *shape):
            p[name] = Tensor(np.zeros(shape, dtype=dt), requires_grad=True)

        def ones(name, *shape):
            p[name] = Tensor(np.ones(shape, dtype=dt), requires_grad=True)

        def block(prefix, cross=False):
            for sub in ["attn"] + (["xattn"] if cross else []) + ["mlp"]:
                ones(f"{prefix}.{sub}.ln_g", c.width)
                zeros(f"{prefix}.{sub}.ln_b", c.width)
            for sub in ["attn"] + (["xattn"] if cross else []):
                for w in ("wq", "wk", "wv", "wo"):
                    norm(f"{prefix}.{sub}.{w}", c.width, c.width)
                for b in ("bq", "bk", "bv", "bo"):
                    zeros(f"{prefix}.{sub}.{b}", c.width)
            hidden = c.mlp_ratio * c.width
            norm(f"{prefix}.mlp.w1", c.width, hidden)
            zeros(f"{prefix}.mlp.b1", hidden)
            norm(f"{prefix}.mlp.w2", hidden, c.width)
            zeros(f"{prefix}.mlp.b2", c.width)

        # vision encoder
        norm("enc.in.w", c.token_channels, c.width)
        zeros("enc.in.b", c.width)
        norm("enc.pos", c.n_tokens, c.width)
        norm("enc.buffer", c.buffer_tokens, c.width)
        for i in range(c.enc_blocks):
            block(f"enc.block{i}")
        ones("enc.final_ln.g", c.width)
        zeros("enc.final_ln.b", c.width)
        norm("img_proj.w", c.width, c.embed_dim)

        # decoder
        norm("enc2dec.w", c.width, c.width)
        zeros("enc2dec.b", c.width)
        norm("dec.mask_tok", c.width)
        norm("dec.pos", c.n_tokens, c.width)
        for i in range(c.dec_blocks):
            block(f"dec.block{i}", cross=True)
        ones("dec.final_ln.g", c.width)
        zeros("dec.final_ln.b", c.width)

        # text towers
        for tower in ("txt_clip", "txt_cond"):
            norm(f"{tower}.emb", c.vocab_size, c.width)
            norm(f"{tower}.pos", c.caption_len, c.width)
            for i in range(c.text_blocks):
                block(f"{tower}.block{i}")
            ones(f"{tower}.final_ln.g", c.width)
            zeros(f"{tower}.final_ln.b", c.width)
        norm("txt_proj.w", c.width, c.embed_dim)
        norm("cond.null", c.caption_len, c.width)

        # diffusion head (final projection zero-init so eps-hat starts at 0)
        norm("head.t1.w", c.width, c.width)
        zeros("head.t1.b", c.width)
        norm("head.t2.w", c.width, c.width)
        zeros("head.t2.b", c.width)
        norm("head.in.w", c.token_channels, c.width)
        zeros("head.in.b", c.width)
        # head hidden width matches the transformer embedding dimension
        for i in range(c.head_layers):
            ones(f"head.block{i}.ln_g", c.width)
            zeros(f"head.block{i}.ln_b", c.width)
            norm(f"head.block{i}.w1", c.width, c.width)
            zeros(f"head.block{i}.b1", c.width)
            norm(f"head.block{i}.w2", c.width, c.width)
            zeros(f"head.block{i}.b2", c.width)
        ones("head.out_ln.g", c.width)
        zeros("head.out_ln.b", c.width)
        zeros("head.out.w", c.width, c.token_channels)
        zeros("head.out.b", c.token_channels)

        # learnable temperature, stored as log of the logit scale
        p["logit_scale"] = Tensor(np.asarray(2.659, dtype=dt), requires_grad=True)
        return p

    def param_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_param_arrays(self, arrays: dict[str, np.ndarray]):
        for k, t in self.params.items():
            a = arrays[k]
            if a.shape != t.data.shape:
                raise ValueError(f"shape mismatch for '{k}': {a.shape} vs {t.data.shape}")
            t.data = a.astype(t.data.dtype, copy=True)

    def frozen_copy(self, arrays: dict[str, np.ndarray] | None = None) -> "Model":
        """Read-only snapshot (no gradient recording), e.g. EMA weights."""
        src = arrays if arrays is not None else {k: v.data for k, v in self.params.items()}
        params = {k: Tensor(np.asarray(v)) for k, v in src.items()}
        return Model(self.config, params=params)

    def logit_scale(self) -> Tensor:
        return self.params["logit_scale"].exp().clamp_max(100.0)

    # -- building blocks -----------------------------------------------

    def _ln(self, x, prefix):
        return layer_norm(x, self.params[f"{prefix}.ln_g"], self.params[f"{prefix}.ln_b"])

    def _heads_split(self, x, b, l):
        c = self.config
        dh = c.width // c.heads
        return x.reshape(b, l, c.heads, dh).transpose(0, 2, 1, 3)

    def _attention(self, x, kv, prefix, key_bias=None):
        """Residual attention sublayer; kv=x for self-attention."""
        p = self.params
        c = self.config
        b, lq = x.shape[0], x.shape[1]
        lk = kv.shape[1]
        h = self._ln(x, prefix)
        hk = h if kv is x else kv  # cross-attn keys come pre-normalized
        q = self._heads_split(h @ p[f"{prefix}.wq"] + p[f"{prefix}.bq"], b, lq)
        k = self._heads_split(hk @ p[f"{prefix}.wk"] + p[f"{prefix}.bk"], b, lk)
        v = self._heads_split(hk @ p[f"{prefix}.wv"] + p[f"{prefix}.bv"], b, lk)
        scale = 1.0 / math.sqrt(c.width // c.heads)
        scores = (q @ k.swapaxes(-1, -2)) * scale
        if key_bias is not None:
            scores = scores + Tensor(key_bias)
        att = softmax(scores, axis=-1)
        out = (att @ v).transpose(0, 2, 1, 3).reshape(b, lq, c.width)
        return x + (out @ p[f"{prefix}.wo"] + p[f"{prefix}.bo"])

    def _mlp(self, x, prefix):
        p = self.params
        h = self._ln(x, prefix)
        h = (h @ p[f"{prefix}.w1"] + p[f"{prefix}.b1"]).gelu()
        return x + (h @ p[f"{prefix}.w2"] + p[f"{prefix}.b2"])

    # -- vision encoder ------------------------------------------------

    def encoder_forward(self, grid_values: np.ndarray, masks) -> EncoderOutput:
        """grid_values: (B, n_tokens, C); masks: (B, n_tokens) bool or a
        list of MaskState. Masked token values never enter the graph."""
        p = self.params
        c = self.config
        masks = _mask_array(masks, c.n_tokens)
        grid_values = np.asarray(grid_values, dtype=c.np_dtype)
        b = grid_values.shape[0]
        if masks.shape != (b, c.n_tokens):
            raise ValueError(f"mask shape {masks.shape} does not match grid ({b}, {c.n_tokens})")
        counts = (~masks).sum(axis=1)
        u = int(counts.max())
        if u == 0 and c.buffer_tokens == 0:
            raise ValueError("encoder needs at least one unmasked token or buffer token")

        # embed all positions, then gather only the unmasked rows
        x = Tensor(grid_values) @ p["enc.in.w"] + p["enc.in.b"]
        x = x + p["enc.pos"]
        index = np.zeros((b, max(u, 1)), dtype=np.int64)
        valid = np.zeros((b, max(u, 1), 1), dtype=c.np_dtype)
        for i in range(b):
            pos = np.flatnonzero(~masks[i])
            index[i, :len(pos)] = pos
            valid[i, :len(pos)] = 1.0
        tokens = gather_rows(x, index) * Tensor(valid)

        buffers = Tensor(np.zeros((b, c.buffer_tokens, c.width), dtype=c.np_dtype)) \
            + p["enc.buffer"].reshape(1, c.buffer_tokens, c.width)
        h = concat([buffers, tokens], axis=1)
        row_valid = np.concatenate(
            [np.ones((b, c.buffer_tokens, 1), dtype=c.np_dtype), valid], axis=1)
        key_bias = np.where(row_valid[:, None, None, :, 0] > 0, 0.0, NEG_INF).astype(c.np_dtype)

        tap = None
        for i in range(c.enc_blocks):
            h = self._attention(h, h, f"enc.block{i}.attn", key_bias=key_bias)
            h = self._mlp(h, f"enc.block{i}.mlp")
            if i + 1 == c.tap_layer:
                tap = h
        final = layer_norm(h, p["enc.final_ln.g"], p["enc.final_ln.b"])
        if c.tap_layer == c.enc_blocks:
            tap = final

        if c.clip_tokens == "buffer":
            w = np.zeros_like(row_valid)
            w[:, :c.buffer_tokens] = 1.0 / c.buffer_tokens
        else:
            w = row_valid / row_valid.sum(axis=1, keepdims=True)
        pooled_raw = (tap * Tensor(w)).sum(axis=1)
        pooled = l2_normalize(pooled_raw @ p["img_proj.w"])
        return EncoderOutput(final=final, tap=tap, pooled=pooled, pooled_raw=pooled_raw,
                             index=index, valid=valid[:, :, 0], masks=masks)

    # -- decoder -------------------------------------------------------

    def decoder_forward(self, enc_out: EncoderOutput, masks, cond: Tensor) -> Tensor:
        """Rebuild the full token sequence (encoder features at unmasked
        positions, mask token elsewhere) and return z for every position."""
        p = self.params
        c = self.config
        masks = _mask_array(masks, c.n_tokens)
        if not np.array_equal(masks, enc_out.masks):
            raise ValueError("mask state does not match the encoder output")
        b = masks.shape[0]

        tokens = enc_out.final[:, c.buffer_tokens:, :]
        tokens = (tokens @ p["enc2dec.w"] + p["enc2dec.b"]) * Tensor(enc_out.valid[:, :, None])
        full = scatter_rows(tokens, enc_out.index, c.n_tokens)
        mask_ind = Tensor(masks[:, :, None].astype(c.np_dtype))
        full = full + p["dec.mask_tok"].reshape(1, 1, c.width) * mask_ind
        h = full + p["dec.pos"]
        for i in range(c.dec_blocks):
            h = self._attention(h, h, f"dec.block{i}.attn")
            h = self._attention(h, cond, f"dec.block{i}.xattn")
            h = self._mlp(h, f"dec.block{i}.mlp")
        return layer_norm(h, p["dec.final_ln.g"], p["dec.final_ln.b"])

    # -- text towers ---------------------------------------------------

    def _text_tower(self, captions: np.ndarray, tower: str) -> Tensor:
        p = self.params
        c = self.config
        captions = np.asarray(captions, dtype=np.int64)
        if captions.ndim == 1:
            captions = captions[None]
        if captions.shape[1] != c.caption_len:
            raise ValueError(f"caption length must be {c.caption_len}, got {captions.shape}")
        if captions.min() < 0 or captions.max() >= c.vocab_size:
            raise ValueError("caption token id out of vocabulary")
        h = p[f"{tower}.emb"][captions] + p[f"{tower}.pos"]
        for i in range(c.text_blocks):
            h = self._attention(h, h, f"{tower}.block{i}.attn")
            h = self._mlp(h, f"{tower}.block{i}.mlp")
        return layer_norm(h, p[f"{tower}.final_ln.g"], p[f"{tower}.final_ln.b"])

    def text_encode_contrastive(self, captions: np.ndarray) -> Tensor:
        h = self._text_tower(captions, "txt_clip")
        pooled = h.mean(axis=1)
        return l2_normalize(pooled @ self.params["txt_proj.w"])

    def text_encode_cond(self, captions: np.ndarray) -> Tensor:
        """Conditioning token sequence; a NULL-prompt caption maps to the
        dedicated learned null sequence."""
        captions = np.asarray(captions, dtype=np.int64)
        if captions.ndim == 1:
            captions = captions[None]
        is_null = np.all(captions == synthdata.NULL_TOKEN, axis=1)
        if is_null.all():
            return self.null_cond(len(captions))
        out = self._text_tower(captions, "txt_cond")
        if is_null.any():
            keep = Tensor((~is_null)[:, None, None].astype(self.config.np_dtype))
            out = out * keep + self.null_cond(len(captions)) * (1.0 - keep)
        return out

    def null_cond(self, batch: int) -> Tensor:
        c = self.config
        base = Tensor(np.zeros((batch, c.caption_len, c.width), dtype=c.np_dtype))
        return base + self.params["cond.null"].reshape(1, c.caption_len, c.width)

    # -- diffusion head ------------------------------------------------

    def diffusion_head(self, x_t, timestep: np.ndarray, z: Tensor) -> Tensor:
        """Noise prediction for flat token rows: x_t (M, C), timestep (M,),
        z (M, width). Timestep enters as a sinusoidal embedding mapped by
        a 2-layer MLP and added to z."""
        p = self.params
        c = self.config
        x_t = x_t if isinstance(x_t, Tensor) else Tensor(np.asarray(x_t, dtype=c.np_dtype))
        temb = sinusoidal_embedding(timestep, c.width).astype(c.np_dtype)
        tc = (Tensor(temb) @ p["head.t1.w"] + p["head.t1.b"]).silu() @ p["head.t2.w"] + p["head.t2.b"]
        u = x_t @ p["head.in.w"] + p["head.in.b"] + z + tc
        for i in range(c.head_layers):
            h = layer_norm(u, p[f"head.block{i}.ln_g"], p[f"head.block{i}.ln_b"])
            h = (h @ p[f"head.block{i}.w1"] + p[f"head.block{i}.b1"]).silu()
            u = u + (h @ p[f"head.block{i}.w2"] + p[f"head.block{i}.b2"])
        out = layer_norm(u, p["head.out_ln.g"], p["head.out_ln.b"])
        return out @ p["head.out.w"] + p["head.out.b"]


def _mask_array(masks, n_tokens: int) -> np.ndarray:
    if isinstance(masks, MaskState):
        masks = [masks]
    if isinstance(masks, (list, tuple)) and masks and isinstance(masks[0], MaskState):
        masks = np.stack([m.mask for m in masks])
    masks = np.asarray(masks, dtype=bool)
    if masks.ndim == 1:
        masks = masks[None]
    if masks.shape[-1] != n_tokens:
        raise ValueError(f"mask length {masks.shape[-1]} != n_tokens {n_tokens}")
    return masks
