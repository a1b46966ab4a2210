"""Evaluation protocols: linear probe on frozen pooled features,
image/text retrieval at configurable masking levels, robustness curves,
and internal text-image alignment scoring."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import synthdata
from .masking import make_mask
from .model import Model
from .rng import STREAM_EVAL, substream
from .tokenizer import Tokenizer


@dataclass
class EvalReport:
    probe_accuracy: float | None = None
    retrieval_i2t: dict[float, float] = field(default_factory=dict)
    retrieval_t2i: dict[float, float] = field(default_factory=dict)
    val_diff_loss: float | None = None
    mean_alignment: float | None = None
    split: str = "val"
    seed: int = 0


def encode_images(model: Model, tokenizer: Tokenizer, images: np.ndarray,
                  mask_ratio: float, seed: int, batch: int = 64):
    """Pooled embeddings for an image stack: (projected unit-norm,
    raw pre-projection) arrays. Fresh masks per image at mask_ratio."""
    n_tok = model.config.n_tokens
    pooled, raw = [], []
    for start in range(0, len(images), batch):
        chunk = images[start:start + batch]
        grids = tokenizer.tokenize_batch(chunk).astype(model.config.np_dtype)
        masks = [make_mask(mask_ratio, n_tok, substream(seed, STREAM_EVAL, 2, start + i))
                 for i in range(len(chunk))]
        enc = model.encoder_forward(grids, masks)
        pooled.append(enc.pooled.data)
        raw.append(enc.pooled_raw.data)
    return np.concatenate(pooled), np.concatenate(raw)


def linear_probe(features: np.ndarray, labels: np.ndarray,
                 test_features: np.ndarray, test_labels: np.ndarray,
                 n_classes: int | None = None, iters: int = 500,
                 lr: float = 0.5) -> float:
    """Multinomial logistic regression by full-batch gradient descent on
    frozen features; returns held-out accuracy."""
    n_classes = n_classes if n_classes is not None else int(labels.max()) + 1
    x = np.concatenate([features, np.ones((len(features), 1))], axis=1).astype(np.float64)
    xt = np.concatenate([test_features, np.ones((len(test_features), 1))], axis=1).astype(np.float64)
    w = np.zeros((x.shape[1], n_classes))
    onehot = np.eye(n_classes)[labels]
    for _ in range(iters):
        logits = x @ w
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        grad = x.T @ (p - onehot) / len(x)
        w -= lr * grad
    pred = (xt @ w).argmax(axis=1)
    return float((pred == test_labels).mean())


def retrieval_top1(model: Model, tokenizer: Tokenizer, images: np.ndarray,
                   captions: np.ndarray, mask_ratio: float, seed: int = 0):
    """Zero-shot nearest-caption retrieval over the split's distinct
    captions. Returns (image->text acc, text->image acc)."""
    img_emb, _ = encode_images(model, tokenizer, images, mask_ratio, seed)
    uniq, inverse = np.unique(captions, axis=0, return_inverse=True)
    txt_emb = model.text_encode_contrastive(uniq).data
    sims = img_emb @ txt_emb.T                       # (N_img, N_cap)
    i2t = float((sims.argmax(axis=1) == inverse).mean())
    # text->image: the best image for each caption must carry that caption
    best_img = sims.argmax(axis=0)
    t2i = float((inverse[best_img] == np.arange(len(uniq))).mean())
    return i2t, t2i


def alignment_score(model: Model, tokenizer: Tokenizer, image: np.ndarray,
                    caption: np.ndarray) -> float:
    """Cosine similarity between the unmasked image embedding and the
    caption embedding, in [-1, 1]."""
    grid = tokenizer.tokenize(image)[None].astype(model.config.np_dtype)
    enc = model.encoder_forward(grid, np.zeros((1, model.config.n_tokens), dtype=bool))
    txt = model.text_encode_contrastive(caption[None]).data[0]
    return float(enc.pooled.data[0] @ txt)


def shape_labels(captions: np.ndarray) -> np.ndarray:
    shape_ids = np.array([synthdata.WORD_TO_ID[s] for s in synthdata.SHAPES])
    return np.searchsorted(shape_ids, captions[:, 1])


def emit_report(report: EvalReport, csv_path, summary_path=None) -> str:
    rows = []
    if report.probe_accuracy is not None:
        rows.append(("linear_probe", report.split, 0.0, report.probe_accuracy))
    for ratio, acc in sorted(report.retrieval_i2t.items()):
        rows.append(("retrieval_i2t", report.split, ratio, acc))
    for ratio, acc in sorted(report.retrieval_t2i.items()):
        rows.append(("retrieval_t2i", report.split, ratio, acc))
    if report.val_diff_loss is not None:
        rows.append(("val_diff_loss", report.split, 0.0, report.val_diff_loss))
    if report.mean_alignment is not None:
        rows.append(("mean_alignment", report.split, 0.0, report.mean_alignment))

    with open(csv_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["metric", "split", "mask_ratio", "value", "seed"])
        for metric, split, ratio, value in rows:
            writer.writerow([metric, split, ratio, f"{value:.6f}", report.seed])

    lines = [f"{metric:>16s}  split={split}  ratio={ratio:<5g}  value={value:.4f}"
             for metric, split, ratio, value in rows]
    summary = "\n".join(lines) + "\n"
    if summary_path is not None:
        with open(summary_path, "w") as f:
            f.write(summary)
    return summary
