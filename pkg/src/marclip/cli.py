"""Command-line entry point: data generation, training, sampling (plain
and semantically aligned), evaluation, and masking-schedule ablations.

Run configs are flat JSON documents with dotted keys (strict: unknown
keys are rejected). Exit codes: 0 ok, 2 config error, 3 IO error,
4 numeric failure, 5 infeasible budget.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
import time

import numpy as np

from . import __version__, synthdata
from .decoding import (DecodeConfig, Decoder, InfeasibleBudget, budget_to_switch,
                       write_ppm, write_sample_manifest)
from .evaluation import (EvalReport, alignment_score, emit_report, encode_images,
                         linear_probe, retrieval_top1, shape_labels)
from .masking import MaskingScheduleConfig
from .model import ModelConfig
from .optim import NonFiniteGradient
from .training import (METRIC_COLUMNS, CheckpointError, NonFiniteLoss, TrainConfig,
                       load_checkpoint, save_checkpoint, train_run, val_diffusion_loss)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4
EXIT_BUDGET = 5


class ConfigError(ValueError):
    pass


_MASK_KEY_ALIASES = {"min": "r_min", "max": "r_max"}


def parse_config(doc: dict):
    """Flat dotted-key JSON -> (TrainConfig, DecodeConfig, fx_overrides)."""
    if not isinstance(doc, dict):
        raise ConfigError("config document must be a JSON object")
    sections: dict[str, dict] = {"train": {}, "mask": {}, "model": {}, "decode": {},
                                 "ablate.fx": {}}
    for key, value in doc.items():
        if key.startswith("ablate.fx."):
            section, field = "ablate.fx", key[len("ablate.fx."):]
        elif "." in key:
            section, field = key.split(".", 1)
        else:
            raise ConfigError(f"config key '{key}' is not dotted (section.field)")
        if section not in sections:
            raise ConfigError(f"unknown config section '{section}'")
        if section in ("mask", "ablate.fx"):
            field = _MASK_KEY_ALIASES.get(field, field)
        sections[section][field] = value

    def build(cls, kwargs, label):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(kwargs) - names
        if unknown:
            raise ConfigError(f"unknown {label} config keys: {sorted(unknown)}")
        try:
            return cls(**kwargs)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"invalid {label} config: {e}") from e

    mask = build(MaskingScheduleConfig, sections["mask"], "mask")
    model = build(ModelConfig, sections["model"], "model")
    if set(sections["train"]) & {"mask", "model"}:
        raise ConfigError("mask/model settings belong in their own sections")
    train = build(TrainConfig, {**sections["train"], "mask": mask, "model": model}, "train")
    decode = build(DecodeConfig, sections["decode"], "decode")
    fx_names = {f.name for f in dataclasses.fields(MaskingScheduleConfig)}
    unknown = set(sections["ablate.fx"]) - fx_names
    if unknown:
        raise ConfigError(f"unknown ablate.fx config keys: {sorted(unknown)}")
    return train, decode, sections["ablate.fx"]


def flatten_config(train: TrainConfig, decode: DecodeConfig, fx: dict | None = None) -> dict:
    out = {}
    for f in dataclasses.fields(TrainConfig):
        if f.name in ("mask", "model"):
            continue
        out[f"train.{f.name}"] = getattr(train, f.name)
    inv = {v: k for k, v in _MASK_KEY_ALIASES.items()}
    for f in dataclasses.fields(MaskingScheduleConfig):
        out[f"mask.{inv.get(f.name, f.name)}"] = getattr(train.mask, f.name)
    for f in dataclasses.fields(ModelConfig):
        out[f"model.{f.name}"] = getattr(train.model, f.name)
    for f in dataclasses.fields(DecodeConfig):
        out[f"decode.{f.name}"] = getattr(decode, f.name)
    for k, v in (fx or {}).items():
        out[f"ablate.fx.{inv.get(k, k)}"] = v
    return out


def load_config_file(path):
    try:
        with open(path) as f:
            doc = json.load(f)
    except FileNotFoundError as e:
        raise IOError(f"config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from e
    return parse_config(doc)


def write_manifest(path, config_echo: dict, seed: int, started: float,
                   summary: dict, artifacts: list[str]):
    manifest = {
        "config": config_echo,
        "seed": seed,
        "started": started,
        "finished": time.time(),
        "metrics": summary,
        "artifacts": artifacts,
        "version": __version__,
    }
    tmp = str(path) + ".tmp"
    with open(tmp, "w") as f:
        json.dump(manifest, f, indent=2, default=float)
    os.replace(tmp, path)


def _write_metrics_csv(path, rows):
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=METRIC_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


# -- commands ----------------------------------------------------------

def cmd_gen_data(args):
    images, captions = synthdata.generate_arrays(args.seed, args.count, args.split,
                                                 side=args.side)
    synthdata.save_cache(args.out, images, captions)
    print(f"wrote {args.count} {args.split} samples to {args.out}")
    return EXIT_OK


def cmd_train(args):
    train_cfg, decode_cfg, fx = load_config_file(args.config)
    os.makedirs(args.out_dir, exist_ok=True)
    started = time.time()
    metrics, val_metrics = [], []
    state = train_run(train_cfg, metrics=metrics, val_metrics=val_metrics)
    ckpt_path = os.path.join(args.out_dir, "checkpoint.bin")
    save_checkpoint(ckpt_path, state)
    _write_metrics_csv(os.path.join(args.out_dir, "metrics.csv"), metrics)
    with open(os.path.join(args.out_dir, "val_metrics.csv"), "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["step", "val_diff_loss"])
        writer.writeheader()
        for row in val_metrics:
            writer.writerow(row)
    summary = {
        "steps": state.step,
        "final_joint": metrics[-1]["joint"] if metrics else None,
        "final_diff_loss": metrics[-1]["diff_loss"] if metrics else None,
        "final_clip_loss": metrics[-1]["clip_loss"] if metrics else None,
    }
    write_manifest(os.path.join(args.out_dir, "manifest.json"),
                   flatten_config(train_cfg, decode_cfg, fx), train_cfg.seed,
                   started, summary,
                   [ckpt_path, os.path.join(args.out_dir, "metrics.csv")])
    print(f"trained {state.step} steps -> {ckpt_path}")
    return EXIT_OK


def _load_state(path):
    if not os.path.exists(path):
        raise IOError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def _decoder_from(state, decode_cfg: DecodeConfig) -> Decoder:
    return Decoder(state.ema_model(), state.tokenizer, state.schedule, decode_cfg)


def _parse_prompt(prompt: str):
    try:
        return synthdata.caption_from_words(prompt.split())
    except ValueError as e:
        raise ConfigError(str(e)) from e


def cmd_sample(args):
    state = _load_state(args.checkpoint)
    caption = _parse_prompt(args.prompt)
    cfg = DecodeConfig(steps=args.steps, cfg_weight=args.cfg, seed=args.seed,
                       temperature=args.temperature)
    started = time.time()
    image, ledger, info = _decoder_from(state, cfg).decode(caption)
    write_ppm(args.out, image)
    write_sample_manifest(str(args.out) + ".manifest.jsonl", caption, cfg, ledger, info)
    write_manifest(str(args.out) + ".manifest.json",
                   flatten_config(state.config, cfg), args.seed, started,
                   {"nfe": ledger.as_dict(), "alignment": info["final_alignment"]},
                   [str(args.out)])
    print(f"sampled '{args.prompt}' -> {args.out} "
          f"(decoder passes {ledger.decoder_forwards})")
    return EXIT_OK


def cmd_sample_sad(args):
    state = _load_state(args.checkpoint)
    caption = _parse_prompt(args.prompt)
    if args.budget is not None:
        t_switch = budget_to_switch(args.budget, args.steps, args.k)
    elif args.t_switch is not None:
        t_switch = args.t_switch
    else:
        raise ConfigError("sample-sad needs --budget or --t-switch")
    cfg = DecodeConfig(steps=args.steps, cfg_weight=args.cfg, seed=args.seed,
                       temperature=args.temperature, k=args.k, t_switch=t_switch,
                       nfe_budget=args.budget)
    started = time.time()
    image, ledger, info = _decoder_from(state, cfg).sad_decode(caption)
    write_ppm(args.out, image)
    write_sample_manifest(str(args.out) + ".manifest.jsonl", caption, cfg, ledger, info)
    write_manifest(str(args.out) + ".manifest.json",
                   flatten_config(state.config, cfg), args.seed, started,
                   {"nfe": ledger.as_dict(), "t_switch": t_switch,
                    "selected": info["selected"], "score": info["score"]},
                   [str(args.out)])
    print(f"SAD sampled '{args.prompt}' k={args.k} t_switch={t_switch} -> {args.out}")
    return EXIT_OK


def cmd_eval(args):
    state = _load_state(args.checkpoint)
    try:
        grid = [float(x) for x in args.mask_grid.split(",") if x != ""]
    except ValueError as e:
        raise ConfigError(f"bad --mask-grid: {e}") from e
    model = state.ema_model()
    n_eval = args.count
    images, captions = synthdata.generate_arrays(state.config.seed, n_eval,
                                                 args.split, side=state.config.image_side)
    report = EvalReport(split=args.split, seed=args.seed)
    for ratio in grid:
        i2t, t2i = retrieval_top1(model, state.tokenizer, images, captions,
                                  ratio, seed=args.seed)
        report.retrieval_i2t[ratio] = i2t
        report.retrieval_t2i[ratio] = t2i
    tr_images, tr_captions = synthdata.generate_arrays(state.config.seed, n_eval,
                                                       "train", side=state.config.image_side)
    _, tr_feats = encode_images(model, state.tokenizer, tr_images, 0.0, args.seed)
    _, te_feats = encode_images(model, state.tokenizer, images, 0.0, args.seed)
    report.probe_accuracy = linear_probe(tr_feats, shape_labels(tr_captions),
                                         te_feats, shape_labels(captions))
    report.val_diff_loss = val_diffusion_loss(state, images[:state.config.val_size],
                                              captions[:state.config.val_size])
    os.makedirs(args.out_dir, exist_ok=True)
    summary = emit_report(report, os.path.join(args.out_dir, "eval.csv"),
                          os.path.join(args.out_dir, "eval.txt"))
    print(summary, end="")
    return EXIT_OK


def cmd_ablate_mask(args):
    base_train, decode_cfg, fx = load_config_file(args.config)
    kinds = [k.strip() for k in args.kinds.split(",") if k.strip()]
    os.makedirs(args.out_dir, exist_ok=True)
    started = time.time()
    rows = []
    for kind in kinds:
        mask_kwargs = dataclasses.asdict(base_train.mask)
        mask_kwargs["kind"] = kind
        if kind == "FX":
            mask_kwargs.update(fx)
        try:
            mask_cfg = MaskingScheduleConfig(**mask_kwargs)
        except ValueError as e:
            raise ConfigError(f"bad masking config for kind {kind}: {e}") from e
        cfg = dataclasses.replace(base_train, mask=mask_cfg)
        metrics = []
        state = train_run(cfg, metrics=metrics)
        images, captions = synthdata.generate_arrays(cfg.seed, args.eval_count, "val",
                                                     side=cfg.image_side)
        i2t, t2i = retrieval_top1(state.ema_model(), state.tokenizer, images,
                                  captions, 0.0, seed=cfg.seed)
        rows.append({
            "kind": kind, "sigma": mask_cfg.sigma,
            "r_min": mask_cfg.r_min, "r_max": mask_cfg.r_max,
            "retrieval_i2t_0": f"{i2t:.6f}", "retrieval_t2i_0": f"{t2i:.6f}",
            "final_diff_loss": f"{metrics[-1]['diff_loss']:.6f}" if metrics else "",
            "final_clip_loss": f"{metrics[-1]['clip_loss']:.6f}" if metrics else "",
            "status": "ok",
        })
    csv_path = os.path.join(args.out_dir, "ablation.csv")
    with open(csv_path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
    write_manifest(os.path.join(args.out_dir, "manifest.json"),
                   flatten_config(base_train, decode_cfg, fx), base_train.seed,
                   started, {"kinds": kinds}, [csv_path])
    print(f"ablation over {kinds} -> {csv_path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="marclip")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a dataset cache file")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--split", default="train", choices=["train", "val"])
    g.add_argument("--side", type=int, default=32)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="run training from a JSON config")
    t.add_argument("--config", required=True)
    t.add_argument("--out-dir", required=True)
    t.set_defaults(fn=cmd_train)

    s = sub.add_parser("sample", help="generate one image from a prompt")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--prompt", required=True,
                   help='e.g. "red circle large TL"')
    s.add_argument("--steps", type=int, default=64)
    s.add_argument("--cfg", type=float, default=1.0)
    s.add_argument("--temperature", type=float, default=1.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_sample)

    d = sub.add_parser("sample-sad", help="candidate-scored generation")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--prompt", required=True)
    d.add_argument("--k", type=int, required=True)
    d.add_argument("--budget", type=int, default=None)
    d.add_argument("--t-switch", type=int, default=None)
    d.add_argument("--steps", type=int, default=64)
    d.add_argument("--cfg", type=float, default=1.0)
    d.add_argument("--temperature", type=float, default=1.0)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--out", required=True)
    d.set_defaults(fn=cmd_sample_sad)

    e = sub.add_parser("eval", help="probe + retrieval robustness curve")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--split", default="val", choices=["train", "val"])
    e.add_argument("--mask-grid", default="0,0.25,0.5,0.75,0.9")
    e.add_argument("--count", type=int, default=256)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out-dir", required=True)
    e.set_defaults(fn=cmd_eval)

    a = sub.add_parser("ablate-mask", help="short run per masking schedule kind")
    a.add_argument("--kinds", default="WM,FX,UNI,CD")
    a.add_argument("--config", required=True)
    a.add_argument("--eval-count", type=int, default=256)
    a.add_argument("--out-dir", required=True)
    a.set_defaults(fn=cmd_ablate_mask)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except InfeasibleBudget as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_BUDGET
    except (ConfigError,) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (NonFiniteLoss, NonFiniteGradient, FloatingPointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CheckpointError, IOError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
