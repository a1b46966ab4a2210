import numpy as np
import pytest

from marclip.masking import MaskingScheduleConfig, make_mask
from marclip.model import Model, ModelConfig
from marclip.rng import substream
from marclip.training import TrainConfig


def small_model_config(**overrides) -> ModelConfig:
    base = dict(width=16, heads=2, enc_blocks=2, dec_blocks=2, text_blocks=1,
                buffer_tokens=2, head_layers=2, embed_dim=16, mlp_ratio=2,
                n_tokens=16, dtype="float64")
    base.update(overrides)
    return ModelConfig(**base)


def small_train_config(**overrides) -> TrainConfig:
    base = dict(epochs=4, batch_size=4, dataset_size=16, n_noise=2,
                lr_warmup_epochs=1.0, image_side=16, val_size=8,
                model=small_model_config(),
                mask=MaskingScheduleConfig())
    base.update(overrides)
    return TrainConfig(**base)


def fixed_masks(ratios, n_tokens, seed=99):
    return [make_mask(r, n_tokens, substream(seed, 0, i))
            for i, r in enumerate(ratios)]


def rel_err(fd, an):
    return abs(fd - an) / max(abs(fd), abs(an), 1e-6)


def fd_grad(f, param, j, h=3e-5):
    """Central difference of scalar-valued f wrt param.data.flat[j]."""
    flat = param.data.reshape(-1)
    old = flat[j]
    flat[j] = old + h
    lp = float(f().data)
    flat[j] = old - h
    lm = float(f().data)
    flat[j] = old
    return (lp - lm) / (2.0 * h)


@pytest.fixture
def tiny_model():
    return Model(small_model_config(), seed=0)
