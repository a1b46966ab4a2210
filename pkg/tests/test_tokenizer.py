"""Patch pipeline shapes, exact invertibility, pixel bookkeeping, and
fitted normalization statistics."""

import numpy as np
import pytest

from marclip import synthdata as sd
from marclip.tokenizer import Tokenizer, fit_normalization, patchify, unpatchify


def test_shapes_and_grid_side():
    tok = Tokenizer()
    img = sd.render_scene(sd.spec_from_index(5), 32)
    grid = tok.tokenize(img)
    assert grid.shape == (64, 48)
    assert tok.grid_side(32) == 8
    assert tok.tokenize(sd.render_scene(sd.spec_from_index(5), 16)).shape == (16, 48)


def test_patchify_is_a_permutation_of_pixels():
    img = np.arange(32 * 32 * 3, dtype=np.float64).reshape(32, 32, 3)
    grid = patchify(img)
    assert sorted(grid.ravel().tolist()) == sorted(img.ravel().tolist())
    assert np.array_equal(unpatchify(grid, 32), img)


def test_token_zero_covers_top_left_4x4_block():
    img = np.zeros((32, 32, 3))
    img[:4, :4, :] = 7.0
    grid = patchify(img)
    assert np.all(grid[0] == 7.0)
    assert np.all(grid[1:] == 0.0)


def test_round_trip_exact_identity_stats():
    tok = Tokenizer()
    rng = np.random.default_rng(0)
    img = rng.normal(size=(32, 32, 3)).astype(np.float32)
    back = tok.detokenize(tok.tokenize(img), 32)
    assert back.dtype == np.float32
    assert np.array_equal(back, img)


def test_round_trip_exact_fitted_stats_on_scenes():
    images, _ = sd.generate_arrays(0, 64, "train")
    tok = fit_normalization(images)
    for img in images[:8]:
        back = tok.detokenize(tok.tokenize(img), 32)
        assert np.array_equal(back, img)


def test_tokenize_linearity_in_stats():
    img = sd.render_scene(sd.spec_from_index(42), 32)
    raw = patchify(img)
    mean = np.full(48, 0.25)
    scale = np.full(48, 2.0)
    tok = Tokenizer(mean=mean, scale=scale)
    assert np.allclose(tok.tokenize(img), (raw - 0.25) / 2.0)


def test_fit_normalization_standardizes():
    images, _ = sd.generate_arrays(0, 256, "train")
    tok = fit_normalization(images)
    grids = tok.tokenize_batch(images).reshape(-1, 48)
    assert np.all(np.abs(grids.mean(axis=0)) < 1e-2)
    live = grids.std(axis=0) > 1e-6
    assert np.all(np.abs(grids.std(axis=0)[live] - 1.0) < 1e-2)
    # stats are float32-representable so round trips stay exact
    assert np.array_equal(tok.mean, tok.mean.astype(np.float32).astype(np.float64))
    assert np.array_equal(tok.scale, tok.scale.astype(np.float32).astype(np.float64))


def test_degenerate_channel_gets_unit_scale():
    images = np.full((4, 16, 16, 3), 0.5, dtype=np.float32)
    tok = fit_normalization(images)
    assert np.all(tok.scale == 1.0)
    back = tok.detokenize(tok.tokenize(images[0]), 16)
    assert np.array_equal(back, images[0])


def test_bad_image_side_raises():
    with pytest.raises(ValueError):
        patchify(np.zeros((30, 30, 3)))
    with pytest.raises(ValueError):
        patchify(np.zeros((16, 32, 3)))
