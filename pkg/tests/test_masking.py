"""Schedule means, the clipped-Gaussian sampler against a quadrature
oracle, exact mask counts, and gate semantics."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from marclip.masking import (MaskingScheduleConfig, clip_gate, diffusion_gate,
                             make_mask, sample_ratio, schedule_mean)
from marclip.rng import substream


def clipped_gaussian_oracle(mu, sigma, lo=0.0, hi=1.0):
    """(mean, var, P(r=hi)) of clip(N(mu, sigma^2), lo, hi), with the
    interior moment from quadrature and the endpoint masses in closed
    form."""
    p_lo = stats.norm.cdf(lo, mu, sigma)
    p_hi = stats.norm.sf(hi, mu, sigma)
    interior, _ = integrate.quad(
        lambda x: x * stats.norm.pdf(x, mu, sigma), lo, hi)
    interior2, _ = integrate.quad(
        lambda x: x * x * stats.norm.pdf(x, mu, sigma), lo, hi)
    mean = lo * p_lo + hi * p_hi + interior
    second = lo * lo * p_lo + hi * hi * p_hi + interior2
    return mean, second - mean * mean, p_hi


def test_schedule_means():
    wm = MaskingScheduleConfig(kind="WM", warmup_epochs=10.0)
    assert schedule_mean(wm, 0.0) == 0.0
    assert schedule_mean(wm, 5.0) == pytest.approx(0.5)
    assert schedule_mean(wm, 10.0) == 1.0
    assert schedule_mean(wm, 25.0) == 1.0
    cd = MaskingScheduleConfig(kind="CD", warmup_epochs=10.0)
    assert schedule_mean(cd, 0.0) == 1.0
    assert schedule_mean(cd, 5.0) == pytest.approx(0.5)
    assert schedule_mean(cd, 25.0) == 0.0
    fx = MaskingScheduleConfig(kind="FX")
    assert schedule_mean(fx, 0.0) == 1.0 == schedule_mean(fx, 100.0)


def test_clipped_sampler_matches_quadrature_oracle():
    cfg = MaskingScheduleConfig(kind="WM", sigma=0.55)
    rng = substream(0, 1, 0)
    n = 100_000
    draws = np.array([sample_ratio(cfg, 1.0, rng) for _ in range(n)])
    assert draws.min() >= 0.0 and draws.max() <= 1.0

    mean, var, p_one = clipped_gaussian_oracle(1.0, 0.55)
    se_mean = np.sqrt(var / n)
    assert abs(draws.mean() - mean) < 3 * se_mean
    emp_p_one = (draws == 1.0).mean()
    se_p = np.sqrt(p_one * (1 - p_one) / n)
    assert abs(emp_p_one - p_one) < 3 * se_p


def test_clipped_sampler_respects_custom_bounds():
    cfg = MaskingScheduleConfig(kind="FX", sigma=0.25, r_min=0.7, r_max=1.0)
    rng = substream(0, 1, 1)
    draws = np.array([sample_ratio(cfg, 1.0, rng) for _ in range(20_000)])
    assert draws.min() >= 0.7 and draws.max() <= 1.0
    mean, var, _ = clipped_gaussian_oracle(1.0, 0.25, 0.7, 1.0)
    assert abs(draws.mean() - mean) < 3 * np.sqrt(var / 20_000)


def test_uniform_kind():
    cfg = MaskingScheduleConfig(kind="UNI", r_min=0.2, r_max=0.8)
    rng = substream(0, 1, 2)
    draws = np.array([sample_ratio(cfg, 1.0, rng) for _ in range(20_000)])
    assert draws.min() >= 0.2 and draws.max() <= 0.8
    assert abs(draws.mean() - 0.5) < 3 * (0.6 / np.sqrt(12)) / np.sqrt(20_000)


def test_mask_counts_exhaustive_grid():
    rng = substream(0, 1, 3)
    for n in range(1, 65):
        for r100 in range(0, 101):
            r = r100 / 100.0
            state = make_mask(r, n, rng)
            expect = int(np.ceil(r * n))
            assert state.masked_count == expect
            assert state.mask.sum() == expect
            assert state.ratio_drawn == r


def test_make_mask_positions_are_uniform_enough():
    # every position should be masked roughly equally often at r=0.5
    counts = np.zeros(16)
    n_trials = 4000
    rng = substream(0, 1, 4)
    for _ in range(n_trials):
        counts += make_mask(0.5, 16, rng).mask
    p = 0.5
    se = np.sqrt(n_trials * p * (1 - p))
    assert np.all(np.abs(counts - n_trials * p) < 4 * se)


def test_gates():
    assert not diffusion_gate(0.5, 0.5)      # strict
    assert diffusion_gate(0.5000001, 0.5)
    assert clip_gate(0.75, 0.75)             # inclusive
    assert not clip_gate(0.7500001, 0.75)


@given(r=st.floats(0.0, 1.0), n=st.integers(1, 64))
@settings(max_examples=200, deadline=None)
def test_mask_count_property(r, n):
    state = make_mask(r, n, np.random.default_rng(0))
    assert state.masked_count == int(np.ceil(r * n))
    assert (r == 0.0) == (state.masked_count == 0)


def test_config_validation():
    with pytest.raises(ValueError):
        MaskingScheduleConfig(kind="XX")
    with pytest.raises(ValueError):
        MaskingScheduleConfig(gamma=1.0)
    with pytest.raises(ValueError):
        MaskingScheduleConfig(r_min=0.9, r_max=0.1)
    with pytest.raises(ValueError):
        make_mask(1.2, 8, np.random.default_rng(0))
