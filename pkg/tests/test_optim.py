"""AdamW against a hand-stepped reference, clipping, decoupled decay,
EMA arithmetic, and the non-finite guard."""

import numpy as np
import pytest

from marclip.autodiff import Tensor
from marclip.optim import AdamW, NonFiniteGradient, ema_update, zero_grads


def make_params(values):
    out = {}
    for name, (v, g) in values.items():
        p = Tensor(np.array(v, dtype=np.float64), requires_grad=True)
        p.grad = np.array(g, dtype=np.float64)
        out[name] = p
    return out


def reference_adamw(theta, g, lr, b1, b2, eps, wd, steps):
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    for k in range(1, steps + 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** k)
        vhat = v / (1 - b2 ** k)
        theta = theta - lr * (mhat / (np.sqrt(vhat) + eps) + wd * theta)
    return theta


def test_adamw_matches_reference():
    g = np.array([0.3, -0.2, 0.05])
    theta0 = np.array([1.0, -1.0, 0.5])
    params = make_params({"w": (theta0, g)})
    opt = AdamW(lr=1e-2, weight_decay=0.1, clip_norm=1e9)
    for _ in range(7):
        params["w"].grad = g.copy()
        opt.step(params)
    expect = reference_adamw(theta0, g, 1e-2, 0.9, 0.95, 1e-8, 0.1, 7)
    assert np.allclose(params["w"].data, expect, atol=1e-12)


def test_global_norm_clipping():
    g = np.array([3.0, 4.0])   # norm 5
    params = make_params({"w": (np.zeros(2), g)})
    opt = AdamW(lr=1e-2, weight_decay=0.0, clip_norm=1.0)
    norm = opt.step(params)
    assert norm == pytest.approx(5.0)
    # post-clip grads have norm 1, so both moments see g/5
    expect = reference_adamw(np.zeros(2), g / 5.0, 1e-2, 0.9, 0.95, 1e-8, 0.0, 1)
    assert np.allclose(params["w"].data, expect, atol=1e-12)


def test_weight_decay_is_decoupled():
    # zero gradient: pure decay, independent of the adaptive moments
    params = make_params({"w": (np.array([2.0]), np.array([0.0]))})
    opt = AdamW(lr=0.1, weight_decay=0.5, clip_norm=1e9)
    opt.step(params)
    assert params["w"].data == pytest.approx(2.0 * (1 - 0.1 * 0.5))


def test_nonfinite_gradient_raises_with_name():
    params = make_params({"ok": (np.ones(2), np.ones(2)),
                          "bad": (np.ones(2), np.array([1.0, np.nan]))})
    opt = AdamW(lr=1e-3, weight_decay=0.0)
    with pytest.raises(NonFiniteGradient, match="bad"):
        opt.step(params)


def test_lr_zero_is_identity_even_with_decay():
    params = make_params({"w": (np.array([1.5]), np.array([0.7]))})
    opt = AdamW(lr=1e-3, weight_decay=0.1)
    opt.step(params, lr=0.0)
    assert params["w"].data == pytest.approx(1.5)


def test_ema_update_and_validation():
    params = make_params({"w": (np.array([2.0]), np.array([0.0]))})
    ema = {"w": np.array([0.0])}
    ema_update(ema, params, 0.75)
    assert ema["w"] == pytest.approx(0.25 * 2.0)
    ema_update(ema, params, 1.0)          # frozen
    assert ema["w"] == pytest.approx(0.5)
    with pytest.raises(ValueError):
        ema_update(ema, params, 1.5)
    with pytest.raises(ValueError):
        ema_update({"w": np.zeros(3)}, params, 0.5)


def test_zero_grads():
    params = make_params({"w": (np.ones(2), np.ones(2))})
    zero_grads(params)
    assert params["w"].grad is None or np.all(params["w"].grad == 0)
