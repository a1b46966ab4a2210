"""Decode plan arithmetic, respacing, CFG identities, ancestral-sampler
inversion oracle, SAD selection with a mock scorer, and NFE accounting."""

import math

import numpy as np
import pytest
from conftest import small_model_config

from marclip import synthdata as sd
from marclip.decoding import (Decoder, DecodeConfig, InfeasibleBudget,
                              NfeLedger, anneal_ratio, budget_to_switch,
                              cfg_eps, ddpm_sample, nfe_plan, omega_at,
                              resample_timesteps, unmask_plan, write_ppm)
from marclip.losses import build_cosine_schedule
from marclip.model import Model
from marclip.tokenizer import Tokenizer


@pytest.fixture(scope="module")
def decoder_parts():
    model = Model(small_model_config(dtype="float32"), seed=0)
    # give the head some signal so decoding is not a pure noise walk
    rng = np.random.default_rng(1)
    model.params["head.out.w"].data[:] = rng.normal(
        size=model.params["head.out.w"].data.shape).astype(np.float32) * 0.02
    return model, Tokenizer(), build_cosine_schedule()


def make_decoder(parts, **cfg_kw):
    model, tok, sched = parts
    base = dict(steps=8, infer_steps=10, cfg_weight=1.5, seed=0)
    base.update(cfg_kw)
    return Decoder(model, tok, sched, DecodeConfig(**base))


def test_anneal_ratio_shape():
    S = 64
    vals = [anneal_ratio(s, S) for s in range(S)]
    assert vals[-1] == 0.0
    assert all(a > b for a, b in zip(vals, vals[1:]))
    for s in range(S - 1):
        assert vals[s] == pytest.approx(math.cos(math.pi / 2 * (s + 1) / S))


def test_unmask_plan_all_step_counts():
    for S in range(1, 65):
        ks = unmask_plan(S, 64)
        assert len(ks) == S
        assert sum(ks) == 64
        assert min(ks) >= 1
    assert unmask_plan(64, 64) == [1] * 64
    assert unmask_plan(1, 64) == [64]
    with pytest.raises(ValueError):
        unmask_plan(65, 64)


def test_resample_timesteps():
    ts = resample_timesteps(1000, 100)
    assert ts[0] == 1000 and ts[-1] == 0
    assert len(ts) == 101
    assert np.all(np.diff(ts) < 0)
    assert np.array_equal(resample_timesteps(10, 10), np.arange(10, -1, -1))


def test_cfg_eps_identities_and_formula():
    rng = np.random.default_rng(0)
    u = rng.normal(size=(4, 3))
    c = rng.normal(size=(4, 3))
    assert cfg_eps(u, c, 0.0) is u
    assert cfg_eps(u, c, 1.0) is c
    assert np.allclose(cfg_eps(u, c, 2.5), u + 2.5 * (c - u))


def test_omega_schedules():
    const = DecodeConfig(steps=8, cfg_weight=2.0)
    assert all(omega_at(const, s) == 2.0 for s in range(8))
    lin = DecodeConfig(steps=5, cfg_weight=2.0, cfg_schedule="linear")
    assert omega_at(lin, 0) == 0.0
    assert omega_at(lin, 4) == 2.0
    assert omega_at(lin, 2) == pytest.approx(1.0)


def test_ddpm_sampler_inverts_consistent_eps_exactly():
    """If eps_fn always reports the noise consistent with a fixed clean
    signal, deterministic sampling must land exactly on that signal."""
    sched = build_cosine_schedule()
    rng = np.random.default_rng(1)
    x0 = rng.normal(size=(5, 8))
    ab = sched.alpha_bar

    def eps_fn(x, t):
        return (x - np.sqrt(ab[t]) * x0) / np.sqrt(1.0 - ab[t])

    x_init = rng.normal(size=(5, 8))
    ts = resample_timesteps(1000, 50)
    out = ddpm_sample(eps_fn, x_init, sched, ts, np.random.default_rng(2),
                      temperature=0.0, x0_clip=None)
    assert np.allclose(out, x0, atol=1e-8)


def test_ddpm_temperature_zero_is_deterministic():
    sched = build_cosine_schedule()
    eps_fn = lambda x, t: x * 0.1
    x_init = np.ones((2, 4))
    ts = resample_timesteps(1000, 20)
    a = ddpm_sample(eps_fn, x_init.copy(), sched, ts, np.random.default_rng(0), 0.0)
    b = ddpm_sample(eps_fn, x_init.copy(), sched, ts, np.random.default_rng(99), 0.0)
    assert np.array_equal(a, b)


def test_budget_to_switch_paper_rows():
    assert budget_to_switch(128, 64, 9) == 8
    assert budget_to_switch(128, 64, 17) == 4
    assert budget_to_switch(64, 64, 1) == 0
    for budget, steps, k in [(128, 64, 9), (128, 64, 17)]:
        t = budget_to_switch(budget, steps, k)
        assert k * t + (steps - t) == budget


def test_budget_to_switch_infeasible_suggests():
    with pytest.raises(InfeasibleBudget) as ei:
        budget_to_switch(127, 64, 9)
    k, t = ei.value.suggestion
    assert k == 9 and 1 <= t < 64
    with pytest.raises(InfeasibleBudget):
        budget_to_switch(100, 64, 1)
    with pytest.raises(InfeasibleBudget):
        budget_to_switch(64, 64, 5)   # would need t_switch = 0


def test_decode_reveals_everything_and_reproduces(decoder_parts):
    dec = make_decoder(decoder_parts)
    cap = sd.caption_of(sd.spec_from_index(3))
    img1, ledger, info = dec.decode(cap)
    img2, _, _ = make_decoder(decoder_parts).decode(cap)
    assert img1.shape == (16, 16, 3)
    assert np.all(np.isfinite(img1))
    assert np.array_equal(img1, img2)
    assert info["final_alignment"] is not None


def test_ledger_matches_plan(decoder_parts):
    for kw in [dict(), dict(cfg_weight=0.0), dict(k=3, t_switch=2)]:
        dec = make_decoder(decoder_parts, **kw)
        cap = sd.caption_of(sd.spec_from_index(9))
        _, ledger, _ = dec.sad_decode(cap)
        assert ledger.as_dict() == nfe_plan(dec.config)


def test_cfg_identities_bit_exact(decoder_parts):
    cap = sd.caption_of(sd.spec_from_index(11))
    img_w0, _, _ = make_decoder(decoder_parts, cfg_weight=0.0).decode(cap)
    img_unc, _, _ = make_decoder(decoder_parts, cfg_weight=1.5).decode(
        cap, force_branch="uncond")
    assert np.array_equal(img_w0, img_unc)

    img_w1, _, _ = make_decoder(decoder_parts, cfg_weight=1.0).decode(cap)
    img_cond, _, _ = make_decoder(decoder_parts, cfg_weight=1.5).decode(
        cap, force_branch="cond")
    assert np.array_equal(img_w1, img_cond)


def test_sad_survivor_is_brute_force_argmax(decoder_parts):
    cap = sd.caption_of(sd.spec_from_index(20))
    for k in (2, 5, 9, 17):
        rng = np.random.default_rng(k)
        scores = rng.normal(size=k)
        calls = []

        def scorer(latents, revealed, caption):
            calls.append(latents.copy())
            return scores[len(calls) - 1]

        # steps must stay >= t_switch+1 and <= n_tokens
        dec = make_decoder(decoder_parts, steps=8, k=k, t_switch=3)
        _, _, info = dec.sad_decode(cap, score_fn=scorer)
        assert len(calls) == k
        assert info["selected"] == int(np.argmax(scores))


def test_sad_tie_takes_lowest_index(decoder_parts):
    cap = sd.caption_of(sd.spec_from_index(21))
    dec = make_decoder(decoder_parts, steps=8, k=3, t_switch=2)
    _, _, info = dec.sad_decode(cap, score_fn=lambda *a: 0.5)
    assert info["selected"] == 0


def test_sad_k1_equals_plain_decode(decoder_parts):
    cap = sd.caption_of(sd.spec_from_index(22))
    a, la, _ = make_decoder(decoder_parts, k=1).sad_decode(cap)
    b, lb, _ = make_decoder(decoder_parts, k=1).decode(cap)
    assert np.array_equal(a, b)
    assert la.as_dict() == lb.as_dict()


def test_decode_config_validation():
    with pytest.raises(ValueError):
        DecodeConfig(cfg_weight=-1.0)
    with pytest.raises(ValueError):
        DecodeConfig(k=3, t_switch=0)
    with pytest.raises(ValueError):
        DecodeConfig(k=3, t_switch=64, steps=64)
    with pytest.raises(ValueError):
        DecodeConfig(cfg_schedule="cosine")


def test_write_ppm(tmp_path):
    img = np.zeros((4, 4, 3))
    img[0, 0] = [1.0, -1.0, 0.0]
    path = tmp_path / "x.ppm"
    write_ppm(path, img)
    data = path.read_bytes()
    assert data.startswith(b"P6\n4 4\n255\n")
    pix = np.frombuffer(data.split(b"255\n", 1)[1], dtype=np.uint8).reshape(4, 4, 3)
    assert tuple(pix[0, 0]) == (255, 0, 127)
