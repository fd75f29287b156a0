import math

import numpy as np
import pytest
from oracles import cosine_alpha_bar

from motiondiff.denoiser import Denoiser, DenoiserConfig
from motiondiff.diffusion import (
    NoiseSchedule,
    SamplerConfig,
    clamp_noise,
    cosine_schedule,
    ddim_step,
    ddim_timesteps,
    ddpm_step,
    inpaint_combine,
    predict_x0,
    q_sample,
    sample,
    sample_many,
)
from motiondiff.errors import InvalidSize, StepOutOfRange
from motiondiff.skeleton import build_skeleton, make_scan_plan
from motiondiff.spectral import dct_basis, decode_coeffs, encode_coeffs, pad_history

SCHED = cosine_schedule()


def scalar_schedule(beta: float, abar: float) -> NoiseSchedule:
    return NoiseSchedule(1, np.array([beta]), np.array([1 - beta]), np.array([abar]))


def test_schedule_properties():
    ab = SCHED.alpha_bar
    assert np.all(np.diff(ab) < 0)
    assert ab[0] > 0.99 and ab[-1] < 0.01
    assert np.all((SCHED.beta > 0) & (SCHED.beta <= 0.999))
    assert np.allclose(SCHED.alpha, 1 - SCHED.beta)
    assert np.allclose(ab, cosine_alpha_bar(1000), rtol=1e-12, atol=0)
    assert SCHED.abar(0) == 1.0
    with pytest.raises(InvalidSize):
        cosine_schedule(0)


def test_schedule_offset_raises_first_beta():
    assert cosine_schedule(1000, 0.05).beta[0] > cosine_schedule(1000, 0.008).beta[0] > 0


def test_q_sample_limits_and_errors():
    rng = np.random.default_rng(0)
    x0, eps = rng.normal(size=(2, 5, 3))
    assert np.array_equal(q_sample(x0, 1, eps, scalar_schedule(0.0, 1.0)), x0)
    t = 250
    assert np.allclose(q_sample(np.zeros(5), t, eps[:, 0], SCHED), np.sqrt(1 - SCHED.alpha_bar[t - 1]) * eps[:, 0])
    for bad in (0, 1001):
        with pytest.raises(StepOutOfRange):
            q_sample(x0, bad, eps, SCHED)


def test_q_sample_per_item_steps():
    rng = np.random.default_rng(1)
    x0, eps = rng.normal(size=(2, 3, 4, 2, 3))
    t = np.array([1, 400, 1000])
    out = q_sample(x0, t, eps, SCHED)
    for i in range(3):
        assert np.array_equal(out[i], q_sample(x0[i], int(t[i]), eps[i], SCHED))


@pytest.mark.parametrize("t", [100, 500, 900])
def test_q_sample_marginals(t):
    n = 100_000
    rng = np.random.default_rng(t)
    x0 = np.array([0.7, -1.3])
    xt = q_sample(np.broadcast_to(x0, (n, 2)), t, rng.standard_normal((n, 2)), SCHED)
    ab = SCHED.alpha_bar[t - 1]
    se_mean = math.sqrt((1 - ab) / n)
    assert np.all(np.abs(xt.mean(0) - math.sqrt(ab) * x0) < 3 * se_mean)
    se_var = (1 - ab) * math.sqrt(2 / (n - 1))
    assert np.all(np.abs(xt.var(0, ddof=1) - (1 - ab)) < 3 * se_var)


def test_ddpm_examples():
    rng = np.random.default_rng(0)
    sched = scalar_schedule(0.1, 0.5)
    mu = (1 / math.sqrt(0.9)) * (1 - (0.1 / math.sqrt(0.5)) * 0.2)
    assert ddpm_step(np.array(1.0), 1, np.array(0.2), sched, rng) == pytest.approx(mu, abs=1e-15)
    tiny = scalar_schedule(1e-300, 0.5)
    assert ddpm_step(np.array(2.0), 1, np.array(0.0), tiny, rng) == 2.0
    x = np.ones(4)
    noisy = ddpm_step(x, 2, np.zeros(4), SCHED, np.random.default_rng(1))
    mean = x / np.sqrt(1 - SCHED.beta[1])
    assert not np.allclose(noisy, mean)
    with pytest.raises(StepOutOfRange):
        ddpm_step(x, 0, x, SCHED, rng)


def test_ddim_oracle_inversion_and_determinism():
    rng = np.random.default_rng(2)
    x0, eps = rng.normal(size=(2, 20, 17, 3))
    for t in (1, 37, 500, 999):
        xt = q_sample(x0, t, eps, SCHED)
        assert np.max(np.abs(predict_x0(xt, t, eps, SCHED) - x0)) < 1e-12 * max(1.0, 1 / math.sqrt(SCHED.alpha_bar[t - 1])) * 10
        t_prev = max(t - 20, 0)
        target = x0 if t_prev == 0 else q_sample(x0, t_prev, eps, SCHED)
        assert np.max(np.abs(ddim_step(xt, t, t_prev, eps, SCHED) - target)) < 1e-10
        a = ddim_step(xt, t, t_prev, eps, SCHED)
        b = ddim_step(xt, t, t_prev, eps, SCHED)
        assert a.tobytes() == b.tobytes()
    xt = rng.normal(size=5)
    assert np.array_equal(ddim_step(xt, 10, 10, rng.normal(size=5), SCHED), xt)
    with pytest.raises(StepOutOfRange):
        ddim_step(xt, 10, 11, xt, SCHED)


def test_ddim_timesteps():
    ts = ddim_timesteps(1000, 100)
    assert len(ts) == 100 and ts[0] == 1000 and ts[-1] == 1
    assert np.all(np.diff(ts) < 0)
    assert ddim_timesteps(1000, 1).tolist() == [1000]
    with pytest.raises(InvalidSize):
        ddim_timesteps(10, 11)


def test_inpaint_identity_without_history():
    x = np.random.default_rng(0).normal(size=(4, 2, 3))
    out = inpaint_combine(x, np.zeros((0, 2, 3)), 10, SCHED, dct_basis(8), np.random.default_rng(0))
    assert np.array_equal(out, x)


def test_inpaint_exact_history_at_t0():
    rng = np.random.default_rng(1)
    T, H = 10, 4
    basis = dct_basis(T)
    history = rng.normal(size=(H, 2, 3))
    x = rng.normal(size=(T, 2, 3))
    out = inpaint_combine(x, history, 0, SCHED, basis, rng)
    frames = decode_coeffs(out, history[-1], basis)
    assert np.max(np.abs(frames[:H] - history)) < 1e-12
    # the future part is untouched when N = T
    before = decode_coeffs(x, history[-1], basis)
    assert np.max(np.abs(frames[H:] - before[H:])) < 1e-12


def test_inpaint_future_frames_do_not_depend_on_history():
    rng = np.random.default_rng(2)
    T, H = 12, 5
    basis = dct_basis(T)
    x = rng.normal(size=(T, 3, 3))
    h1, h2 = rng.normal(size=(2, H, 3, 3))
    h2[-1] = h1[-1]  # same reference pose
    o1 = inpaint_combine(x, h1, 50, SCHED, basis, np.random.default_rng(7))
    o2 = inpaint_combine(x, h2, 50, SCHED, basis, np.random.default_rng(7))
    f1 = decode_coeffs(o1, h1[-1], basis)
    f2 = decode_coeffs(o2, h2[-1], basis)
    assert np.max(np.abs(f1[H:] - f2[H:])) < 1e-12
    assert np.max(np.abs(f1[:H] - f2[:H])) > 0


def test_inpaint_noises_known_part_to_step():
    T, H = 6, 3
    basis = dct_basis(T)
    history = np.random.default_rng(3).normal(size=(H, 1, 3))
    known = encode_coeffs(pad_history(history, T - H), history[-1], basis, T)
    x = np.zeros((T, 1, 3))
    t = 300
    out = inpaint_combine(x, history, t, SCHED, basis, np.random.default_rng(9))
    noise = np.random.default_rng(9).standard_normal(x.shape)
    ab = SCHED.alpha_bar[t - 1]
    noisy_frames = decode_coeffs(np.sqrt(ab) * known + np.sqrt(1 - ab) * noise, np.zeros((1, 3)), basis)
    frames = decode_coeffs(out, np.zeros((1, 3)), basis)
    assert np.allclose(frames[:H], noisy_frames[:H], atol=1e-12)


def small_model():
    plan = make_scan_plan(build_skeleton([(0, 1), (1, 2)], root=0, V=3))
    cfg = DenoiserConfig(num_blocks=2, hidden=8, heads=2, attention_heads=2, ssm_state=4, N=6, V=3)
    return Denoiser.init(cfg, plan, 0)


def test_sampling_is_deterministic_and_chunk_independent():
    model = small_model()
    basis, sched = dct_basis(10), cosine_schedule(50)
    hist = np.random.default_rng(0).normal(size=(2, 4, 3, 3))
    cfg = SamplerConfig(ddim_steps=10, seed=3)
    a = sample_many(model, hist, cfg, 3, sched, basis)
    b = sample_many(model, hist, cfg, 3, sched, basis, chunk=2)
    assert a.shape == (2, 3, 10, 3, 3)
    assert a.tobytes() == b.tobytes()
    single = sample(model, hist[1], cfg, 3, sched, basis, stream=1)
    assert single.tobytes() == a[1].tobytes()
    other = sample_many(model, hist, SamplerConfig(ddim_steps=10, seed=4), 3, sched, basis)
    assert not np.array_equal(a, other)


def test_ddpm_and_guided_sampling_run():
    model = small_model()
    basis, sched = dct_basis(10), cosine_schedule(20)
    hist = np.random.default_rng(0).normal(size=(4, 3, 3))
    out = sample(model, hist, SamplerConfig(kind="ddpm", sigma_rule="fixed-beta"), 2, sched, basis)
    assert out.shape == (2, 10, 3, 3) and np.all(np.isfinite(out))
    g = sample(model, hist, SamplerConfig(ddim_steps=5, guidance_scale=2.0), 2, sched, basis)
    assert np.all(np.isfinite(g))


def test_sampler_config_validation():
    with pytest.raises(ValueError):
        SamplerConfig(kind="ddim", sigma_rule="fixed-beta")
    with pytest.raises(ValueError):
        SamplerConfig(guidance_scale=-1.0)
    with pytest.raises(ValueError):
        SamplerConfig(kind="euler")


def test_clamp_noise_passes_in_range_estimates():
    rng = np.random.default_rng(5)
    x0, eps = rng.normal(size=(2, 6, 2, 3))
    for t in (1, 500, 1000):
        xt = q_sample(x0, t, eps, SCHED)
        out = clamp_noise(xt, t, eps, SCHED, np.abs(x0) + 1.0)
        assert np.max(np.abs(out - eps)) < 1e-9


def test_clamp_noise_bounds_the_clean_estimate():
    rng = np.random.default_rng(6)
    xt, eps = rng.normal(size=(2, 6, 2, 3))
    bound = np.full((6, 2, 3), 0.3)
    out = clamp_noise(xt, 1000, eps, SCHED, bound)
    x0 = predict_x0(xt, 1000, out, SCHED)
    assert np.all(np.abs(x0) <= 0.3 + 1e-9)
    assert np.max(np.abs(x0)) == pytest.approx(0.3)
    with pytest.raises(ValueError):
        SamplerConfig(x0_bound=np.zeros(3))


def test_bounded_sampling_stays_in_range():
    model = small_model()
    basis, sched = dct_basis(10), cosine_schedule(50)
    hist = np.random.default_rng(0).normal(size=(4, 3, 3))
    out = sample(model, hist, SamplerConfig(ddim_steps=10, x0_bound=0.5), 2, sched, basis)
    assert np.all(np.isfinite(out))
