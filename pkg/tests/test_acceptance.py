"""Acceptance suite: one test per criterion, each reported as a PASS/FAIL line.

The report lines are printed by the ``pytest_terminal_summary`` hook in
``conftest.py``.  Criteria 8 and 9 share one desk-scale run: training the
``configs/tiny.ini`` preset on the synthetic set, then sampling evenly spaced
held-out windows.
"""

from __future__ import annotations

import math
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
from oracles import (
    ade_brute,
    apd_brute,
    apde_brute,
    cmd_brute,
    fde_brute,
    mmade_brute,
    mmfde_brute,
    random_tree,
)
from test_autodiff import PRIMITIVES, primitive_problem
from test_denoiser import gradient_problem
from test_metrics import instance
from test_skeleton import check_plan
from test_ssm import make, scan, unroll
from test_training import BIMODAL_MIN_DISAGREEMENT, bimodal_disagreement
from threadpoolctl import threadpool_limits

from motiondiff import autodiff as ad
from motiondiff.cli import select_items
from motiondiff.config import load_config
from motiondiff.data import generate_synthetic, window_array
from motiondiff.denoiser import Denoiser, DenoiserConfig
from motiondiff.diffusion import (
    SamplerConfig,
    cosine_schedule,
    ddim_step,
    ddim_timesteps,
    q_sample,
    sample_many,
)
from motiondiff.metrics import ade, apd, apde, cmd, fde, mmade, mmfde
from motiondiff.skeleton import (
    build_skeleton,
    canonical_skeleton,
    contract_features,
    expand_features,
    make_scan_plan,
)
from motiondiff.spectral import (
    dct_basis,
    decode_coeffs,
    encode_coeffs,
    residual_decode,
    residual_encode,
)
from motiondiff.ssm import discretize
from motiondiff.training import coefficient_envelope, decile_ratio, train

TINY = Path(__file__).resolve().parents[1] / "configs" / "tiny.ini"

# Largest mean per-joint history error (m) left by keeping 20 of 125 coefficients,
# over every window of the tiny preset's synthetic set.  Recorded once; see
# test_criterion_9.
TRUNCATION_BOUND = 0.0074565475251407816

# Reference values of the tiny-preset run (seed 0, 1 thread, 298 s of training).
# Criterion 8 only needs ratio < 0.5 and ADE below the baseline; these pin the
# run itself.  ADE was recorded to 4 decimals.
PINNED_DECILE_RATIO = 0.41085910292412164
PINNED_ADE = 0.5962
PINNED_ZERO_VELOCITY_ADE = 0.7499421800484894
TRAIN_BUDGET_S = 20 * 60


def _timed(fn):
    start = time.perf_counter()
    fn()
    return time.perf_counter() - start


def test_criterion_1_residual_dct_identities():
    def run():
        T, V = 125, 17
        basis = dct_basis(T)
        rng = np.random.default_rng(1)
        for _ in range(100):
            X = rng.normal(size=(T, V, 3))
            x_ref = X[int(rng.integers(0, T))]
            res = residual_encode(X, x_ref, basis, T).coeffs
            org = residual_encode(X, np.zeros((V, 3)), basis, T).coeffs
            assert np.max(np.abs(res[1:] - org[1:])) < 1e-10
            assert np.max(np.abs(res[0] - (org[0] - math.sqrt(T) * x_ref))) < 1e-10
            assert np.max(np.abs(residual_decode(residual_encode(X, x_ref, basis, T), basis) - X)) < 1e-10

    assert _timed(run) < 5.0


def test_criterion_2_scan_plan_properties():
    def run():
        rng = np.random.default_rng(2)
        cases = [(canonical_skeleton(), rng)]
        for _ in range(200):
            V = int(rng.integers(1, 65))
            edges, root = random_tree(rng, V)
            cases.append((build_skeleton(edges, root=root, V=V), rng))
        for sk, r in cases:
            plan = make_scan_plan(sk)
            check_plan(sk, plan)
            f = r.normal(size=(sk.V, 3))
            assert np.array_equal(contract_features(expand_features(f, plan), plan), f)

    assert _timed(run) < 5.0


def test_criterion_3_ssm_oracle():
    for seed in range(50):
        rng = np.random.default_rng(seed)
        L, S, d = int(rng.integers(1, 9)), int(rng.integers(1, 6)), int(rng.integers(1, 5))
        params, ssm = make(S, d, seed)
        x = rng.normal(size=(L, d))
        assert np.max(np.abs(scan(params, ssm, x) - unroll(params, ssm, x))) < 1e-10

    params, ssm = make(S=8, d=5)
    for row in np.random.default_rng(0).normal(size=(10_000, 5)):
        _, A, _ = discretize(params, ssm, row)
        assert np.all((A > 0) & (A < 1))

    params, ssm = make(S=4, d=3, seed=2)
    rng = np.random.default_rng(3)
    x = rng.normal(size=(8, 3))
    base = scan(params, ssm, x)
    for p in range(8):
        bumped = x.copy()
        bumped[p] += rng.normal(size=3)
        diff = np.abs(scan(params, ssm, bumped) - base).max(axis=1)
        assert np.all(diff[:p] == 0.0) and np.all(diff[p:] > 0.0)


def test_criterion_4_gradient_checks():
    def run():
        for name in PRIMITIVES:
            for seed in range(20):
                params, loss = primitive_problem(name, seed)
                assert ad.finite_difference_check(loss, params) < 1e-5, name
        model, loss = gradient_problem(0)
        cfg = model.cfg
        assert (cfg.V, cfg.N, cfg.hidden, cfg.heads) == (4, 3, 8, 2)
        assert ad.finite_difference_check(loss, model.params, eps=1e-5) < 1e-5

    assert _timed(run) < 60.0


def test_criterion_5_diffusion():
    sched = cosine_schedule()
    ab = sched.alpha_bar
    assert np.all(np.diff(ab) < 0) and ab[0] > 0.99 and ab[-1] < 0.01

    n = 100_000
    x0 = np.array([0.7, -1.3])
    for t in (100, 500, 900):
        xt = q_sample(np.broadcast_to(x0, (n, 2)), t, np.random.default_rng(t).standard_normal((n, 2)), sched)
        a = ab[t - 1]
        assert np.all(np.abs(xt.mean(0) - math.sqrt(a) * x0) < 3 * math.sqrt((1 - a) / n))
        assert np.all(np.abs(xt.var(0, ddof=1) - (1 - a)) < 3 * (1 - a) * math.sqrt(2 / (n - 1)))

    # one DDIM jump driven by the true noise lands on the forward-process point
    rng = np.random.default_rng(5)
    x0, eps = rng.normal(size=(2, 20, 17, 3))
    ts = ddim_timesteps(sched.steps, 100)
    for t, t_prev in zip(ts, np.append(ts[1:], 0)):
        t, t_prev = int(t), int(t_prev)
        target = x0 if t_prev == 0 else q_sample(x0, t_prev, eps, sched)
        assert np.max(np.abs(ddim_step(q_sample(x0, t, eps, sched), t, t_prev, eps, sched) - target)) < 1e-12

    cfg = DenoiserConfig(num_blocks=2, hidden=8, heads=2, attention_heads=2, ssm_state=4, N=6, V=3)
    model = Denoiser.init(cfg, make_scan_plan(build_skeleton([(0, 1), (1, 2)], root=0, V=3)), 4)
    history = rng.normal(size=(2, 4, 3, 3))
    basis = dct_basis(12)
    runs = [sample_many(model, history, SamplerConfig(ddim_steps=10, seed=9), 3, sched, basis) for _ in range(2)]
    assert runs[0].tobytes() == runs[1].tobytes()


def test_criterion_6_k_diversity_routing():
    from test_training import (
        test_loss_is_min_of_head_losses_batched,
        test_unselected_heads_get_bitwise_zero_gradient,
    )

    test_unselected_heads_get_bitwise_zero_gradient()
    for seed in range(10):
        test_loss_is_min_of_head_losses_batched(seed)
    assert bimodal_disagreement().min() > BIMODAL_MIN_DISAGREEMENT


def test_criterion_7_metrics_oracle():
    for seed in range(100):
        s, gt, mm = instance(seed)
        ref = np.stack(mm)
        pairs = [
            (apd(s), apd_brute(s)),
            (ade(s, gt), ade_brute(s, gt)),
            (fde(s, gt), fde_brute(s, gt)),
            (mmade(s, mm), mmade_brute(s, mm)),
            (mmfde(s, mm), mmfde_brute(s, mm)),
            (apde(s, mm), apde_brute(s, mm)),
            (cmd(s, ref), cmd_brute(s, ref)),
        ]
        assert all(abs(a - b) < 1e-12 for a, b in pairs)

        c = float(np.random.default_rng(seed).uniform(0.01, 100.0))
        for f, args in ((apd, (s,)), (ade, (s, gt)), (fde, (s, gt)), (mmade, (s, mm)), (mmfde, (s, mm))):
            scaled = [a * c if isinstance(a, np.ndarray) else [m * c for m in a] for a in args]
            assert f(*scaled) == pytest.approx(c * f(*args), rel=1e-12)

        extra = np.concatenate([s, np.random.default_rng(seed + 1).normal(size=(1,) + s.shape[1:])])
        assert ade(extra, gt) <= ade(s, gt) and fde(extra, gt) <= fde(s, gt)
        assert mmade(extra, mm) <= mmade(s, mm) and mmfde(extra, mm) <= mmfde(s, mm)


# --- desk-scale run -------------------------------------------------------------


def truncation_errors(windows: np.ndarray, H: int, N: int) -> np.ndarray:
    """Mean per-joint history error of each window after keeping ``N`` coefficients."""
    basis = dct_basis(windows.shape[1])
    out = np.empty(len(windows))
    for i, w in enumerate(windows):
        rec = decode_coeffs(encode_coeffs(w, w[H - 1], basis, N), w[H - 1], basis)
        out[i] = np.linalg.norm(rec[:H] - w[:H], axis=-1).mean()
    return out


@pytest.fixture(scope="module")
def desk_run():
    cfg = load_config(TINY)
    ds = generate_synthetic(cfg.synthetic, cfg.skeleton).with_split(cfg.test_fraction)
    train_w = window_array(ds, cfg.H, cfg.F, cfg.stride, "train")
    test_w = window_array(ds, cfg.H, cfg.F, cfg.stride, "test")
    basis = dct_basis(cfg.T)
    sched = cosine_schedule(cfg.steps, cfg.cosine_s)
    model = Denoiser.init(cfg.model, make_scan_plan(cfg.skeleton), cfg.seed)
    with threadpool_limits(1):
        start = time.monotonic()
        log = train(model, train_w, cfg.H, basis, sched, cfg.train)
        train_s = time.monotonic() - start
        bound = np.maximum(coefficient_envelope(train_w, cfg.H, basis, cfg.model.N), 1e-12)
        sampler = replace(cfg.sampler, x0_bound=bound)
        idx = select_items(len(test_w), cfg.max_items)
        samples = sample_many(model, test_w[idx, : cfg.H], sampler, cfg.k_eval, sched, basis)
    items = test_w[idx]
    return {
        "cfg": cfg,
        "windows": np.concatenate([train_w, test_w]),
        "items": items,
        "samples": samples,
        "losses": log.losses,
        "train_s": train_s,
    }


def desk_summary(run) -> dict[str, float]:
    cfg, items, samples = run["cfg"], run["items"], run["samples"]
    best = [ade(s[:, cfg.H :], w[cfg.H :]) for s, w in zip(samples, items)]
    zero = [ade(np.repeat(w[cfg.H - 1 : cfg.H], cfg.F, axis=0)[None], w[cfg.H :]) for w in items]
    return {
        "decile_ratio": float(decile_ratio(run["losses"])),
        "ade": float(np.mean(best)),
        "zero_velocity_ade": float(np.mean(zero)),
        "apd": float(np.mean([apd(s[:, cfg.H :]) for s in samples])),
    }


@pytest.mark.slow
def test_criterion_8_desk_scale_end_to_end(desk_run):
    assert len(desk_run["windows"]) >= 2000
    assert desk_run["items"].shape[1:] == (125, 17, 3) and desk_run["samples"].shape[1] == 50
    assert desk_run["train_s"] <= TRAIN_BUDGET_S
    s = desk_summary(desk_run)
    print(" ".join(f"{k}={v!r}" for k, v in s.items()), f"train_s={desk_run['train_s']:.0f}")
    assert s["decile_ratio"] < 0.5
    assert s["ade"] < s["zero_velocity_ade"]


@pytest.mark.slow
def test_desk_run_matches_pinned_values(desk_run):
    s = desk_summary(desk_run)
    assert s["decile_ratio"] == pytest.approx(PINNED_DECILE_RATIO, rel=1e-6)
    assert s["ade"] == pytest.approx(PINNED_ADE, abs=5e-5)
    assert s["zero_velocity_ade"] == pytest.approx(PINNED_ZERO_VELOCITY_ADE, rel=1e-9)


@pytest.mark.slow
def test_criterion_9_inpainting_contract(desk_run):
    cfg = desk_run["cfg"]
    recorded = truncation_errors(desk_run["windows"], cfg.H, cfg.model.N).max()
    assert recorded == pytest.approx(TRUNCATION_BOUND, rel=1e-9)
    hist = desk_run["samples"][:, :, : cfg.H]
    err = np.linalg.norm(hist - desk_run["items"][:, None, : cfg.H], axis=-1).mean(axis=(2, 3))
    print(f"worst sample history error {err.max():.5f} m, bound {TRUNCATION_BOUND:.5f} m")
    assert err.max() <= TRUNCATION_BOUND
