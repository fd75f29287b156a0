"""Noise schedule, forward noising, DDPM/DDIM reverse steps and inpainting sampling.

Steps are 1-based (``1 <= t <= steps``); ``alpha_bar`` at step 0 is taken to
be exactly 1 so the last DDIM jump lands on a noise-free state.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .denoiser import Denoiser, predict_noise
from .errors import InvalidSize, ShapeMismatch, StepOutOfRange
from .spectral import DctBasis, pad_history

BETA_MAX = 0.999


@dataclass(frozen=True)
class NoiseSchedule:
    steps: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def check(self, t: int, allow_zero: bool = False) -> None:
        lo = 0 if allow_zero else 1
        if not lo <= t <= self.steps:
            raise StepOutOfRange(f"step {t} outside [{lo}, {self.steps}]")

    def abar(self, t) -> np.ndarray:
        """``alpha_bar`` at (possibly array-valued) step ``t`` with ``abar(0) = 1``."""
        t = np.asarray(t)
        padded = np.concatenate([[1.0], self.alpha_bar])
        return padded[t]


@dataclass(frozen=True)
class SamplerConfig:
    kind: str = "ddim"
    ddim_steps: int = 100
    sigma_rule: str = "zero"
    guidance_scale: float = 1.0
    seed: int = 0
    # elementwise bound on the predicted clean state, e.g. the largest training magnitudes
    x0_bound: np.ndarray | float | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.kind not in ("ddim", "ddpm"):
            raise ValueError(f"unknown sampler kind {self.kind!r}")
        if (self.kind, self.sigma_rule) not in (("ddim", "zero"), ("ddpm", "fixed-beta")):
            raise ValueError(f"sigma rule {self.sigma_rule!r} is not supported for {self.kind}")
        if self.ddim_steps < 1:
            raise ValueError("ddim_steps must be positive")
        if self.guidance_scale < 0:
            raise ValueError("guidance_scale must be non-negative")
        if self.x0_bound is not None and not np.all(np.asarray(self.x0_bound) > 0):
            raise ValueError("x0_bound must be positive")


def cosine_schedule(steps: int = 1000, s: float = 0.008) -> NoiseSchedule:
    """Cosine schedule: ``f(u) = cos^2(((u/T + s) / (1 + s)) pi/2)``, ``abar_t = f(t)/f(0)``."""
    if steps < 1:
        raise InvalidSize(f"schedule needs at least one step, got {steps}")
    u = np.arange(steps + 1, dtype=np.float64)
    f = np.cos(((u / steps + s) / (1.0 + s)) * np.pi / 2.0) ** 2
    ratio = f / f[0]
    beta = np.clip(1.0 - ratio[1:] / ratio[:-1], 0.0, BETA_MAX)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    for arr in (beta, alpha, alpha_bar):
        arr.setflags(write=False)
    return NoiseSchedule(steps, beta, alpha, alpha_bar)


def q_sample(x0, t, eps, sched: NoiseSchedule) -> np.ndarray:
    """``x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps``; ``t`` may be per-item (leading axis)."""
    x0 = np.asarray(x0, dtype=np.float64)
    t_arr = np.asarray(t)
    if np.any(t_arr < 1) or np.any(t_arr > sched.steps):
        raise StepOutOfRange(f"step(s) {t} outside [1, {sched.steps}]")
    ab = sched.abar(t_arr)
    if ab.ndim:
        ab = ab.reshape(ab.shape + (1,) * (x0.ndim - ab.ndim))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def ddpm_step(x_t, t: int, eps_hat, sched: NoiseSchedule, rng: np.random.Generator) -> np.ndarray:
    sched.check(t)
    beta = sched.beta[t - 1]
    mean = (x_t - (beta / np.sqrt(1.0 - sched.alpha_bar[t - 1])) * eps_hat) / np.sqrt(1.0 - beta)
    if t == 1:
        return mean
    return mean + np.sqrt(beta) * rng.standard_normal(np.shape(x_t))


def predict_x0(x_t, t: int, eps_hat, sched: NoiseSchedule) -> np.ndarray:
    ab = sched.abar(t)
    return (x_t - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)


def clamp_noise(x_t, t: int, eps_hat, sched: NoiseSchedule, bound) -> np.ndarray:
    """Noise estimate re-derived from the predicted clean state clipped to ``[-bound, bound]``.

    Near ``t = steps`` the clean-state estimate divides by a tiny
    ``sqrt(abar_t)``, so small noise errors turn into huge states; clipping
    keeps every sampler step inside the data range.  Estimates already within
    the bound pass through unchanged up to rounding.
    """
    ab = sched.abar(t)
    x0 = np.clip(predict_x0(x_t, t, eps_hat, sched), -bound, bound)
    return (x_t - np.sqrt(ab) * x0) / np.sqrt(1.0 - ab)


def ddim_step(x_t, t: int, t_prev: int, eps_hat, sched: NoiseSchedule) -> np.ndarray:
    """Deterministic (eta = 0) jump from step ``t`` to ``t_prev``."""
    sched.check(t)
    sched.check(t_prev, allow_zero=True)
    if t_prev > t:
        raise StepOutOfRange(f"t_prev={t_prev} must not exceed t={t}")
    if t_prev == t:
        return np.array(x_t, dtype=np.float64, copy=True)
    x0 = predict_x0(x_t, t, eps_hat, sched)
    ab_prev = sched.abar(t_prev)
    return np.sqrt(ab_prev) * x0 + np.sqrt(1.0 - ab_prev) * eps_hat


def ddim_timesteps(steps: int, n: int) -> np.ndarray:
    """``n`` distinct, uniformly spaced steps from ``steps`` down to 1."""
    if not 1 <= n <= steps:
        raise InvalidSize(f"cannot pick {n} of {steps} steps")
    if n == 1:
        return np.array([steps])
    ts = np.unique(np.round(np.linspace(1, steps, n)).astype(np.int64))[::-1]
    if ts.size != n:
        raise InvalidSize(f"{n} uniform steps of {steps} collide after rounding")
    return ts


def inpaint_combine(
    x_sampled,
    history,
    t: int,
    sched: NoiseSchedule,
    basis: DctBasis,
    rng: np.random.Generator,
    known=None,
) -> np.ndarray:
    """Mask-completion: overwrite the first H decoded frames with the noised observation.

    ``x_sampled`` holds truncated residual coefficients ``(N, V, 3)`` or a batch
    ``(B, N, V, 3)`` sharing one history.  ``known`` optionally passes the
    precomputed noise-free coefficients of the padded history.  ``t = 0``
    combines with the clean observation.
    """
    x = np.asarray(x_sampled, dtype=np.float64)
    history = np.asarray(history, dtype=np.float64)
    H = history.shape[0]
    if H == 0:
        return x.copy()
    single = x.ndim == 3
    if single:
        x = x[None]
    N = x.shape[1]
    if history.shape[1:] != x.shape[2:]:
        raise ShapeMismatch(f"history frames {history.shape[1:]} vs coefficients {x.shape[2:]}")
    x_ref = history[-1]
    if known is None:
        padded = pad_history(history, basis.T - H)
        known = np.tensordot(basis.W[:N], padded - x_ref[None], axes=(1, 0))
    sched.check(t, allow_zero=True)
    noise = rng.standard_normal(x.shape) if t > 0 else None
    known = np.broadcast_to(known, x.shape)
    out = _combine(x, known, H, sched.abar(t), noise, basis)
    return out[0] if single else out


def _combine(x, known, H: int, ab: float, noise, basis: DctBasis) -> np.ndarray:
    """Batched mask combination; ``known`` and ``noise`` are per-item coefficient arrays."""
    N = x.shape[1]
    noisy_known = known if noise is None else np.sqrt(ab) * known + np.sqrt(1.0 - ab) * noise
    inv = basis.W_inv[:, :N]
    frames = np.einsum("tn,bnvc->btvc", inv, x)
    frames[:, :H] = np.einsum("tn,bnvc->btvc", inv[:H], noisy_known)
    return np.einsum("nt,btvc->bnvc", basis.W[:N], frames)


def sample(
    model: Denoiser,
    history,
    cfg: SamplerConfig,
    num_samples: int,
    sched: NoiseSchedule,
    basis: DctBasis,
    stream: int = 0,
) -> np.ndarray:
    """``num_samples`` full motions ``(T, V, 3)`` continuing one observed history."""
    return sample_many(model, np.asarray(history)[None], cfg, num_samples, sched, basis, first_stream=stream)[0]


def sample_many(
    model: Denoiser,
    histories,
    cfg: SamplerConfig,
    num_samples: int,
    sched: NoiseSchedule,
    basis: DctBasis,
    chunk: int = 512,
    first_stream: int = 0,
) -> np.ndarray:
    """Samples for several histories at once: ``(M, num_samples, T, V, 3)``.

    Every (history, sample) pair owns an RNG stream seeded by
    ``(seed, history index + first_stream, sample index)``, so results do not
    depend on how work is chunked.
    """
    histories = np.asarray(histories, dtype=np.float64)
    M, H, V, _ = histories.shape
    N, T = model.cfg.N, basis.T
    F = T - H
    if F < 0 or V != model.cfg.V:
        raise ShapeMismatch(f"histories {histories.shape} incompatible with T={T}, V={model.cfg.V}")
    x_refs = histories[:, -1]
    padded = np.concatenate([histories, np.repeat(histories[:, -1:], F, axis=1)], axis=1)
    known = np.einsum("nt,mtvc->mnvc", basis.W[:N], padded - x_refs[:, None])
    pairs = [(m, s) for m in range(M) for s in range(num_samples)]
    out = np.empty((M, num_samples, T, V, 3))
    for lo in range(0, len(pairs), chunk):
        part = pairs[lo : lo + chunk]
        idx_m = np.array([m for m, _ in part])
        rngs = [np.random.default_rng([cfg.seed, m + first_stream, s]) for m, s in part]
        coeffs = _denoise(model, known[idx_m], histories[idx_m], cfg, sched, basis, rngs)
        frames = np.einsum("tn,bnvc->btvc", basis.W_inv[:, :N], coeffs) + x_refs[idx_m][:, None]
        for j, (m, s) in enumerate(part):
            out[m, s] = frames[j]
    return out


def _denoise(model, cond, histories, cfg, sched, basis, rngs) -> np.ndarray:
    B = len(rngs)
    N, V = model.cfg.N, model.cfg.V
    H = histories.shape[1]
    x = np.stack([r.standard_normal((N, V, 3)) for r in rngs])
    null = np.zeros_like(cond)
    if cfg.kind == "ddim":
        ts = ddim_timesteps(sched.steps, cfg.ddim_steps)
        prevs = np.append(ts[1:], 0)
    else:
        ts = np.arange(sched.steps, 0, -1)
        prevs = ts - 1
    for t, t_prev in zip(ts, prevs):
        t, t_prev = int(t), int(t_prev)
        eps = _guided_eps(model, x, cond, null, t, cfg.guidance_scale)
        if cfg.x0_bound is not None:
            eps = clamp_noise(x, t, eps, sched, cfg.x0_bound)
        if cfg.kind == "ddim":
            x = ddim_step(x, t, t_prev, eps, sched)
        else:
            x = np.stack([ddpm_step(x[j], t, eps[j], sched, rngs[j]) for j in range(B)])
        noise = np.stack([r.standard_normal((N, V, 3)) for r in rngs]) if t_prev > 0 else None
        x = _combine(x, cond, H, sched.abar(t_prev), noise, basis)
    return x


def _guided_eps(model, x, cond, null, t, scale) -> np.ndarray:
    """Head-averaged noise estimate, blended with the unconditional one when ``scale != 1``."""
    heads = predict_noise(model, x, cond, np.full(len(x), t))
    eps = np.mean([h.data for h in heads], axis=0)
    if scale == 1.0:
        return eps
    heads0 = predict_noise(model, x, null, np.full(len(x), t))
    eps0 = np.mean([h.data for h in heads0], axis=0)
    return eps0 + scale * (eps - eps0)
