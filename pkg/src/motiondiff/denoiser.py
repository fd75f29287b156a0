"""K-headed noise-prediction network built from mam-Trans blocks.

Layout conventions: features are ``(batch, N, V, C)`` (frequency, joint,
channel).  Each block runs

1. a spatial selective scan along the skeleton tour (frequencies merged into
   the channel axis per joint),
2. self-attention across the N frequency tokens (joints merged per token and
   compressed to C),
3. a pointwise feedforward,

each with its own residual.  Long skips add the input of block ``i`` (first
half, 0-based) to the output of block ``num_blocks - 1 - i``, so the stack is
U-shaped.  The K output heads share the trunk.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .errors import ShapeMismatch
from .skeleton import ScanPlan
from .ssm import SsmParams, init_ssm, ssm_scan


@dataclass(frozen=True)
class DenoiserConfig:
    num_blocks: int = 4
    hidden: int = 384
    heads: int = 5
    attention_heads: int = 4
    ssm_state: int = 16
    N: int = 20
    V: int = 17
    ff_mult: int = 4

    def __post_init__(self):
        if self.num_blocks < 2 or self.num_blocks % 2:
            raise ValueError("num_blocks must be a positive even number")
        if self.hidden % self.attention_heads:
            raise ValueError("hidden size must be divisible by attention_heads")
        if self.hidden % 2:
            raise ValueError("hidden size must be even (sinusoidal step embedding)")
        for name in ("heads", "ssm_state", "N", "V", "ff_mult"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


HEAD_INIT_SCALE = 0.01
LN2 = float(np.log(2.0))


def _normal(rng, fan_in: int, shape) -> np.ndarray:
    return rng.normal(0.0, 1.0 / np.sqrt(fan_in), shape)


class Denoiser:
    """Parameters plus the fixed structure (config, scan plan) needed to run them."""

    def __init__(self, cfg: DenoiserConfig, plan: ScanPlan, params: ad.Parameters):
        if plan.V != cfg.V:
            raise ShapeMismatch(f"scan plan has {plan.V} joints, config says {cfg.V}")
        self.cfg = cfg
        self.plan = plan
        self.params = params
        d = cfg.N * cfg.hidden
        self.ssms = [SsmParams(f"block{i}.ssm", cfg.ssm_state, d) for i in range(cfg.num_blocks)]
        missing = [n for n in _expected_names(cfg) if n not in params]
        if missing:
            raise KeyError(f"parameters missing from registry: {missing[:5]}")

    @classmethod
    def init(cls, cfg: DenoiserConfig, plan: ScanPlan, seed: int = 0) -> Denoiser:
        rng = np.random.default_rng(seed)
        p = ad.Parameters()
        C, N, V = cfg.hidden, cfg.N, cfg.V
        p.add("embed.W", _normal(rng, 6, (6, C)))
        p.add("embed.b", np.zeros(C))
        p.add("step.W", _normal(rng, C, (C, C)))
        p.add("step.b", np.zeros(C))
        for i in range(cfg.num_blocks):
            b = f"block{i}"
            p.add(f"{b}.ln_ssm.g", np.ones(N * C))
            p.add(f"{b}.ln_ssm.b", np.zeros(N * C))
            init_ssm(p, f"{b}.ssm", N * C, cfg.ssm_state, rng)
            p.add(f"{b}.ln_att.g", np.ones(V * C))
            p.add(f"{b}.ln_att.b", np.zeros(V * C))
            p.add(f"{b}.att.compress.W", _normal(rng, V * C, (V * C, C)))
            p.add(f"{b}.att.compress.b", np.zeros(C))
            for m in "qkvo":
                p.add(f"{b}.att.{m}.W", _normal(rng, C, (C, C)))
                if m != "k":  # softmax ignores a key bias; its gradient is identically zero
                    p.add(f"{b}.att.{m}.b", np.zeros(C))
            p.add(f"{b}.att.expand.W", _normal(rng, C, (C, V * C)))
            p.add(f"{b}.att.expand.b", np.zeros(V * C))
            p.add(f"{b}.ln_ff.g", np.ones(C))
            p.add(f"{b}.ln_ff.b", np.zeros(C))
            p.add(f"{b}.ff.W1", _normal(rng, C, (C, cfg.ff_mult * C)))
            p.add(f"{b}.ff.b1", np.zeros(cfg.ff_mult * C))
            p.add(f"{b}.ff.W2", _normal(rng, cfg.ff_mult * C, (cfg.ff_mult * C, C)))
            p.add(f"{b}.ff.b2", np.zeros(C))
        for k in range(cfg.heads):
            # near-zero heads start out equally competitive, so every head wins
            # some items early on instead of one head absorbing all gradient
            p.add(f"head{k}.W", HEAD_INIT_SCALE * _normal(rng, C, (C, 3)))
            p.add(f"head{k}.b", np.zeros(3))
        return cls(cfg, plan, p)

    def parameter_counts(self) -> dict[str, int]:
        groups = ["embed", "step"] + [f"block{i}." for i in range(self.cfg.num_blocks)]
        groups += [f"head{k}." for k in range(self.cfg.heads)]
        counts = {g.rstrip("."): self.params.count(g) for g in groups}
        counts["total"] = self.params.count()
        return counts

    def __call__(self, chi_t, condition, t, src=None, skips: bool = True) -> list[ad.Value]:
        return predict_noise(self, chi_t, condition, t, src=src, skips=skips)


def _expected_names(cfg: DenoiserConfig) -> list[str]:
    names = ["embed.W", "embed.b", "step.W", "step.b"]
    for i in range(cfg.num_blocks):
        names += [f"block{i}.ssm.{leaf}" for leaf in ("a_raw", "B", "C", "D", "w_delta")]
        names += [f"block{i}.att.{m}.W" for m in ("compress", "q", "k", "v", "o", "expand")]
        names += [f"block{i}.ff.W1", f"block{i}.ff.W2"]
    names += [f"head{k}.W" for k in range(cfg.heads)]
    return names


def step_embedding(t, dim: int) -> np.ndarray:
    """Sinusoidal embedding of integer diffusion steps, shape ``(len(t), dim)``."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    angles = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


def _linear(src, x, prefix: str, w: str = "W", b: str = "b") -> ad.Value:
    return x @ src.param(f"{prefix}.{w}") + src.param(f"{prefix}.{b}")


def embed(model: Denoiser, src, chi_t, condition, t) -> ad.Value:
    """Lift ``[noisy, condition]`` per cell to C channels and add the step embedding."""
    cfg = model.cfg
    chi_t, condition = ad.as_value(chi_t), ad.as_value(condition)
    expected = (cfg.N, cfg.V, 3)
    if chi_t.ndim != 4 or chi_t.shape[1:] != expected or condition.shape != chi_t.shape:
        raise ShapeMismatch(f"inputs must be (batch, {cfg.N}, {cfg.V}, 3)")
    B = chi_t.shape[0]
    t = np.broadcast_to(np.atleast_1d(np.asarray(t)), (B,))
    x = _linear(src, ad.concat([chi_t, condition], axis=-1), "embed")
    temb = _linear(src, ad.Value(step_embedding(t, cfg.hidden)), "step")  # (B, C)
    ones = ad.Value(np.ones((B, cfg.N * cfg.V, 1)))
    spread = ones @ ad.reshape(temb, (B, 1, cfg.hidden))  # (B, N*V, C)
    return x + ad.reshape(spread, (B, cfg.N, cfg.V, cfg.hidden))


def spatial_scan(model: Denoiser, src, x: ad.Value, i: int) -> ad.Value:
    """Block part (a): stickman-order selective scan with joint repeat/select."""
    B, N, V, C = x.shape
    plan = model.plan
    z = ad.reshape(ad.transpose(x, (0, 2, 1, 3)), (B, V, N * C))
    tour = ad.gather_rows(z, plan.tour, axis=1)
    tour = ad.layer_norm(tour, src.param(f"block{i}.ln_ssm.g"), src.param(f"block{i}.ln_ssm.b"))
    tour = ssm_scan(model.ssms[i], src, tour)
    z = z + ad.gather_rows(tour, plan.select_index, axis=1)
    return ad.transpose(ad.reshape(z, (B, V, N, C)), (0, 2, 1, 3))


def frequency_attention(model: Denoiser, src, x: ad.Value, i: int) -> ad.Value:
    """Block part (b): self-attention across the N frequency tokens."""
    B, N, V, C = x.shape
    h = model.cfg.attention_heads
    dh = C // h
    p = f"block{i}.att"
    f = ad.reshape(x, (B, N, V * C))
    tok = _linear(src, ad.layer_norm(f, src.param(f"block{i}.ln_att.g"), src.param(f"block{i}.ln_att.b")), f"{p}.compress")

    def split_heads(v: ad.Value) -> ad.Value:
        return ad.reshape(ad.transpose(ad.reshape(v, (B, N, h, dh)), (0, 2, 1, 3)), (B * h, N, dh))

    q = split_heads(_linear(src, tok, f"{p}.q"))
    k = split_heads(tok @ src.param(f"{p}.k.W"))
    v = split_heads(_linear(src, tok, f"{p}.v"))
    scores = (q @ ad.transpose(k, (0, 2, 1))) * (1.0 / np.sqrt(dh))
    o = ad.softmax_lastdim(scores) @ v
    o = ad.reshape(ad.transpose(ad.reshape(o, (B, h, N, dh)), (0, 2, 1, 3)), (B, N, C))
    o = _linear(src, _linear(src, o, f"{p}.o"), f"{p}.expand")
    return ad.reshape(f + o, (B, N, V, C))


def feedforward(model: Denoiser, src, x: ad.Value, i: int) -> ad.Value:
    p = f"block{i}"
    y = ad.layer_norm(x, src.param(f"{p}.ln_ff.g"), src.param(f"{p}.ln_ff.b"))
    # shifted softplus: smooth, and zero at zero so an all-zero block stays at zero
    act = ad.softplus(_linear(src, y, f"{p}.ff", "W1", "b1")) - LN2
    y = _linear(src, act, f"{p}.ff", "W2", "b2")
    return x + y


def mam_trans_block(model: Denoiser, src, x: ad.Value, i: int) -> ad.Value:
    x = spatial_scan(model, src, x, i)
    x = frequency_attention(model, src, x, i)
    return feedforward(model, src, x, i)


def predict_noise(model: Denoiser, chi_t, condition, t, src=None, skips: bool = True) -> list[ad.Value]:
    """K noise predictions, each shaped like ``chi_t``.

    Unbatched ``(N, V, 3)`` inputs give unbatched outputs.  ``src`` defaults to
    tape-free inference.
    """
    src = ad.Frozen(model.params) if src is None else src
    chi_t, condition = ad.as_value(chi_t), ad.as_value(condition)
    single = chi_t.ndim == 3
    if single:
        chi_t = ad.reshape(chi_t, (1,) + chi_t.shape)
        condition = ad.reshape(condition, (1,) + condition.shape)
    nb = model.cfg.num_blocks
    x = embed(model, src, chi_t, condition, t)
    block_inputs = []
    for i in range(nb):
        block_inputs.append(x)
        x = mam_trans_block(model, src, x, i)
        partner = nb - 1 - i
        if skips and partner < nb // 2:
            x = x + block_inputs[partner]
    outs = [_linear(src, x, f"head{k}") for k in range(model.cfg.heads)]
    if single:
        outs = [ad.reshape(o, o.shape[1:]) for o in outs]
    return outs


def drop_condition(condition: np.ndarray, p: float, rng: np.random.Generator) -> np.ndarray:
    """Replace the condition by the all-zero null token with probability ``p``."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"drop probability must lie in [0, 1), got {p}")
    if rng.random() < p:
        return np.zeros_like(condition)
    return condition
