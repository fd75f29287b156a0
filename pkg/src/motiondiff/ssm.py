"""Discretized selective state-space layer.

Per step ``v`` with input ``x_v`` (a d-vector)::

    delta_v = softplus(w_delta . x_v)
    A_v     = exp(delta_v * a)               (a: diagonal, strictly negative)
    B_v     = ((A_v - 1) / a)[:, None] * B   (zero-order hold, row-wise)
    h_v     = A_v * h_{v-1} + B_v x_v,  h_0 = 0
    y_v     = C h_v + D * x_v
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ShapeMismatch

DEFAULT_STATE = 16
A_FLOOR = 1e-4
_DEBUG = os.environ.get("MOTIONDIFF_DEBUG", "") not in ("", "0")


@dataclass(frozen=True)
class SsmParams:
    """Names of one SSM's leaves inside a :class:`~motiondiff.autodiff.Parameters` registry."""

    prefix: str
    S: int
    d: int

    def name(self, leaf: str) -> str:
        return f"{self.prefix}.{leaf}"


def _softplus_inv(y: np.ndarray) -> np.ndarray:
    return y + np.log(-np.expm1(-y))


def init_ssm(
    params: ad.Parameters, prefix: str, d: int, S: int = DEFAULT_STATE, rng=None
) -> SsmParams:
    rng = np.random.default_rng(rng)
    ssm = SsmParams(prefix, S, d)
    target = np.arange(1, S + 1, dtype=np.float64)  # a_i = -(i + 1)
    params.add(ssm.name("a_raw"), _softplus_inv(target - A_FLOOR))
    params.add(ssm.name("B"), rng.normal(0.0, 1.0 / np.sqrt(d), (S, d)))
    params.add(ssm.name("C"), rng.normal(0.0, 1.0 / np.sqrt(S), (d, S)))
    params.add(ssm.name("D"), np.ones(d))
    params.add(ssm.name("w_delta"), rng.normal(0.0, 1.0 / np.sqrt(d), (d, 1)))
    return ssm


def a_diag(params: ad.Parameters, ssm: SsmParams) -> np.ndarray:
    return -(np.logaddexp(0.0, params[ssm.name("a_raw")]) + A_FLOOR)


def discretize(params: ad.Parameters, ssm: SsmParams, x_v: np.ndarray):
    """Reference (tape-free) discretization for a single step: ``(delta, A, B)``."""
    x_v = np.asarray(x_v, dtype=np.float64)
    a = a_diag(params, ssm)
    delta = float(np.logaddexp(0.0, params[ssm.name("w_delta")][:, 0] @ x_v))
    A = np.exp(delta * a)
    B = ((A - 1.0) / a)[:, None] * params[ssm.name("B")]
    return delta, A, B


def ssm_scan(ssm: SsmParams, src, x) -> ad.Value:
    """Sequential scan over the step axis of ``x``: ``(L, d)`` or ``(batch, L, d)``.

    ``src`` is a :class:`~motiondiff.autodiff.Tape` (training) or
    :class:`~motiondiff.autodiff.Frozen` (inference).
    """
    x = ad.as_value(x)
    if x.ndim == 2:
        return ad.reshape(ssm_scan(ssm, src, ad.reshape(x, (1,) + x.shape)), x.shape)
    if x.ndim != 3 or x.shape[2] != ssm.d:
        raise ShapeMismatch(f"scan input must be (batch, L, {ssm.d}), got {x.shape}")
    L = x.shape[1]
    a = -(ad.softplus(src.param(ssm.name("a_raw"))) + A_FLOOR)
    delta = ad.softplus(x @ src.param(ssm.name("w_delta")))  # (b, L, 1)
    A = ad.exp(delta @ ad.reshape(a, (1, ssm.S)))  # (b, L, S)
    if _DEBUG:
        assert np.all((A.data > 0.0) & (A.data < 1.0)), "unstable transition"
    drive = ((A - 1.0) / a) * (x @ ad.transpose(src.param(ssm.name("B")), (1, 0)))
    if L == 1:
        states = drive
    else:
        a_steps = ad.split(A, L, axis=1)
        b_steps = ad.split(drive, L, axis=1)
        h = b_steps[0]
        hs = [h]
        for v in range(1, L):
            h = a_steps[v] * h + b_steps[v]
            hs.append(h)
        states = ad.concat(hs, axis=1)
    y = states @ ad.transpose(src.param(ssm.name("C")), (1, 0))
    return y + x * src.param(ssm.name("D"))

