"""Orthonormal temporal DCT and the residual-DCT motion codec.

Motion arrays are frame-major ``(T, V, 3)``; coefficient arrays are
frequency-major ``(N, V, 3)``.  Subtracting a reference pose from every frame
before the transform only moves the DC row (``k = 0``), by ``-sqrt(T) * x_ref``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import InvalidSize, ShapeMismatch

DEFAULT_COEFFS = 20


@dataclass(frozen=True)
class DctBasis:
    T: int
    W: np.ndarray
    W_inv: np.ndarray

    def forward(self, X: np.ndarray) -> np.ndarray:
        """Apply ``W`` along the leading (time) axis."""
        return np.tensordot(self.W, X, axes=(1, 0))

    def inverse(self, chi: np.ndarray) -> np.ndarray:
        return np.tensordot(self.W_inv, chi, axes=(1, 0))


@lru_cache(maxsize=64)
def dct_basis(T: int) -> DctBasis:
    """DCT-II basis ``W[k, t] = c_k cos(pi (2t + 1) k / 2T)`` with orthonormal scaling."""
    if T < 1:
        raise InvalidSize(f"DCT size must be positive, got {T}")
    k = np.arange(T)[:, None]
    t = np.arange(T)[None, :]
    W = np.cos(np.pi * (2 * t + 1) * k / (2 * T)) * np.sqrt(2.0 / T)
    W[0, :] = 1.0 / np.sqrt(T)
    W.setflags(write=False)
    W_inv = W.T.copy()
    W_inv.setflags(write=False)
    return DctBasis(T, W, W_inv)


@dataclass(frozen=True)
class SpectralMotion:
    coeffs: np.ndarray  # (N, V, 3)
    T: int
    H: int
    x_ref: np.ndarray  # (V, 3)

    @property
    def N(self) -> int:
        return self.coeffs.shape[0]


def residual_encode(
    X: np.ndarray, x_ref: np.ndarray, basis: DctBasis, N: int, H: int | None = None
) -> SpectralMotion:
    X = np.asarray(X, dtype=np.float64)
    x_ref = np.asarray(x_ref, dtype=np.float64)
    if X.ndim != 3 or X.shape[0] != basis.T:
        raise ShapeMismatch(f"motion must be (T={basis.T}, V, 3), got {X.shape}")
    if x_ref.shape != X.shape[1:]:
        raise ShapeMismatch(f"reference pose {x_ref.shape} does not match frames {X.shape[1:]}")
    if not 1 <= N <= basis.T:
        raise InvalidSize(f"coefficient count {N} outside [1, {basis.T}]")
    chi = basis.forward(X - x_ref[None])[:N]
    return SpectralMotion(chi, basis.T, H if H is not None else 0, x_ref.copy())


def residual_decode(sm: SpectralMotion, basis: DctBasis) -> np.ndarray:
    if sm.T != basis.T or sm.N > basis.T:
        raise ShapeMismatch(f"coefficients for T={sm.T} cannot use a T={basis.T} basis")
    return decode_coeffs(sm.coeffs, sm.x_ref, basis)


def decode_coeffs(coeffs: np.ndarray, x_ref: np.ndarray, basis: DctBasis) -> np.ndarray:
    """Time-domain motion from truncated residual coefficients (zero-padded to T)."""
    N = coeffs.shape[0]
    return np.tensordot(basis.W_inv[:, :N], coeffs, axes=(1, 0)) + x_ref[None]


def encode_coeffs(X: np.ndarray, x_ref: np.ndarray, basis: DctBasis, N: int) -> np.ndarray:
    return np.tensordot(basis.W[:N], X - x_ref[None], axes=(1, 0))


def pad_history(history: np.ndarray, F: int) -> np.ndarray:
    """Append ``F`` copies of the last observed frame."""
    history = np.asarray(history, dtype=np.float64)
    if history.ndim != 3 or history.shape[0] < 1:
        raise ShapeMismatch(f"history must be (H>=1, V, 3), got {history.shape}")
    return np.concatenate([history, np.repeat(history[-1:], F, axis=0)], axis=0)


def build_condition(history: np.ndarray, F: int, basis: DctBasis, N: int) -> SpectralMotion:
    history = np.asarray(history, dtype=np.float64)
    if history.ndim != 3 or history.shape[0] + F != basis.T:
        raise ShapeMismatch(f"history of {history.shape[0]} frames plus {F} != T={basis.T}")
    return residual_encode(pad_history(history, F), history[-1], basis, N, H=history.shape[0])


def dc_dominance(coeffs: np.ndarray) -> float:
    """``||chi[0]|| / mean_{k>=1} ||chi[k]||`` over the retained coefficients."""
    norms = np.linalg.norm(coeffs.reshape(coeffs.shape[0], -1), axis=1)
    return float(norms[0] / norms[1:].mean())
