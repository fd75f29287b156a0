"""Best-of-K diffusion training: loss with winner-only gradients, Adam, and the loop."""

from __future__ import annotations

import csv
import io
import time
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .denoiser import Denoiser, drop_condition, predict_noise
from .diffusion import NoiseSchedule, q_sample
from .errors import ShapeMismatch
from .spectral import DctBasis

# relative size of the perturbation that separates a revived head from its donor
REVIVE_NOISE = 0.01


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 3e-4
    lr_decay: float = 0.8
    decay_every: int = 100
    batch_size: int = 64
    epochs: int = 50
    cond_drop_p: float = 0.2
    seed: int = 0
    max_steps: int | None = None
    time_budget_s: float | None = None
    revive_below: float = 0.5

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must lie in (0, 1]")
        if self.decay_every < 1 or self.batch_size < 1 or self.epochs < 1:
            raise ValueError("decay_every, batch_size and epochs must be positive")
        if not 0 <= self.cond_drop_p < 1:
            raise ValueError("cond_drop_p must lie in [0, 1)")
        if not 0 <= self.revive_below < 1:
            raise ValueError("revive_below must lie in [0, 1)")


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: ad.Parameters, **hyper) -> OptimizerState:
        return cls(
            {k: np.zeros_like(a) for k, a in params.values.items()},
            {k: np.zeros_like(a) for k, a in params.values.items()},
            **hyper,
        )


def lr_schedule(epoch: int, lr: float = 3e-4, decay: float = 0.8, every: int = 100) -> float:
    """Step decay: ``lr * decay ** floor(epoch / every)``."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    return lr * decay ** (epoch // every)


def adam_update(state: OptimizerState, params: ad.Parameters, grads: dict[str, np.ndarray], lr: float) -> None:
    """One bias-corrected Adam step, applied to ``params`` in place."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.values.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeMismatch(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def head_losses(eps: np.ndarray, predictions: Sequence) -> np.ndarray:
    """Per-head squared errors ``(K,)`` or ``(K, batch)`` without touching any tape."""
    eps = np.asarray(eps)
    out = []
    for p in predictions:
        d = np.asarray(getattr(p, "data", p)) - eps
        out.append(np.sum(d * d, axis=tuple(range(d.ndim - 3, d.ndim))))
    return np.array(out)


def k_diversity_loss(eps, predictions: Sequence[ad.Value]):
    """``min_k ||eps - pred_k||^2`` with gradients flowing only into the winning head.

    Accepts single items ``(N, V, 3)`` or batches ``(B, N, V, 3)``; batches are
    reduced by the mean of per-item minima.  Returns ``(loss, k_star)``; ties
    go to the lowest head index.
    """
    eps = np.asarray(eps, dtype=np.float64)
    preds = [ad.as_value(p) for p in predictions]
    if not preds:
        raise ShapeMismatch("need at least one prediction")
    for p in preds:
        if p.shape != eps.shape:
            raise ShapeMismatch(f"prediction {p.shape} vs noise {eps.shape}")
    per_head = head_losses(eps, preds)
    k_star = np.argmin(per_head, axis=0)
    if eps.ndim == 3:
        k = int(k_star)
        d = preds[k] - eps
        return ad.sum(d * d), k
    B = eps.shape[0]
    total = None
    for k, p in enumerate(preds):
        rows = np.flatnonzero(k_star == k)
        if rows.size == 0:
            continue  # head k is never selected: leave it off the tape entirely
        d = ad.gather_rows(p, rows, axis=0) - eps[rows]
        part = ad.sum(d * d)
        total = part if total is None else total + part
    return total * (1.0 / B), k_star


def prepare_batch(
    motions: np.ndarray, H: int, basis: DctBasis, N: int, rng: np.random.Generator, cond_drop_p: float
) -> tuple[np.ndarray, np.ndarray]:
    """Residual-DCT targets and (possibly dropped) conditions for a batch of full motions."""
    motions = np.asarray(motions, dtype=np.float64)
    if motions.ndim != 4 or motions.shape[1] != basis.T:
        raise ShapeMismatch(f"batch must be (B, T={basis.T}, V, 3), got {motions.shape}")
    x_ref = motions[:, H - 1]
    W = basis.W[:N]
    x0 = np.einsum("nt,btvc->bnvc", W, motions - x_ref[:, None])
    padded = np.concatenate(
        [motions[:, :H], np.repeat(motions[:, H - 1 : H], basis.T - H, axis=1)], axis=1
    )
    cond = np.einsum("nt,btvc->bnvc", W, padded - x_ref[:, None])
    cond = np.stack([drop_condition(c, cond_drop_p, rng) for c in cond])
    return x0, cond


def coefficient_envelope(motions: np.ndarray, H: int, basis: DctBasis, N: int, chunk: int = 256) -> np.ndarray:
    """Largest absolute residual-DCT coefficient per ``(k, joint, axis)`` over ``motions``."""
    motions = np.asarray(motions, dtype=np.float64)
    env = np.zeros((N,) + motions.shape[2:])
    for lo in range(0, len(motions), chunk):
        part = motions[lo : lo + chunk]
        x0 = np.einsum("nt,btvc->bnvc", basis.W[:N], part - part[:, H - 1 : H])
        env = np.maximum(env, np.max(np.abs(x0), axis=0))
    return env


def train_step(
    model: Denoiser,
    opt: OptimizerState,
    motions: np.ndarray,
    H: int,
    basis: DctBasis,
    sched: NoiseSchedule,
    rng: np.random.Generator,
    cfg: TrainConfig,
    lr: float,
) -> tuple[float, np.ndarray]:
    """One optimizer step on a batch of full motions; returns ``(loss, k_star)``."""
    x0, cond = prepare_batch(motions, H, basis, model.cfg.N, rng, cfg.cond_drop_p)
    B = x0.shape[0]
    t = rng.integers(1, sched.steps + 1, size=B)
    eps = rng.standard_normal(x0.shape)
    x_t = q_sample(x0, t, eps, sched)
    tape = ad.Tape(model.params)
    preds = predict_noise(model, x_t, cond, t, src=tape)
    loss, k_star = k_diversity_loss(eps, preds)
    ad.backward(tape, loss)
    adam_update(opt, model.params, model.params.grads, lr)
    return loss.item(), k_star


@dataclass
class TrainLog:
    K: int
    rows: list[dict] = field(default_factory=list)
    revivals: list[tuple[int, int, int]] = field(default_factory=list)  # (epoch, head, donor)

    def append(self, step: int, epoch: int, lr: float, loss: float, k_star: np.ndarray) -> None:
        hist = np.bincount(np.atleast_1d(k_star), minlength=self.K)
        row = {"step": step, "epoch": epoch, "lr": lr, "loss": loss}
        row.update({f"kstar_{k}": int(c) for k, c in enumerate(hist)})
        self.rows.append(row)

    @property
    def losses(self) -> np.ndarray:
        return np.array([r["loss"] for r in self.rows])

    def to_csv(self) -> str:
        buf = io.StringIO()
        fields = ["step", "epoch", "lr", "loss"] + [f"kstar_{k}" for k in range(self.K)]
        writer = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
        writer.writeheader()
        for r in self.rows:
            writer.writerow({**r, "lr": repr(r["lr"]), "loss": repr(r["loss"])})
        return buf.getvalue()


def train(
    model: Denoiser,
    motions: np.ndarray,
    H: int,
    basis: DctBasis,
    sched: NoiseSchedule,
    cfg: TrainConfig,
    on_epoch_end: Callable[[int, TrainLog], None] | None = None,
    opt: OptimizerState | None = None,
) -> TrainLog:
    """Train on windows ``(num_windows, T, V, 3)``; the seed fixes shuffling and all noise draws.

    Stops after ``cfg.epochs``, or earlier at ``max_steps`` / ``time_budget_s``
    (checked between steps).
    """
    rng = np.random.default_rng(cfg.seed)
    opt = opt or OptimizerState.for_params(model.params)
    log = TrainLog(model.cfg.heads)
    n = len(motions)
    step = 0
    start = time.monotonic()
    for epoch in range(cfg.epochs):
        lr = lr_schedule(epoch, cfg.lr, cfg.lr_decay, cfg.decay_every)
        order = rng.permutation(n)
        for lo in range(0, n, cfg.batch_size):
            idx = np.sort(order[lo : lo + cfg.batch_size])
            loss, k_star = train_step(model, opt, motions[idx], H, basis, sched, rng, cfg, lr)
            step += 1
            log.append(step, epoch, lr, loss, k_star)
            if _should_stop(cfg, step, start):
                break
        wins = np.sum([[r[f"kstar_{k}"] for k in range(log.K)] for r in log.rows if r["epoch"] == epoch], axis=0)
        for k, donor in revive_heads(model, opt, wins, cfg.revive_below, rng):
            log.revivals.append((epoch, k, donor))
        if on_epoch_end is not None:
            on_epoch_end(epoch, log)
        if _should_stop(cfg, step, start):
            break
    return log


def revive_heads(
    model: Denoiser, opt: OptimizerState, wins: np.ndarray, below: float, rng: np.random.Generator
) -> list[tuple[int, int]]:
    """Replace starved heads by a perturbed copy of the most frequent winner.

    A head that won fewer than ``below / K`` of the items is never trained on
    the remaining noise levels, yet inference averages all heads.  Copying
    the leader (weights and Adam moments) and splitting its items keeps
    every head usable while leaving per-item gradient routing untouched.
    Returns ``(head, donor)`` pairs.
    """
    K = len(wins)
    total = int(np.sum(wins))
    if below <= 0 or K < 2 or total == 0:
        return []
    donor = int(np.argmax(wins))
    out = []
    for k in range(K):
        if k == donor or wins[k] >= below * total / K:
            continue
        for leaf in ("W", "b"):
            src, dst = f"head{donor}.{leaf}", f"head{k}.{leaf}"
            model.params[dst][...] = model.params[src]
            opt.m[dst][...] = opt.m[src]
            opt.v[dst][...] = opt.v[src]
        W = model.params[f"head{k}.W"]
        W += REVIVE_NOISE * np.sqrt(np.mean(W * W)) * rng.standard_normal(W.shape)
        out.append((k, donor))
    return out


def _should_stop(cfg: TrainConfig, step: int, start: float) -> bool:
    if cfg.max_steps is not None and step >= cfg.max_steps:
        return True
    return cfg.time_budget_s is not None and time.monotonic() - start >= cfg.time_budget_s


def decile_ratio(losses: Sequence[float]) -> float:
    """Median loss of the last 10% of steps divided by the median of the first 10%."""
    losses = np.asarray(losses, dtype=np.float64)
    k = max(1, len(losses) // 10)
    return float(np.median(losses[-k:]) / np.median(losses[:k]))
