"""Stochastic motion-prediction metrics: APD, APDE, ADE, FDE, MMADE, MMFDE and CMD.

Every per-frame distance is the Euclidean norm of the flattened ``V x 3``
difference.  Samples are ``(K, F, V, 3)``; futures are ``(F, V, 3)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import EmptyMultimodalSet, ShapeMismatch, TooFewSamples

DEFAULT_TAU = 0.5
DEFAULT_K_EVAL = 50


def frame_dist(a, b) -> np.ndarray:
    """Per-frame distances over the trailing ``(V, 3)`` axes."""
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    return np.sqrt(np.sum(d * d, axis=(-2, -1)))


def _samples(samples) -> np.ndarray:
    s = np.asarray(samples, dtype=np.float64)
    if s.ndim != 4 or s.shape[-1] != 3:
        raise ShapeMismatch(f"samples must be (K, F, V, 3), got {s.shape}")
    if s.shape[0] < 1:
        raise TooFewSamples("at least one sample is required")
    return s


def _check_future(s: np.ndarray, g) -> np.ndarray:
    g = np.asarray(g, dtype=np.float64)
    if g.shape != s.shape[1:]:
        raise ShapeMismatch(f"future {g.shape} does not match samples {s.shape[1:]}")
    return g


def apd(samples) -> float:
    """Mean pairwise distance between whole flattened sequences."""
    s = _samples(samples)
    K = s.shape[0]
    if K < 2:
        raise TooFewSamples(f"APD needs at least 2 samples, got {K}")
    flat = s.reshape(K, -1)
    total = 0.0
    for i in range(K - 1):
        total += float(np.sum(np.linalg.norm(flat[i + 1 :] - flat[i], axis=1)))
    return 2.0 * total / (K * (K - 1))


def ade(samples, gt_future) -> float:
    s = _samples(samples)
    g = _check_future(s, gt_future)
    return float(np.min(np.mean(frame_dist(s, g[None]), axis=1)))


def fde(samples, gt_future) -> float:
    s = _samples(samples)
    g = _check_future(s, gt_future)
    return float(np.min(frame_dist(s[:, -1], g[-1][None])))


def _mm(samples, mm_futures, final_only: bool) -> float:
    s = _samples(samples)
    if len(mm_futures) == 0:
        raise EmptyMultimodalSet("multimodal set is empty; item is excluded")
    errs = []
    for g in mm_futures:
        g = _check_future(s, g)
        errs.append(fde(s, g) if final_only else ade(s, g))
    return float(np.mean(errs))


def mmade(samples, mm_futures) -> float:
    """ADE against every multimodal future, averaged over the set."""
    return _mm(samples, mm_futures, final_only=False)


def mmfde(samples, mm_futures) -> float:
    return _mm(samples, mm_futures, final_only=True)


def apde(samples, mm_futures) -> float:
    """``|APD(samples) - APD(multimodal futures)|`` for one item."""
    if len(mm_futures) < 2:
        raise TooFewSamples(f"APDE needs at least 2 multimodal futures, got {len(mm_futures)}")
    return abs(apd(samples) - apd(np.stack([np.asarray(g, dtype=np.float64) for g in mm_futures])))


def speed_profile(motions) -> np.ndarray:
    """Mean per-joint displacement magnitude between consecutive frames, ``(F - 1,)``."""
    m = np.asarray(motions, dtype=np.float64)
    if m.ndim == 3:
        m = m[None]
    if m.ndim != 4 or m.shape[-1] != 3:
        raise ShapeMismatch(f"motions must be (n, F, V, 3), got {m.shape}")
    step = np.linalg.norm(np.diff(m, axis=1), axis=-1)  # (n, F-1, V)
    return step.mean(axis=(0, 2))


def cmd(predictions, reference, weighting: str = "linear") -> float:
    """Weighted L1 distance between the speed profiles of predictions and a reference set.

    ``weighting="linear"`` weights frame gap ``t`` (1-based) by ``F - t``;
    ``"uniform"`` weights every gap by 1.  Both inputs are ``(n, F, V, 3)``;
    sample axes may be folded into ``n``.
    """
    p = np.asarray(predictions, dtype=np.float64)
    r = np.asarray(reference, dtype=np.float64)
    p = p.reshape((-1,) + p.shape[-3:])
    r = r.reshape((-1,) + r.shape[-3:])
    if p.shape[1:] != r.shape[1:]:
        raise ShapeMismatch(f"prediction frames {p.shape[1:]} vs reference {r.shape[1:]}")
    F = p.shape[1]
    diff = np.abs(speed_profile(p) - speed_profile(r))
    if weighting == "linear":
        w = F - np.arange(1, F, dtype=np.float64)
    elif weighting == "uniform":
        w = np.ones(F - 1)
    else:
        raise ValueError(f"unknown CMD weighting {weighting!r}")
    return float(np.sum(w * diff))


def build_multimodal_gt(last_poses, tau: float = DEFAULT_TAU) -> list[np.ndarray]:
    """For each item, indices of all items whose last observed pose lies within ``tau``.

    ``last_poses`` is ``(n, V, 3)``; every item includes itself.
    """
    if not tau > 0:
        raise ValueError("tau must be positive")
    p = np.asarray(last_poses, dtype=np.float64)
    flat = p.reshape(len(p), -1)
    out = []
    for i in range(len(p)):
        d = np.linalg.norm(flat - flat[i], axis=1)
        out.append(np.flatnonzero(d < tau))  # d[i] = 0, so item i is always included
    return out


@dataclass
class EvalItem:
    history: np.ndarray
    gt_future: np.ndarray
    samples: np.ndarray
    mm_futures: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        self.samples = _samples(self.samples)
        self.gt_future = _check_future(self.samples, self.gt_future)
        self.history = np.asarray(self.history, dtype=np.float64)
        if self.history.shape[1:] != self.gt_future.shape[1:]:
            raise ShapeMismatch("history and future joint layouts differ")
        arrays = [self.history, self.gt_future, self.samples, *self.mm_futures]
        if not all(np.all(np.isfinite(a)) for a in arrays):
            raise ValueError("evaluation inputs must be finite")


@dataclass
class MetricsReport:
    apd: float
    apde: float
    ade: float
    fde: float
    mmade: float
    mmfde: float
    cmd: float
    n_items: int
    n_apd: int
    n_apde: int
    n_mm: int

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(
            {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in self.to_dict().items()},
            indent=2,
        )


ITEM_COLUMNS = ("item", "apd", "apde", "ade", "fde", "mmade", "mmfde")


def item_metrics(item: EvalItem) -> dict[str, float]:
    """Per-item values; metrics that are undefined for the item are NaN."""
    nan = float("nan")
    row = {"ade": ade(item.samples, item.gt_future), "fde": fde(item.samples, item.gt_future)}
    row["apd"] = apd(item.samples) if len(item.samples) >= 2 else nan
    if item.mm_futures:
        row["mmade"] = mmade(item.samples, item.mm_futures)
        row["mmfde"] = mmfde(item.samples, item.mm_futures)
    else:
        row["mmade"] = row["mmfde"] = nan
    ok = len(item.mm_futures) >= 2 and len(item.samples) >= 2
    row["apde"] = apde(item.samples, item.mm_futures) if ok else nan
    return row


def evaluate(items: list[EvalItem], reference=None, cmd_weighting: str = "linear"):
    """Aggregate metrics over items in their given order; returns ``(report, rows)``.

    ``reference`` holds the futures that define the CMD speed profile and
    defaults to the items' own ground truth.
    """
    if not items:
        raise ValueError("nothing to evaluate")
    rows = [dict(item=i, **item_metrics(it)) for i, it in enumerate(items)]

    def mean(key: str) -> tuple[float, int]:
        vals = [r[key] for r in rows if not math.isnan(r[key])]
        return (float(np.mean(vals)) if vals else float("nan")), len(vals)

    ref = np.stack([it.gt_future for it in items]) if reference is None else reference
    preds = np.concatenate([it.samples for it in items])
    apd_v, n_apd = mean("apd")
    apde_v, n_apde = mean("apde")
    mmade_v, n_mm = mean("mmade")
    report = MetricsReport(
        apd=apd_v,
        apde=apde_v,
        ade=mean("ade")[0],
        fde=mean("fde")[0],
        mmade=mmade_v,
        mmfde=mean("mmfde")[0],
        cmd=cmd(preds, ref, cmd_weighting),
        n_items=len(items),
        n_apd=n_apd,
        n_apde=n_apde,
        n_mm=n_mm,
    )
    return report, rows
