"""Command-line interface: ``motiondiff <subcommand> ...``.

Exit codes: 0 success, 1 validation error, 2 IO error.  Every command
validates its inputs before writing anything, and files are written through
a temporary file in the target directory followed by a rename.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
import tempfile
from dataclasses import replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import autodiff as ad
from .config import RunConfig, default_config, load_config, schema_help
from .data import (
    MotionDataset,
    decode_container,
    encode_container,
    generate_synthetic,
    read_container,
    to_csv,
    window_array,
)
from .denoiser import Denoiser
from .diffusion import cosine_schedule, sample_many
from .errors import ConfigError, MotionDiffError
from .metrics import ITEM_COLUMNS, EvalItem, build_multimodal_gt, evaluate
from .skeleton import canonical_skeleton, load_topology, make_scan_plan
from .spectral import dct_basis, residual_encode
from .training import coefficient_envelope, train

CHECKPOINT = "model.smdk"
CONFIG = "config.ini"
ENVELOPE = "envelope.smdk"  # largest |coefficient| per (k, joint, axis) over the training windows


class UsageError(MotionDiffError, ValueError):
    pass


def atomic_write(path: str | Path, payload: bytes | str) -> None:
    path = Path(path)
    data = payload.encode() if isinstance(payload, str) else payload
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else None
    seed = getattr(args, "seed", None)
    if cfg is None:
        if seed is None:
            raise ConfigError("a config file or --seed is required")
        cfg = default_config(seed)
    elif seed is not None:
        cfg = cfg.with_seed(seed)
    return cfg


def _windows(cfg: RunConfig, ds: MotionDataset, split: str) -> np.ndarray:
    if ds.V != cfg.model.V:
        raise UsageError(f"data has {ds.V} joints, model expects {cfg.model.V}")
    ds = ds.with_split(cfg.test_fraction)
    return window_array(ds, cfg.H, cfg.F, cfg.stride, None if split == "all" else split)


def select_items(n: int, max_items: int | None) -> np.ndarray:
    """Evenly spaced item indices, all of them when ``max_items`` is unset."""
    if max_items is None or max_items >= n:
        return np.arange(n)
    return np.unique(np.round(np.linspace(0, n - 1, max_items)).astype(np.int64))


def _load_model(ckpt_dir: Path) -> tuple[RunConfig, Denoiser]:
    cfg = load_config(ckpt_dir / CONFIG)
    params = ad.Parameters.load(ckpt_dir / CHECKPOINT)
    if cfg.clip_x0:
        bound = ad.Parameters.load(ckpt_dir / ENVELOPE)["x0_bound"]
        cfg = _with_bound(cfg, bound)
    return cfg, Denoiser(cfg.model, make_scan_plan(cfg.skeleton), params)


def _with_bound(cfg: RunConfig, bound: np.ndarray) -> RunConfig:
    # flat spans (e.g. all-zero coefficients) get a tiny positive bound
    return replace(cfg, sampler=replace(cfg.sampler, x0_bound=np.maximum(bound, 1e-12)))


def cmd_gen_data(args) -> None:
    cfg = _config(args)
    ds = generate_synthetic(cfg.synthetic, cfg.skeleton)
    atomic_write(args.out, encode_container(ds))
    if args.csv:
        atomic_write(args.csv, to_csv(ds))
    print(f"wrote {len(ds.sequences)} sequences x {cfg.synthetic.frames} frames to {args.out}")


def cmd_train(args) -> None:
    cfg = _config(args)
    if args.epochs is not None:
        cfg = cfg.override("train", "epochs", args.epochs)
    if args.max_steps is not None:
        cfg = cfg.override("train", "max_steps", args.max_steps)
    motions = _windows(cfg, read_container(args.data), "train")
    if len(motions) == 0:
        raise UsageError("no training windows")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write(out / CONFIG, cfg.to_ini())
    model = Denoiser.init(cfg.model, make_scan_plan(cfg.skeleton), cfg.seed)
    basis = dct_basis(cfg.T)
    sched = cosine_schedule(cfg.steps, cfg.cosine_s)

    def on_epoch_end(epoch, log):
        if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            atomic_write(out / f"epoch_{epoch + 1:04d}.smdk", ad.encode_checkpoint(model.params))
        if not args.quiet:
            print(f"epoch {epoch + 1}: loss {log.losses[-1]:.4f}", flush=True)

    log = train(model, motions, cfg.H, basis, sched, cfg.train, on_epoch_end=on_epoch_end)
    atomic_write(out / CHECKPOINT, ad.encode_checkpoint(model.params))
    envelope = ad.Parameters()
    envelope.add("x0_bound", coefficient_envelope(motions, cfg.H, basis, cfg.model.N))
    atomic_write(out / ENVELOPE, ad.encode_checkpoint(envelope))
    atomic_write(out / "train_log.csv", log.to_csv())
    print(f"trained {len(log.rows)} steps; checkpoint in {out}")


def _predict(cfg: RunConfig, model: Denoiser, histories: np.ndarray, k: int) -> np.ndarray:
    return sample_many(
        model, histories, cfg.sampler, k, cosine_schedule(cfg.steps, cfg.cosine_s), dct_basis(cfg.T)
    )


def cmd_sample(args) -> None:
    cfg, model = _load_model(Path(args.checkpoint))
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    ds = read_container(args.data)
    windows = _windows(cfg, ds, args.split)
    idx = select_items(len(windows), args.max_items if args.max_items is not None else cfg.max_items)
    k = args.num_samples if args.num_samples is not None else cfg.k_eval
    if k < 1:
        raise UsageError("--num-samples must be positive")
    preds = _predict(cfg, model, windows[idx, : cfg.H], k)
    out = MotionDataset(ds.fps, list(preds.reshape((-1,) + preds.shape[2:])))
    atomic_write(args.out, encode_container(out))
    print(f"wrote {len(idx)} items x {k} samples to {args.out}")


def cmd_eval(args) -> None:
    if (args.checkpoint is None) == (args.predictions is None):
        raise UsageError("pass exactly one of --checkpoint or --predictions")
    if args.checkpoint is not None:
        cfg, model = _load_model(Path(args.checkpoint))
    else:
        cfg, model = _config(args), None
    for key, value in (("tau", args.tau), ("k_eval", args.k_eval), ("max_items", args.max_items)):
        if value is not None:
            cfg = cfg.override("eval", key, value)
    windows = _windows(cfg, read_container(args.data), args.split)
    idx = select_items(len(windows), cfg.max_items)
    if len(idx) == 0:
        raise UsageError("no evaluation windows")
    items = windows[idx]
    k = cfg.k_eval
    if model is not None:
        preds = _predict(cfg, model, items[:, : cfg.H], k)
    else:
        pred_ds = read_container(args.predictions)
        if len(pred_ds.sequences) != len(idx) * k:
            raise UsageError(f"expected {len(idx)} items x {k} samples, found {len(pred_ds.sequences)} sequences")
        preds = np.stack(pred_ds.sequences).reshape(len(idx), k, -1, cfg.model.V, 3)
        if preds.shape[2] != cfg.T:
            raise UsageError(f"predictions have {preds.shape[2]} frames, expected {cfg.T}")
    futures = items[:, cfg.H :]
    groups = build_multimodal_gt(items[:, cfg.H - 1], cfg.tau)
    eval_items = [
        EvalItem(items[i, : cfg.H], futures[i], preds[i, :, cfg.H :], [futures[j] for j in groups[i]])
        for i in range(len(idx))
    ]
    report, rows = evaluate(eval_items, futures, cfg.cmd_weighting)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ITEM_COLUMNS + ("cmd",))
    for r in rows:
        w.writerow([int(idx[r["item"]])] + [_num(r[c]) for c in ITEM_COLUMNS[1:]] + [""])
    w.writerow(["summary"] + [_num(getattr(report, c)) for c in ITEM_COLUMNS[1:]] + [_num(report.cmd)])
    atomic_write(out / "metrics.csv", buf.getvalue())
    atomic_write(out / "summary.json", report.to_json() + "\n")
    atomic_write(out / CONFIG, cfg.to_ini())
    print(report.to_json())


def _num(v: float) -> str:
    return "" if math.isnan(v) else repr(float(v))


def cmd_inspect_plan(args) -> None:
    skel = load_topology(args.skeleton) if args.skeleton else canonical_skeleton()
    plan = make_scan_plan(skel)
    print("tour: " + " ".join(map(str, plan.tour)))
    print("repeat: " + " ".join(map(str, plan.repeat_count)))
    print("select: " + " ".join(map(str, plan.select_index)))


def cmd_schedule_dump(args) -> None:
    cfg = load_config(args.config) if args.config else default_config(0)
    sched = cosine_schedule(cfg.steps, cfg.cosine_s)
    lines = ["t,beta,alpha_bar"]
    lines += [f"{t},{float(sched.beta[t - 1])!r},{float(sched.alpha_bar[t - 1])!r}" for t in range(1, sched.steps + 1)]
    text = "\n".join(lines) + "\n"
    if args.out:
        atomic_write(args.out, text)
    else:
        sys.stdout.write(text)


def cmd_model_info(args) -> None:
    cfg = load_config(args.config) if args.config else default_config(0)
    model = Denoiser.init(cfg.model, make_scan_plan(cfg.skeleton), cfg.seed)
    print(json.dumps({"config": cfg.model.to_dict(), "parameters": model.parameter_counts()}, indent=2))


def spectral_csv(motion: np.ndarray, H: int, N: int) -> str:
    """Residual-DCT coefficients of one window: a row per index ``k``, a column per joint axis."""
    enc = residual_encode(motion, motion[H - 1], dct_basis(len(motion)), N, H)
    V = motion.shape[1]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["k"] + [f"j{v}_{a}" for v in range(V) for a in "xyz"])
    for k, row in enumerate(enc.coeffs.reshape(N, -1)):
        w.writerow([k] + [repr(float(c)) for c in row])
    return buf.getvalue()


def cmd_inspect(args) -> None:
    blob = Path(args.path).read_bytes()
    if args.spectral is not None:
        cfg = load_config(args.config) if args.config else default_config(0)
        ds = decode_container(blob)
        if not 0 <= args.spectral < len(ds.sequences):
            raise UsageError(f"sequence {args.spectral} out of range (container has {len(ds.sequences)})")
        seq = ds.sequences[args.spectral]
        if args.start < 0 or args.start + cfg.T > len(seq):
            raise UsageError(f"window [{args.start}, {args.start + cfg.T}) exceeds {len(seq)} frames")
        text = spectral_csv(seq[args.start : args.start + cfg.T], cfg.H, cfg.model.N)
        if args.out:
            atomic_write(args.out, text)
        else:
            sys.stdout.write(text)
        return
    if blob[:5] == ad.CHECKPOINT_MAGIC:
        params = ad.decode_checkpoint(blob)
        info = {"kind": "checkpoint", "tensors": len(params), "parameters": params.count()}
    else:
        ds = decode_container(blob)
        lengths = [len(s) for s in ds.sequences]
        info = {"kind": "motion container", "fps": ds.fps, "V": ds.V, "sequences": len(lengths), "frames": lengths}
    print(json.dumps(info))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="motiondiff",
        description="Stochastic motion prediction with a diffusion denoiser.",
        epilog="config schema (INI):\n" + schema_help(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    p.add_argument("--threads", type=int, default=1, help="cap BLAS worker threads (default 1)")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_, epilog="config schema (INI):\n" + schema_help(),
                            formatter_class=argparse.RawDescriptionHelpFormatter)
        sp.set_defaults(func=fn)
        return sp

    sp = add("gen-data", cmd_gen_data, "generate a synthetic motion container")
    sp.add_argument("--config", help="run config (INI)")
    sp.add_argument("--seed", type=int, help="override [train] seed")
    sp.add_argument("--out", required=True, help="output container")
    sp.add_argument("--csv", help="also export the data as CSV")

    sp = add("train", cmd_train, "train a denoiser; writes a checkpoint directory")
    sp.add_argument("--config", help="run config (INI)")
    sp.add_argument("--seed", type=int, help="override [train] seed")
    sp.add_argument("--data", required=True, help="motion container")
    sp.add_argument("--out", required=True, help="checkpoint directory")
    sp.add_argument("--epochs", type=int, help="override [train] epochs")
    sp.add_argument("--max-steps", type=int, help="override [train] max_steps")
    sp.add_argument("--quiet", action="store_true", help="no per-epoch progress")

    sp = add("sample", cmd_sample, "sample futures for the windows of a container")
    sp.add_argument("--checkpoint", required=True, help="checkpoint directory")
    sp.add_argument("--data", required=True, help="motion container")
    sp.add_argument("--out", required=True, help="output container, samples grouped by window")
    sp.add_argument("--num-samples", type=int, help="samples per window (default [eval] k_eval)")
    sp.add_argument("--max-items", type=int, help="evenly spaced windows to sample")
    sp.add_argument("--split", choices=("train", "test", "all"), default="test")
    sp.add_argument("--seed", type=int, help="override the sampling seed")

    sp = add("eval", cmd_eval, "evaluate a checkpoint or a predictions container")
    sp.add_argument("--checkpoint", help="checkpoint directory to sample from")
    sp.add_argument("--predictions", help="container written by sample")
    sp.add_argument("--config", help="run config (with --predictions)")
    sp.add_argument("--seed", type=int, help="override [train] seed (with --predictions)")
    sp.add_argument("--data", required=True, help="motion container")
    sp.add_argument("--out", required=True, help="directory for metrics.csv, summary.json and config.ini")
    sp.add_argument("--tau", type=float, help="override [eval] tau")
    sp.add_argument("--k-eval", type=int, help="override [eval] k_eval")
    sp.add_argument("--max-items", type=int, help="override [eval] max_items")
    sp.add_argument("--split", choices=("train", "test", "all"), default="test")

    sp = add("inspect-plan", cmd_inspect_plan, "print the scan tour of a topology file")
    sp.add_argument("skeleton", nargs="?", help="topology file (default: canonical skeleton)")

    sp = add("schedule-dump", cmd_schedule_dump, "CSV of (t, beta, alpha_bar)")
    sp.add_argument("--config", help="run config (INI)")
    sp.add_argument("--out", help="write the CSV here instead of stdout")

    sp = add("model-info", cmd_model_info, "parameter counts per group")
    sp.add_argument("--config", help="run config (INI)")

    sp = add("inspect", cmd_inspect, "summarize a container or checkpoint, or dump a window's spectrum")
    sp.add_argument("path", help="motion container or checkpoint file")
    sp.add_argument("--spectral", type=int, metavar="SEQ", help="CSV of the residual-DCT coefficients of one window")
    sp.add_argument("--start", type=int, default=0, help="first frame of the window (with --spectral)")
    sp.add_argument("--config", help="run config giving H, F and N (with --spectral)")
    sp.add_argument("--out", help="write the CSV here instead of stdout")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.threads < 1:
            raise UsageError("--threads must be positive")
        with threadpool_limits(limits=args.threads):
            args.func(args)
    except OSError as exc:  # includes malformed containers and checkpoints
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except (MotionDiffError, ValueError, KeyError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
