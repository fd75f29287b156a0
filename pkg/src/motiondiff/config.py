"""INI run configuration with a typed schema, file:line errors and a mandatory seed.

Sections are ``data``, ``model``, ``diffusion``, ``train`` and ``eval``.  Every
key is optional except ``[train] seed``; defaults are the library defaults.
One seed drives every stream: dataset generation, weight init, shuffling,
training noise and sampling.
"""

from __future__ import annotations

import configparser
import re
from dataclasses import dataclass, replace
from pathlib import Path

from .data import SyntheticConfig
from .denoiser import DenoiserConfig
from .diffusion import SamplerConfig
from .errors import ConfigError
from .metrics import DEFAULT_K_EVAL, DEFAULT_TAU
from .skeleton import Skeleton, canonical_skeleton, load_topology
from .training import TrainConfig


def _range(text: str) -> tuple[float, float]:
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != 2:
        raise ValueError("expected 'lo, hi'")
    return float(parts[0]), float(parts[1])


def _names(text: str) -> tuple[str, ...]:
    return tuple(p.strip() for p in text.split(",") if p.strip())


def _bool(text: str) -> bool:
    value = text.strip().lower()
    if value in ("true", "yes", "on", "1"):
        return True
    if value in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"expected true or false, got {text!r}")


def _opt_int(text: str) -> int | None:
    return None if text.strip().lower() in ("", "none") else int(text)


def _opt_float(text: str) -> float | None:
    return None if text.strip().lower() in ("", "none") else float(text)


def _fmt(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    return str(value)


# section -> key -> (parser, default, help)
SCHEMA: dict[str, dict[str, tuple]] = {
    "data": {
        "skeleton": (str, "", "topology file (empty: canonical 17-joint skeleton)"),
        "num_sequences": (int, 80, "number of synthetic sequences"),
        "frames": (int, 250, "frames per synthetic sequence"),
        "fps": (float, 25.0, "frame rate"),
        "families": (_names, ("sinusoidal", "drift", "gait"), "motion families: sinusoidal, drift, gait"),
        "amplitude": (_range, (0.01, 0.08), "per-joint sinusoid amplitude range (m)"),
        "frequency": (_range, (0.2, 1.2), "sinusoid and gait frequency range (Hz)"),
        "max_sinusoids": (int, 3, "sinusoids per joint, at most"),
        "gait_amplitude": (_range, (0.05, 0.2), "limb swing amplitude range (m)"),
        "drift_amplitude": (_range, (0.0, 0.3), "global drift amplitude range (m)"),
        "drift_frequency": (_range, (0.02, 0.15), "global drift frequency range (Hz)"),
        "history": (int, 25, "observed frames H"),
        "future": (int, 100, "predicted frames F"),
        "stride": (int, 5, "window stride"),
        "test_fraction": (float, 0.2, "share of sequences (taken from the end) held out"),
    },
    "model": {
        "num_blocks": (int, 4, "number of blocks (even)"),
        "hidden": (int, 384, "channel width C"),
        "heads": (int, 5, "number of output heads K"),
        "attention_heads": (int, 4, "attention heads across frequencies"),
        "ssm_state": (int, 16, "selective-scan state size"),
        "coeffs": (int, 20, "retained DCT coefficients N"),
        "ff_mult": (int, 4, "feedforward expansion factor"),
    },
    "diffusion": {
        "steps": (int, 1000, "diffusion steps"),
        "cosine_s": (float, 0.008, "cosine schedule offset"),
        "sampler": (str, "ddim", "ddim or ddpm"),
        "ddim_steps": (int, 100, "DDIM steps"),
        "guidance_scale": (float, 1.0, "condition guidance scale (1 disables the null pass)"),
        "clip_x0": (_bool, True, "clip predicted clean states to the training-data envelope"),
    },
    "train": {
        "seed": (int, None, "seed for every random stream (required)"),
        "lr": (float, 3e-4, "Adam learning rate"),
        "lr_decay": (float, 0.8, "step-decay factor"),
        "decay_every": (int, 100, "epochs between decays"),
        "batch_size": (int, 64, "batch size"),
        "epochs": (int, 50, "epochs"),
        "cond_drop_p": (float, 0.2, "condition dropout probability"),
        "max_steps": (_opt_int, None, "stop after this many optimizer steps"),
        "time_budget_s": (_opt_float, None, "stop after this many seconds"),
        "revive_below": (float, 0.5, "replace heads winning under this share of 1/K per epoch (0: never)"),
        "checkpoint_every": (int, 0, "also save every n epochs (0: final only)"),
    },
    "eval": {
        "tau": (float, DEFAULT_TAU, "multimodal ground-truth threshold (m)"),
        "k_eval": (int, DEFAULT_K_EVAL, "samples per item"),
        "cmd_weighting": (str, "linear", "linear or uniform"),
        "max_items": (_opt_int, None, "evaluate at most this many evenly spaced items"),
    },
}


@dataclass(frozen=True)
class RunConfig:
    seed: int
    skeleton: Skeleton
    synthetic: SyntheticConfig
    H: int
    F: int
    stride: int
    test_fraction: float
    model: DenoiserConfig
    steps: int
    cosine_s: float
    sampler: SamplerConfig
    clip_x0: bool
    train: TrainConfig
    checkpoint_every: int
    tau: float
    k_eval: int
    cmd_weighting: str
    max_items: int | None
    raw: dict

    @property
    def T(self) -> int:
        return self.H + self.F

    def with_seed(self, seed: int) -> RunConfig:
        return self.override("train", "seed", seed)

    def override(self, section: str, key: str, value) -> RunConfig:
        """Rebuild with one key replaced; a sampler bound attached at load time is kept."""
        raw = {s: dict(v) for s, v in self.raw.items()}
        raw[section][key] = value
        new = _build(raw, {}, "<override>")
        return replace(new, sampler=replace(new.sampler, x0_bound=self.sampler.x0_bound))

    def to_ini(self) -> str:
        lines = []
        for section, keys in SCHEMA.items():
            lines.append(f"[{section}]")
            lines += [f"{key} = {_fmt(self.raw[section][key])}" for key in keys]
            lines.append("")
        return "\n".join(lines)


def _key_lines(text: str) -> dict[tuple[str, str], int]:
    lines: dict[tuple[str, str], int] = {}
    section = None
    for no, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        m = re.match(r"\[([^\]]+)\]", s)
        if m:
            section = m.group(1).strip()
            lines[(section, "")] = no
        elif section and "=" in s and not s.startswith(("#", ";")):
            lines[(section, s.split("=", 1)[0].strip())] = no
    return lines


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        line = getattr(exc, "lineno", None)
        raise ConfigError(str(exc).splitlines()[0], source, line) from None
    where = _key_lines(text)
    raw: dict[str, dict] = {s: {k: spec[1] for k, spec in keys.items()} for s, keys in SCHEMA.items()}
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]", source, where.get((section, "")))
        for key, value in parser.items(section):
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown key '{key}' in [{section}]", source, where.get((section, key)))
            try:
                raw[section][key] = SCHEMA[section][key][0](value)
            except ValueError as exc:
                raise ConfigError(f"[{section}] {key}: {exc}", source, where.get((section, key))) from None
    return _build(raw, where, source)


def _build(raw: dict, where: dict, source: str) -> RunConfig:
    def fail(section: str, key: str, msg: str):
        raise ConfigError(f"[{section}] {key}: {msg}", source, where.get((section, key), where.get((section, ""))))

    seed = raw["train"]["seed"]
    if seed is None:
        raise ConfigError("[train] seed is required", source, where.get(("train", "")))
    d, m, df, t, e = (raw[s] for s in ("data", "model", "diffusion", "train", "eval"))
    skeleton = load_topology(d["skeleton"]) if d["skeleton"] else canonical_skeleton()

    def build(section: str, fn):
        try:
            return fn()
        except ValueError as exc:
            key = next((k for k in raw[section] if k in str(exc)), "")
            fail(section, key, str(exc))

    synthetic = build(
        "data",
        lambda: SyntheticConfig(
            num_sequences=d["num_sequences"],
            frames=d["frames"],
            fps=d["fps"],
            families=tuple(d["families"]),
            amplitude=d["amplitude"],
            frequency=d["frequency"],
            max_sinusoids=d["max_sinusoids"],
            gait_amplitude=d["gait_amplitude"],
            drift_amplitude=d["drift_amplitude"],
            drift_frequency=d["drift_frequency"],
            seed=seed,
        ),
    )
    for key in ("history", "stride"):
        if d[key] < 1:
            fail("data", key, "must be positive")
    if d["future"] < 0:
        fail("data", "future", "must be non-negative")
    if not 0 <= d["test_fraction"] < 1:
        fail("data", "test_fraction", "must lie in [0, 1)")
    T = d["history"] + d["future"]
    if m["coeffs"] > T:
        fail("model", "coeffs", f"cannot keep {m['coeffs']} coefficients of a {T}-frame window")
    model = build(
        "model",
        lambda: DenoiserConfig(
            num_blocks=m["num_blocks"],
            hidden=m["hidden"],
            heads=m["heads"],
            attention_heads=m["attention_heads"],
            ssm_state=m["ssm_state"],
            N=m["coeffs"],
            V=skeleton.V,
            ff_mult=m["ff_mult"],
        ),
    )
    if df["steps"] < 1:
        fail("diffusion", "steps", "must be positive")
    if not df["cosine_s"] > 0:
        fail("diffusion", "cosine_s", "must be positive")
    if df["ddim_steps"] > df["steps"]:
        fail("diffusion", "ddim_steps", "cannot exceed steps")
    sigma = {"ddim": "zero", "ddpm": "fixed-beta"}.get(df["sampler"])
    if sigma is None:
        fail("diffusion", "sampler", f"unknown sampler {df['sampler']!r}")
    sampler = build(
        "diffusion",
        lambda: SamplerConfig(df["sampler"], df["ddim_steps"], sigma, df["guidance_scale"], seed),
    )
    train = build(
        "train",
        lambda: TrainConfig(
            lr=t["lr"],
            lr_decay=t["lr_decay"],
            decay_every=t["decay_every"],
            batch_size=t["batch_size"],
            epochs=t["epochs"],
            cond_drop_p=t["cond_drop_p"],
            seed=seed,
            max_steps=t["max_steps"],
            time_budget_s=t["time_budget_s"],
            revive_below=t["revive_below"],
        ),
    )
    if t["checkpoint_every"] < 0:
        fail("train", "checkpoint_every", "must be non-negative")
    if not e["tau"] > 0:
        fail("eval", "tau", "must be positive")
    if e["k_eval"] < 1:
        fail("eval", "k_eval", "must be positive")
    if e["cmd_weighting"] not in ("linear", "uniform"):
        fail("eval", "cmd_weighting", "must be linear or uniform")
    if e["max_items"] is not None and e["max_items"] < 1:
        fail("eval", "max_items", "must be positive")
    return RunConfig(
        seed=seed,
        skeleton=skeleton,
        synthetic=synthetic,
        H=d["history"],
        F=d["future"],
        stride=d["stride"],
        test_fraction=d["test_fraction"],
        model=model,
        steps=df["steps"],
        cosine_s=df["cosine_s"],
        sampler=sampler,
        clip_x0=df["clip_x0"],
        train=train,
        checkpoint_every=t["checkpoint_every"],
        tau=e["tau"],
        k_eval=e["k_eval"],
        cmd_weighting=e["cmd_weighting"],
        max_items=e["max_items"],
        raw=raw,
    )


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    return parse_config(path.read_text(), str(path))


def _default_text(key: str, default) -> str:
    if default is not None:
        return _fmt(default)
    return "required" if key == "seed" else "unset"


def schema_help() -> str:
    """Human-readable listing of every section, key, default and meaning."""
    out = []
    for section, keys in SCHEMA.items():
        out.append(f"[{section}]")
        for key, (_, default, text) in keys.items():
            out.append(f"  {key:<17} {text} (default: {_default_text(key, default)})")
    return "\n".join(out)


def default_config(seed: int = 0, **overrides) -> RunConfig:
    """Defaults plus ``section__key=value`` overrides, without going through text."""
    raw = {s: {k: spec[1] for k, spec in keys.items()} for s, keys in SCHEMA.items()}
    raw["train"]["seed"] = seed
    for name, value in overrides.items():
        section, key = name.split("__", 1)
        if key not in SCHEMA.get(section, {}):
            raise ConfigError(f"unknown key '{key}' in [{section}]")
        raw[section][key] = value
    return _build(raw, {}, "<defaults>")


__all__ = ["SCHEMA", "RunConfig", "default_config", "load_config", "parse_config", "schema_help"]
