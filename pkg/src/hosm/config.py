"""INI experiment configs: sections map onto the library's config dataclasses."""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field, fields

from .samplers import SamplerConfig
from .training import TrainConfig

FORMATS = ("csv", "json")
SOURCES = ("checkpoint", "oracle")
STOCHASTIC = ("train", "sampler", "eval", "bench", "denoise")


class ConfigError(ValueError):
    pass


@dataclass
class ModelSpec:
    rank: int | None = None
    mode: str = "full"
    hidden1: int = 128
    hidden2: int = 32
    depth: int = 3


@dataclass
class EvalSpec:
    test_points: int = 1000
    seed: int = 1
    target: str = "noisy"  # score of the noisy or clean density
    repeats: int = 7
    checkpoints: list = field(default_factory=list)


@dataclass
class BenchSpec:
    dims: list = field(default_factory=lambda: [10, 50, 100])
    rank: int = 20
    batch_size: int = 1
    repeats: int = 7
    points: int = 20
    seed: int = 0


@dataclass
class DenoiseSpec:
    input: str | None = None
    sigma: float | None = None
    samples: int = 0
    top_k: int | None = None
    seed: int = 0


@dataclass
class ExperimentConfig:
    distribution: dict
    model: ModelSpec
    train: TrainConfig
    sampler: SamplerConfig
    eval: EvalSpec
    bench: BenchSpec
    denoise: DenoiseSpec
    checkpoint: str | None = None
    source: str = "checkpoint"
    out_dir: str = "runs/default"
    format: str = "json"
    log_every: int = 100
    path: str | None = None


def _typed(cls, section: configparser.SectionProxy | None, skip=()):
    """Build dataclass ``cls`` from a section, converting by the default's type."""
    if section is None:
        return cls()
    kwargs = {}
    known = {f.name: f for f in fields(cls)}
    for key, raw in section.items():
        name = key.replace("-", "_")
        if name in skip:
            continue
        if name not in known:
            raise ConfigError(f"[{section.name}] unknown key {key!r}")
        default = getattr(cls(), name) if name != "init_point" else None
        try:
            kwargs[name] = _convert(name, raw, default)
        except ValueError as exc:
            raise ConfigError(f"[{section.name}] {key}: {exc}") from None
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"[{section.name}] {exc}") from None


def _convert(name, raw, default):
    raw = raw.strip()
    if name in ("dims", "init_point"):
        return [float(t) if name == "init_point" else int(t) for t in raw.replace(",", " ").split()]
    if name == "checkpoints":
        return [t.strip() for t in raw.split(",") if t.strip()]
    if isinstance(default, bool):
        low = raw.lower()
        if low not in ("true", "false", "yes", "no", "1", "0", "on", "off"):
            raise ValueError(f"expected a boolean, got {raw!r}")
        return low in ("true", "yes", "1", "on")
    if isinstance(default, int) or name in ("rank", "top_k"):
        if name in ("rank", "top_k") and raw.lower() == "none":
            return None
        return int(raw)
    if isinstance(default, float) or name == "sigma":
        return float(raw)
    return raw


def load_config(path, seed=None, out_dir=None) -> ExperimentConfig:
    """Parse and validate ``path``. ``seed`` overrides the seed of every stochastic stage."""
    if not os.path.isfile(path):
        raise ConfigError(f"config file not found: {path}")
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        cp.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    if seed is not None:
        if not 0 <= seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        for name in STOCHASTIC:
            if cp.has_section(name):
                cp[name]["seed"] = str(seed)
    for name in STOCHASTIC:
        if cp.has_section(name) and "seed" not in cp[name]:
            raise ConfigError(f"[{name}] needs a seed")
    if not cp.has_section("distribution") or "kind" not in cp["distribution"]:
        raise ConfigError("[distribution] with a 'kind' key is required")

    get = lambda s: cp[s] if cp.has_section(s) else None  # noqa: E731
    base = os.path.dirname(os.path.abspath(path))
    exp = cp["experiment"] if cp.has_section("experiment") else {}
    cfg = ExperimentConfig(
        distribution=dict(cp["distribution"]),
        model=_typed(ModelSpec, get("model")),
        train=_typed(TrainConfig, get("train"), skip=("log_every",)),
        sampler=_typed(SamplerConfig, get("sampler")),
        eval=_typed(EvalSpec, get("eval")),
        bench=_typed(BenchSpec, get("bench")),
        denoise=_typed(DenoiseSpec, get("denoise")),
        checkpoint=_resolve(base, exp.get("checkpoint")),
        source=exp.get("source", "checkpoint"),
        out_dir=out_dir or _resolve(base, exp.get("out_dir", "runs/default")),
        format=exp.get("format", "json"),
        log_every=int(cp["train"].get("log_every", 100)) if cp.has_section("train") else 100,
        path=path,
    )
    if cfg.denoise.input is not None:
        cfg.denoise.input = _resolve(base, cfg.denoise.input)
    cfg.eval.checkpoints = [_resolve(base, c) for c in cfg.eval.checkpoints]
    if cfg.format not in FORMATS:
        raise ConfigError(f"format must be one of {FORMATS}")
    if cfg.source not in SOURCES:
        raise ConfigError(f"source must be one of {SOURCES}")
    if cfg.model.mode not in ("full", "diag"):
        raise ConfigError("model mode must be 'full' or 'diag'")
    if cfg.eval.target not in ("noisy", "clean"):
        raise ConfigError("eval target must be 'noisy' or 'clean'")
    if cfg.bench.repeats < 7 or cfg.eval.repeats < 7:
        raise ConfigError("timing needs at least 7 repeats")
    return cfg


def _resolve(base, p):
    if p is None or os.path.isabs(p):
        return p
    return os.path.normpath(os.path.join(base, p))


def require_file(p, what):
    if p is None or not os.path.isfile(p):
        raise ConfigError(f"{what} not found: {p}")
    return p
