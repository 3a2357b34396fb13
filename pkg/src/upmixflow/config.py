"""Pipeline configuration: INI-style ``[section]`` / ``key = value`` files over named profiles."""

from __future__ import annotations

import configparser
import dataclasses
import os
from dataclasses import dataclass, field

from .codec import CodecConfig
from .flow import TrainConfig
from .ode import SolveConfig
from .velocity import NetConfig


class ConfigError(ValueError):
    pass


PROFILES = {
    "desk": {
        "codec": {"frame_rate": 25, "latent_dim": 8, "sample_rate": 48000, "clip_seconds": 2.0},
        "net": {"num_blocks": 2, "num_heads": 4, "hidden_dim": 64, "time_embed_dim": 64},
        "train": {"steps": 1000, "batch_size": 8, "lr": 2e-3, "checkpoint_every": 250},
    },
    "full": {
        "codec": {"frame_rate": 25, "latent_dim": 64, "sample_rate": 48000, "clip_seconds": 10.0},
        "net": {"num_blocks": 12, "num_heads": 16, "hidden_dim": 1024, "time_embed_dim": 256},
        "train": {"steps": 200000, "batch_size": 16, "lr": 1e-4, "checkpoint_every": 5000},
    },
}

_NET_KEYS = ("num_blocks", "hidden_dim", "num_heads", "time_embed_dim", "ff_mult",
             "use_film", "use_cross_attention", "latent_skip")
_TRAIN_KEYS = ("steps", "batch_size", "lr", "log_every", "checkpoint_every", "ema_decay")
_SOLVER_KEYS = ("method", "steps", "rtol", "atol", "initial_dt", "max_steps")


@dataclass
class Paths:
    data: str = "data"
    checkpoints: str = "checkpoints"
    out: str = "out"


@dataclass
class PipelineConfig:
    profile: str = "desk"
    seed: int = 0
    codec: CodecConfig = field(default_factory=CodecConfig)
    clip_seconds: float = 2.0
    net: NetConfig = field(default_factory=NetConfig.desk)
    train: TrainConfig = field(default_factory=TrainConfig)
    solver: SolveConfig = field(default_factory=SolveConfig)
    paths: Paths = field(default_factory=Paths)

    @property
    def clip_frames(self) -> int:
        return int(round(self.clip_seconds * self.codec.frame_rate))

    def with_seed(self, seed: int | None) -> "PipelineConfig":
        if seed is None:
            return self
        return dataclasses.replace(self, seed=seed, train=dataclasses.replace(self.train, seed=seed))


def _convert(raw: str, like):
    if isinstance(like, bool):
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {raw!r}")
    if like is None:
        return None if raw.strip().lower() in ("", "none") else float(raw)
    return type(like)(raw.strip())


def _section(parser: configparser.ConfigParser, name: str, allowed) -> dict:
    if not parser.has_section(name):
        return {}
    out = dict(parser.items(name))
    unknown = set(out) - set(allowed)
    if unknown:
        raise ConfigError(f"[{name}]: unknown key(s) {sorted(unknown)}")
    return out


def _apply(obj, values: dict):
    kw = {}
    for key, raw in values.items():
        try:
            kw[key] = _convert(raw, getattr(obj, key)) if isinstance(raw, str) else raw
        except ValueError as exc:
            raise ConfigError(f"{key} = {raw!r}: {exc}") from exc
    try:
        return dataclasses.replace(obj, **kw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str | os.PathLike | None = None, profile: str | None = None) -> PipelineConfig:
    """Profile defaults, then the file's values on top.  ``profile`` overrides ``[run] profile``."""
    parser = configparser.ConfigParser(interpolation=None)
    if path is not None:
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        try:
            parser.read(path)
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    unknown = set(parser.sections()) - {"run", "codec", "net", "train", "solver", "paths"}
    if unknown:
        raise ConfigError(f"unknown section(s) {sorted(unknown)}")
    run = _section(parser, "run", ("profile", "seed"))
    profile = profile or run.get("profile", "desk")
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
    base = PROFILES[profile]

    codec_vals = {**base["codec"], **_section(parser, "codec", ("frame_rate", "latent_dim", "sample_rate",
                                                                   "clip_seconds"))}
    clip_seconds = float(codec_vals.pop("clip_seconds"))
    codec = _apply(CodecConfig(), codec_vals)
    if clip_seconds <= 0:
        raise ConfigError("clip_seconds must be positive")
    frames = int(round(clip_seconds * codec.frame_rate))

    net = _apply(NetConfig(latent_dim=codec.latent_dim, max_frames=frames),
                 {**base["net"], **_section(parser, "net", _NET_KEYS)})
    seed = int(run.get("seed", 0))
    train = _apply(TrainConfig(seed=seed), {**base["train"], **_section(parser, "train", _TRAIN_KEYS)})
    solver = _apply(SolveConfig(), _section(parser, "solver", _SOLVER_KEYS))
    paths = _apply(Paths(), _section(parser, "paths", ("data", "checkpoints", "out")))
    return PipelineConfig(profile, seed, codec, clip_seconds, net, train, solver, paths)


def format_config(cfg: PipelineConfig) -> str:
    """Fully-resolved config text; ``load_config`` on it reproduces ``cfg``."""
    sections = {
        "run": {"profile": cfg.profile, "seed": cfg.seed},
        "codec": {**dataclasses.asdict(cfg.codec), "clip_seconds": cfg.clip_seconds},
        "net": {k: getattr(cfg.net, k) for k in _NET_KEYS},
        "train": {k: getattr(cfg.train, k) for k in _TRAIN_KEYS},
        "solver": {k: getattr(cfg.solver, k) for k in _SOLVER_KEYS},
        "paths": dataclasses.asdict(cfg.paths),
    }
    lines = []
    for name, values in sections.items():
        lines.append(f"[{name}]")
        lines += [f"{k} = {'none' if v is None else repr(v) if isinstance(v, float) else v}"
                  for k, v in values.items()]
        lines.append("")
    return "\n".join(lines)


def write_resolved(cfg: PipelineConfig, path: str | os.PathLike) -> None:
    with open(path, "w") as fh:
        fh.write(format_config(cfg))
