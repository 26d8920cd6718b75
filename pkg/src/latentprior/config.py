"""Run configuration: a sectioned ``key = value`` file with strict validation."""

from __future__ import annotations

import configparser
import hashlib
import math
from dataclasses import dataclass, field, fields, replace

from .heat import HeatOpConfig
from .inference import ChainConfig
from .wgan import TrainConfig

__all__ = ["RunConfig", "ConfigError", "load_config", "DEFAULTS"]


class ConfigError(ValueError):
    pass


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.replace(",", " ").split())


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(t) for t in text.replace(",", " ").split())


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# section -> key -> (parser, default)
SCHEMA: dict[str, dict[str, tuple]] = {
    "grid": {
        "n": (int, 16),
        "L": (float, 2.0 * math.pi),
        "kappa": (float, 0.64),
        "dt": (float, 0.01),
        "nt": (int, 100),
    },
    "data": {
        "count": (int, 5000),
        "seed": (int, 1),
        "target": (str, "paper-target"),
        "noise_sigma": (float, 1.0),
        "measurement_seed": (int, 100),
    },
    "train": {
        "latent_dim": (int, 8),
        "generator_hidden": (_ints, (64, 256)),
        "critic_hidden": (_ints, (256, 64)),
        "init_seed": (int, 0),
        "learning_rate": (float, 1e-4),
        "beta1": (float, 0.9),
        "beta2": (float, 0.5),
        "swap_betas": (_bool, False),
        "batch_size": (int, 64),
        "critic_steps": (int, 5),
        "penalty_weight": (float, 10.0),
        "iterations": (int, 5000),
        "penalty_mode": (str, "gradient-penalty"),
        "clip_bound": (float, 0.01),
        "seed": (int, 0),
        "checkpoint_every": (int, 0),
    },
    "inference": {
        "sigma": (float, 1.0),
        "restarts": (int, 32),
        "map_seed": (int, 0),
        "gtol": (float, 1e-8),
        "maxiter": (int, 500),
        "n_samp": (int, 200_000),
        "mc_seed": (int, 0),
        "proposal_std": (float, 0.005),
        "chain_length": (int, 200_000),
        "burn_in": (int, 50_000),
        "thin": (int, 10),
        "chain_seed": (int, 0),
        "chain_start": (str, "map"),
        "alpha_l2": (float, 0.01),
        "alpha_h1": (float, 0.01),
        "alpha_grid": (_floats, tuple(10.0 ** (-4 + 6 * k / 9) for k in range(10))),
    },
    "output": {
        "dir": (str, "lpb_out"),
    },
}

DEFAULTS = {sec: {k: v[1] for k, v in keys.items()} for sec, keys in SCHEMA.items()}


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


@dataclass(frozen=True)
class RunConfig:
    values: dict = field(default_factory=lambda: {s: dict(d) for s, d in DEFAULTS.items()})

    def __getitem__(self, section: str) -> dict:
        return self.values[section]

    def to_text(self) -> str:
        lines = []
        for sec in SCHEMA:
            lines.append(f"[{sec}]")
            lines += [f"{k} = {_fmt(self.values[sec][k])}" for k in SCHEMA[sec]]
            lines.append("")
        return "\n".join(lines)

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]

    def heat_config(self) -> HeatOpConfig:
        return HeatOpConfig(**self.values["grid"])

    def train_config(self, seed: int | None = None) -> TrainConfig:
        t = self.values["train"]
        names = {f.name for f in fields(TrainConfig)}
        cfg = TrainConfig(**{k: v for k, v in t.items() if k in names})
        return cfg if seed is None else replace(cfg, seed=seed)

    def chain_config(self, initial_z=None, seed: int | None = None) -> ChainConfig:
        i = self.values["inference"]
        return ChainConfig(
            proposal_std=i["proposal_std"],
            length=i["chain_length"],
            burn_in=i["burn_in"],
            thin=i["thin"],
            initial_z=initial_z,
            seed=i["chain_seed"] if seed is None else seed,
        )

    def validate(self) -> None:
        try:
            self.heat_config()
            self.train_config()
            self.chain_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        d, i = self.values["data"], self.values["inference"]
        if d["count"] < 1:
            raise ConfigError("data.count must be >= 1")
        if d["target"] not in ("paper-target", "random"):
            raise ConfigError("data.target must be 'paper-target' or 'random'")
        if not d["noise_sigma"] > 0 or not i["sigma"] > 0:
            raise ConfigError("noise standard deviations must be positive")
        if i["restarts"] < 1 or i["n_samp"] < 1:
            raise ConfigError("inference.restarts and inference.n_samp must be >= 1")
        if i["chain_start"] not in ("map", "zero", "prior"):
            raise ConfigError("inference.chain_start must be 'map', 'zero' or 'prior'")
        if min(i["alpha_l2"], i["alpha_h1"], *i["alpha_grid"]) <= 0:
            raise ConfigError("regularisation weights must be positive")


def parse_config(text: str) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    values = {s: dict(d) for s, d in DEFAULTS.items()}
    for sec in parser.sections():
        if sec not in SCHEMA:
            raise ConfigError(f"unknown section [{sec}]")
        for key, raw in parser.items(sec):
            if key not in SCHEMA[sec]:
                raise ConfigError(f"unknown key {key!r} in [{sec}]")
            conv = SCHEMA[sec][key][0]
            try:
                values[sec][key] = conv(raw)
            except ValueError as exc:
                raise ConfigError(f"[{sec}] {key}: {exc}") from exc
    cfg = RunConfig(values)
    cfg.validate()
    return cfg


def load_config(path=None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        with open(path) as f:
            text = f.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)
