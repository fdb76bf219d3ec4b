"""Run configuration: packaged TOML defaults merged with a user file and overrides."""

from __future__ import annotations

import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - exercised on 3.10 only
    import tomli as tomllib

from .data import DatasetConfig
from .distributions import InvalidInputError
from .kernels import KernelParams
from .losses import LossConfig
from .model import TrainConfig
from .prior import PriorConstraints

SECTIONS = {
    "kernel": {"w1", "w2", "theta_alpha", "theta_beta", "theta_gamma", "downscale", "normalization"},
    "prior": {"enabled", "c_background", "c_foreground", "grid_size"},
    "loss": {"lambda", "mode", "normalize_per_pixel", "stop_gradient", "filter"},
    "train": {"lr", "momentum", "weight_decay", "halve_every", "total_steps", "batch_size", "seed", "eval_every", "hidden"},
    "data": {"size", "num_classes", "noise_sigma", "texture_amplitude", "color_jitter", "object_scale", "val_fraction"},
}


class ConfigError(InvalidInputError):
    pass


@dataclass(frozen=True)
class RunConfig:
    kernel: KernelParams = field(default_factory=KernelParams)
    constraints: PriorConstraints = field(default_factory=PriorConstraints)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DatasetConfig = field(default_factory=DatasetConfig)
    val_fraction: float = 0.2
    raw: dict = field(default_factory=dict, repr=False, compare=False)

    def with_loss(self, **changes) -> "RunConfig":
        raw = {k: dict(v) for k, v in self.raw.items()}
        raw["loss"].update(changes)
        return from_mapping(raw)


def default_mapping() -> dict:
    text = resources.files("weakseg").joinpath("default_config.toml").read_text()
    return tomllib.loads(text)


def _validate(mapping: dict, source: str) -> None:
    for section, values in mapping.items():
        if section not in SECTIONS:
            raise ConfigError(f"{source}: unknown section [{section}]")
        if not isinstance(values, dict):
            raise ConfigError(f"{source}: [{section}] must be a table")
        unknown = set(values) - SECTIONS[section]
        if unknown:
            raise ConfigError(f"{source}: unknown keys in [{section}]: {', '.join(sorted(unknown))}")


def merge(base: dict, update: dict, source: str = "overrides") -> dict:
    _validate(update, source)
    out = {k: dict(v) for k, v in base.items()}
    for section, values in update.items():
        out.setdefault(section, {}).update(values)
    return out


def from_mapping(m: dict) -> RunConfig:
    _validate(m, "config")
    try:
        k, p, l, t, d = (m.get(s, {}) for s in ("kernel", "prior", "loss", "train", "data"))
        kernel = KernelParams.from_mapping(k)
        constraints = PriorConstraints(c_background=float(p["c_background"]), c_foreground=float(p["c_foreground"]))
        loss = LossConfig(
            lam=float(l["lambda"]),
            mode=l["mode"],
            normalize_per_pixel=bool(l["normalize_per_pixel"]),
            use_prior=bool(p["enabled"]),
            stop_gradient=bool(l["stop_gradient"]),
            filter_method=str(l["filter"]),
            grid_size=int(p["grid_size"]),
        )
        train = TrainConfig(
            lr=float(t["lr"]),
            momentum=float(t["momentum"]),
            weight_decay=float(t["weight_decay"]),
            halve_every=int(t["halve_every"]),
            total_steps=int(t["total_steps"]),
            batch_size=int(t["batch_size"]),
            seed=int(t["seed"]),
            eval_every=int(t["eval_every"]),
            hidden=tuple(int(v) for v in t["hidden"]),
        )
        data = DatasetConfig(
            size=int(d["size"]),
            num_classes=int(d["num_classes"]),
            noise_sigma=float(d["noise_sigma"]),
            texture_amplitude=float(d["texture_amplitude"]),
            color_jitter=float(d["color_jitter"]),
            object_scale=float(d["object_scale"]),
        )
        val_fraction = float(d["val_fraction"])
    except KeyError as exc:
        raise ConfigError(f"missing config key {exc.args[0]!r}") from None
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    if not 0 <= val_fraction < 1:
        raise ConfigError("data.val_fraction must lie in [0, 1)")
    return RunConfig(kernel, constraints, loss, train, data, val_fraction, raw=m)


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the TOML file at ``path`` (if any), then ``overrides``."""
    m = default_mapping()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file {path} not found")
        try:
            user = tomllib.loads(path.read_text())
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        m = merge(m, user, str(path))
    if overrides:
        m = merge(m, overrides)
    return from_mapping(m)
