"""Run configuration: INI-style sections, typed keys, flag overrides.

Every key is addressed as ``section.key`` (e.g. ``federation.rounds``).  A
config file may set any subset; unknown keys are errors.  The resolved
configuration is written back out in the same format so a run can be
reproduced from its snapshot alone.
"""

from __future__ import annotations

import configparser
import hashlib
import io
from pathlib import Path
from typing import Any

from .data import AugmentPolicy
from .federation import METHODS, FederationConfig


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.replace(" ", "").split(",") if v)


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.replace(" ", "").split(",") if v)


# section -> key -> (parser, default)
SCHEMA: dict[str, dict[str, tuple[Any, Any]]] = {
    "data": {
        "path": (str, ""),
        "format": (str, "fxds"),
        "shape": (_ints, ()),
        "class_count": (int, 0),
        "test_path": (str, ""),
    },
    "partition": {
        "clients": (int, 10),
        "beta": (float, 0.5),
        "seed": (int, 0),
        "min_size": (int, 0),
        "file": (str, ""),
    },
    "federation": {
        "rounds": (int, 100),
        "local_epochs": (int, 10),
        "method": (str, "simclr"),
        "fedx": (_bool, True),
        "batch_size": (int, 128),
        "seed": (int, 0),
        "workers": (int, 1),
        "include_positive": (_bool, False),
        "reset_ema": (_bool, False),
        "augment_both": (_bool, True),
    },
    "loss": {"tau": (float, 0.1)},
    "optim": {
        "lr": (float, 0.01),
        "momentum": (float, 0.9),
        "weight_decay": (float, 1e-5),
    },
    "model": {
        "hidden": (_ints, (256, 256)),
        "embed_dim": (int, 64),
        "head_hidden": (int, 128),
        "ema_decay": (float, 0.99),
    },
    "augment": {
        "enabled": (_bool, True),
        "padding": (int, 2),
        "flip_prob": (float, 0.5),
        "scale_min": (float, 0.8),
        "scale_max": (float, 1.2),
        "shift_min": (float, -0.1),
        "shift_max": (float, 0.1),
    },
    "eval": {
        "linear_epochs": (int, 100),
        "linear_lr": (float, 0.03),
        "semi_epochs": (int, 100),
        "semi_lr": (float, 1e-3),
        "label_ratios": (_floats, (0.01, 0.05, 0.10)),
    },
    "output": {
        "dir": (str, "runs/fedx"),
        "checkpoint_every": (int, 10),
    },
    "numerics": {"float64": (_bool, False)},
}

# keys that cannot change any artifact and are left out of the config hash
_UNHASHED = {"output.dir", "federation.workers"}


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


class RunConfig:
    """Typed view over the resolved ``section.key`` values."""

    def __init__(self, values: dict[str, Any] | None = None):
        self.values = {f"{s}.{k}": default for s, keys in SCHEMA.items()
                       for k, (_, default) in keys.items()}
        for key, value in (values or {}).items():
            self.set(key, value)

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def set(self, key: str, value: Any) -> None:
        section, _, name = key.partition(".")
        if section not in SCHEMA or name not in SCHEMA[section]:
            raise ConfigError(f"unknown config key {key!r}")
        parser = SCHEMA[section][name][0]
        if isinstance(value, str):
            try:
                value = parser(value)
            except ValueError as exc:
                raise ConfigError(f"{key}: {exc}") from exc
        elif parser is _ints or parser is _floats:
            value = tuple(value)
        self.values[key] = value

    @classmethod
    def from_file(cls, path) -> RunConfig:
        parser = configparser.ConfigParser(interpolation=None)
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except (OSError, configparser.Error) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        cfg = cls()
        for section in parser.sections():
            for name, raw in parser.items(section):
                cfg.set(f"{section}.{name}", raw)
        return cfg

    def dumps(self) -> str:
        parser = configparser.ConfigParser(interpolation=None)
        for section, keys in SCHEMA.items():
            parser[section] = {k: _format(self.values[f"{section}.{k}"]) for k in keys}
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    def write(self, path) -> None:
        Path(path).write_text(self.dumps())

    def digest(self) -> str:
        items = sorted((k, _format(v)) for k, v in self.values.items() if k not in _UNHASHED)
        return hashlib.sha256(repr(items).encode()).hexdigest()

    def validate(self) -> RunConfig:
        v = self.values
        checks = [
            (v["partition.clients"] >= 1, "partition.clients must be >= 1"),
            (v["partition.beta"] > 0, "partition.beta must be positive"),
            (v["federation.rounds"] >= 1, "federation.rounds must be >= 1"),
            (v["federation.local_epochs"] >= 0, "federation.local_epochs must be >= 0"),
            (v["federation.batch_size"] >= 2, "federation.batch_size must be >= 2"),
            (v["federation.method"] in METHODS, f"federation.method must be one of {METHODS}"),
            (v["federation.workers"] >= 1, "federation.workers must be >= 1"),
            (v["loss.tau"] > 0, "loss.tau must be positive"),
            (v["optim.lr"] >= 0, "optim.lr must be non-negative"),
            (0 <= v["optim.momentum"] < 1, "optim.momentum must lie in [0, 1)"),
            (v["optim.weight_decay"] >= 0, "optim.weight_decay must be non-negative"),
            (all(h > 0 for h in v["model.hidden"]), "model.hidden widths must be positive"),
            (v["model.embed_dim"] > 0 and v["model.head_hidden"] > 0, "model widths must be positive"),
            (0 <= v["model.ema_decay"] <= 1, "model.ema_decay must lie in [0, 1]"),
            (v["augment.padding"] >= 0, "augment.padding must be >= 0"),
            (0 <= v["augment.flip_prob"] <= 1, "augment.flip_prob must lie in [0, 1]"),
            (v["augment.scale_min"] <= v["augment.scale_max"], "augment scale range is empty"),
            (v["augment.shift_min"] <= v["augment.shift_max"], "augment shift range is empty"),
            (v["eval.linear_epochs"] >= 0 and v["eval.semi_epochs"] >= 0, "eval epochs must be >= 0"),
            (all(0 < r <= 1 for r in v["eval.label_ratios"]), "eval.label_ratios must lie in (0, 1]"),
            (v["output.checkpoint_every"] >= 0, "output.checkpoint_every must be >= 0"),
            (v["data.format"] in ("fxds", "csv"), "data.format must be fxds or csv"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)
        return self

    # -- views consumed by the library ------------------------------------------

    def federation(self) -> FederationConfig:
        v = self.values
        return FederationConfig(
            clients=v["partition.clients"], rounds=v["federation.rounds"],
            local_epochs=v["federation.local_epochs"], method=v["federation.method"],
            fedx=v["federation.fedx"], tau=v["loss.tau"], lr=v["optim.lr"],
            momentum=v["optim.momentum"], weight_decay=v["optim.weight_decay"],
            batch_size=v["federation.batch_size"], seed=v["federation.seed"],
            workers=v["federation.workers"], include_positive=v["federation.include_positive"],
            ema_decay=v["model.ema_decay"], reset_ema=v["federation.reset_ema"],
            augment_both=v["federation.augment_both"], float64=v["numerics.float64"])

    def augment_policy(self) -> AugmentPolicy | None:
        v = self.values
        if not v["augment.enabled"]:
            return None
        return AugmentPolicy(v["augment.padding"], v["augment.flip_prob"],
                             (v["augment.scale_min"], v["augment.scale_max"]),
                             (v["augment.shift_min"], v["augment.shift_max"]))

    def min_client_size(self) -> int:
        return self.values["partition.min_size"] or max(self.values["federation.batch_size"], 32)
