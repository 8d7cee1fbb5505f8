"""Experiment configuration: sectioned key=value files with a fixed schema.

Example::

    [experiment]
    seed = 0
    out = runs/demo

    [model]
    mixers = pool, window, global

    [attention]
    modes = baseline, ram
    thresholds = 0.3

    [attack]
    methods = dag, pgd
    targets = permute, strip

List-valued keys take comma-separated values; each one is a sweep axis.
Unknown sections or keys are rejected.  ``resolved_text`` renders every key
(defaults included) in a canonical order; its hash, minus the output
directory, identifies the run.
"""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

from .attacks import METHODS
from .attention import MODES
from .data import LOCATIONS
from .model import MIXERS

TARGET_MODES = ("permute", "strip")


class ConfigError(ValueError):
    pass


def _bool(v: str) -> bool:
    low = v.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {v!r}")


def _list(item: Callable, choices=None) -> Callable:
    def parse(v: str) -> tuple:
        out = tuple(item(s.strip()) for s in v.split(",") if s.strip())
        if not out:
            raise ConfigError("empty list")
        if choices is not None:
            bad = [s for s in out if s not in choices]
            if bad:
                raise ConfigError(f"unknown value(s) {bad}; expected from {list(choices)}")
        return out
    return parse


def _choice(choices) -> Callable:
    def parse(v: str) -> str:
        if v not in choices:
            raise ConfigError(f"unknown value {v!r}; expected one of {list(choices)}")
        return v
    return parse


def _optional_float(v: str) -> float | None:
    return None if v.strip().lower() in ("", "default", "none") else float(v)


def _adversarial(v: str) -> str:
    v = v.strip().lower()
    if v == "off" or v == "pgd" or (v.startswith("pgd") and v[3:].isdigit() and int(v[3:]) >= 0):
        return v
    raise ConfigError(f"adversarial must be 'off', 'pgd' or 'pgdN', got {v!r}")


def _fmt(value: Any) -> str:
    if isinstance(value, tuple):
        return ", ".join(_fmt(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return "default"
    if isinstance(value, float):
        return repr(value)
    return str(value)


# section -> key -> (parser, default)
SCHEMA: dict[str, dict[str, tuple[Callable, Any]]] = {
    "experiment": {
        "seed": (int, 0),
        "out": (str, "runs/default"),
    },
    "data": {
        "train_count": (int, 256),
        "val_count": (int, 64),
        "img_h": (int, 32),
        "img_w": (int, 32),
        "classes": (int, 8),
        "min_shapes": (int, 2),
        "max_shapes": (int, 5),
        "noise": (float, 0.02),
        "tint": (float, 0.4),
    },
    "model": {
        "mixers": (_list(str, MIXERS), ("global",)),
        "patch": (int, 4),
        "embed_dim": (int, 32),
        "layers": (int, 2),
        "heads": (int, 2),
        "window": (int, 4),
        "shift": (_bool, True),
        "pool": (int, 3),
    },
    "attention": {
        "modes": (_list(str, MODES), ("baseline",)),
        "thresholds": (_list(float), (0.3,)),
        "dropouts": (_list(float), (0.5,)),
        "temperature": (float, 2.0),
        "rad_at_eval": (_bool, True),
    },
    "train": {
        "lr": (float, 3e-3),
        "epochs": (int, 20),
        "batch_size": (int, 16),
        "adversarial": (_adversarial, "off"),
        "adv_gamma": (float, 0.1),
        "adv_patch": (int, 8),
        "adv_location": (_choice(LOCATIONS), "lower_right"),
    },
    "attack": {
        "methods": (_list(str, METHODS), ("dag",)),
        "targets": (_list(str, TARGET_MODES), ("permute",)),
        "sizes": (_list(int), (8,)),
        "locations": (_list(str, LOCATIONS), ("lower_right",)),
        "steps": (int, 400),
        "gamma": (_optional_float, None),
        "alpha": (float, 0.5),
        "eot_samples": (int, 4),
        "eot_shift": (int, 2),
        "eot_noise": (float, 0.01),
        "stripes": (int, 4),
        "images": (int, 20),
        "save_images": (_bool, False),
    },
    "rf": {
        "q": (float, 0.95),
        "images": (int, 64),
        "stochastic": (_bool, False),
    },
}


@dataclass(frozen=True)
class ExperimentConfig:
    values: dict  # section -> key -> parsed value

    def __getitem__(self, section: str) -> dict:
        return self.values[section]

    @property
    def seed(self) -> int:
        return self.values["experiment"]["seed"]

    @property
    def out(self) -> Path:
        return Path(self.values["experiment"]["out"])

    def replace(self, section: str, **kw) -> "ExperimentConfig":
        vals = {s: dict(v) for s, v in self.values.items()}
        for k, v in kw.items():
            if k not in SCHEMA[section]:
                raise ConfigError(f"unknown key {section}.{k}")
            vals[section][k] = v
        cfg = ExperimentConfig(vals)
        cfg.validate()
        return cfg

    def resolved_text(self) -> str:
        lines = []
        for section, keys in SCHEMA.items():
            lines.append(f"[{section}]")
            lines += [f"{k} = {_fmt(self.values[section][k])}" for k in keys]
            lines.append("")
        return "\n".join(lines)

    def config_hash(self) -> str:
        """Identity of the experiment; the output directory is not part of it."""
        lines = [ln for ln in self.resolved_text().splitlines() if not ln.startswith("out = ")]
        return hashlib.sha256("\n".join(lines).encode("utf-8")).hexdigest()[:16]

    def write_resolved(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.resolved_text(), encoding="utf-8")
        return path

    def validate(self) -> None:
        d, a, t = self["data"], self["attack"], self["train"]
        if d["train_count"] < 0 or d["val_count"] < 0:
            raise ConfigError("dataset counts must be non-negative")
        if a["steps"] < 0 or a["images"] < 1:
            raise ConfigError("attack.steps must be >= 0 and attack.images >= 1")
        if a["gamma"] is not None and not a["gamma"] > 0:
            raise ConfigError("attack.gamma must be positive")
        if any(s < 1 for s in a["sizes"]):
            raise ConfigError("patch sizes must be positive")
        if not 0.0 < self["rf"]["q"] <= 1.0:
            raise ConfigError("rf.q must lie in (0, 1]")
        if not t["lr"] > 0:
            raise ConfigError("train.lr must be positive")
        att = self["attention"]
        if any(not 0.0 < v < 1.0 for v in att["thresholds"]):
            raise ConfigError("thresholds must lie in (0, 1)")
        if any(not 0.0 <= v < 1.0 for v in att["dropouts"]):
            raise ConfigError("dropouts must lie in [0, 1)")


def default_config() -> ExperimentConfig:
    return ExperimentConfig({s: {k: d for k, (_, d) in keys.items()} for s, keys in SCHEMA.items()})


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None, default_section="__none__")
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    values = default_config().values
    for section in cp.sections():
        if section not in SCHEMA:
            raise ConfigError(f"{source}: unknown section [{section}]")
        for key, raw in cp.items(section):
            if key not in SCHEMA[section]:
                raise ConfigError(f"{source}: unknown key {section}.{key}")
            parser = SCHEMA[section][key][0]
            try:
                values[section][key] = parser(raw)
            except (ValueError, ConfigError) as exc:
                raise ConfigError(f"{source}: {section}.{key}: {exc}") from exc
    cfg = ExperimentConfig(values)
    cfg.validate()
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, str(path))
