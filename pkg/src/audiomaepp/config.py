"""Run configuration: INI-style ``key = value`` sections, presets and flag overrides.

Precedence, lowest to highest: built-in defaults < preset < config file < command-line flags.
"""
from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

from .evalkit import ProbeConfig
from .model import PRESETS, ModelConfig
from .patching import PatchConfig

SCHEMA = {
    "model": {
        "preset": str, "d_model": int, "enc_layers": int, "enc_heads": int, "d_dec": int,
        "dec_layers": int, "dec_heads": int, "mask_ratio": float, "rope_encoder": bool,
        "rope_decoder": bool, "swiglu_pre_ln": bool, "patch_t": int, "patch_f": int,
        "input_mean": float, "input_std": float,
    },
    "optim": {
        "peak_lr": float, "weight_decay": float, "beta1": float, "beta2": float, "eps": float,
        "batch_size": int, "epochs": int, "warmup_epochs": int, "steps": int,
        "checkpoint_every": int, "fixed_masks": bool,
    },
    "probe": {
        "hidden": int, "lr_grid": str, "epochs": int, "loss_mode": str, "seeds": int,
    },
    "paths": {"data": str, "out": str, "checkpoint": str},
    "run": {"seed": int, "threads": int},
}


class ConfigError(ValueError):
    pass


def _parse_bool(v: str) -> bool:
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {v!r}")


def _coerce(section, key, value):
    try:
        kind = SCHEMA[section][key]
    except KeyError:
        raise ConfigError(f"unknown config key [{section}] {key}") from None
    if isinstance(value, str):
        if kind is bool:
            return _parse_bool(value)
        try:
            return kind(value)
        except ValueError as exc:
            raise ConfigError(f"[{section}] {key}: {exc}") from None
    return value


@dataclass
class RunConfig:
    values: dict = field(default_factory=lambda: {s: {} for s in SCHEMA})

    @classmethod
    def load(cls, path=None) -> "RunConfig":
        rc = cls()
        if path is None:
            return rc
        parser = configparser.ConfigParser()
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except (OSError, configparser.Error) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        for section in parser.sections():
            if section not in SCHEMA:
                raise ConfigError(f"unknown config section [{section}]")
            for key, value in parser.items(section):
                rc.values[section][key] = _coerce(section, key, value)
        return rc

    def set(self, section, key, value):
        if value is not None:
            self.values[section][key] = _coerce(section, key, value)

    def get(self, section, key, default=None):
        return self.values[section].get(key, default)

    @property
    def seed(self) -> int:
        s = self.get("run", "seed")
        if s is None:
            s = int(os.environ.get("AMPP_SEED", 0))
            self.values["run"]["seed"] = s
        return s

    def model_config(self) -> ModelConfig:
        m = self.values["model"]
        preset = m.get("preset", "desk")
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r} (choose from {', '.join(PRESETS)})")
        cfg = PRESETS[preset]
        if "d_dec" in m and "dec_heads" not in m:
            cfg = cfg.with_dec_dim(m["d_dec"])
        names = {f.name for f in fields(ModelConfig)}
        kw = {k: v for k, v in m.items() if k in names}
        patch = PatchConfig(patch_t=m.get("patch_t", cfg.patch.patch_t), patch_f=m.get("patch_f", cfg.patch.patch_f))
        try:
            return cfg.replace(patch=patch, **kw)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def record_model(self, cfg: ModelConfig) -> None:
        """Store every field of a resolved model config (for the echoed config file)."""
        m = self.values["model"]
        m.setdefault("preset", "desk")
        for f in fields(ModelConfig):
            value = getattr(cfg, f.name)
            if f.name == "patch":
                m["patch_t"], m["patch_f"] = value.patch_t, value.patch_f
            elif value is not None:
                m[f.name] = value

    def record_optim(self, optim, **extra) -> None:
        o = self.values["optim"]
        for f in fields(optim):
            if f.name in SCHEMA["optim"] and getattr(optim, f.name) is not None:
                o[f.name] = getattr(optim, f.name)
        o["peak_lr"] = optim.lr
        o.update({k: v for k, v in extra.items() if v is not None})

    def probe_config(self, seed: int = 0) -> ProbeConfig:
        p = self.values["probe"]
        kw = {}
        if "hidden" in p:
            kw["hidden"] = p["hidden"]
        if "epochs" in p:
            kw["epochs"] = p["epochs"]
        if "loss_mode" in p:
            kw["loss_mode"] = p["loss_mode"]
        if "lr_grid" in p:
            kw["lr_grid"] = tuple(float(v) for v in p["lr_grid"].replace(",", " ").split())
        return ProbeConfig(seed=seed, **kw)

    def write(self, path) -> None:
        """Echo the fully resolved configuration."""
        parser = configparser.ConfigParser()
        for section, vals in self.values.items():
            if vals:
                parser[section] = {k: str(v) for k, v in vals.items()}
        with open(Path(path), "w") as fh:
            parser.write(fh)
