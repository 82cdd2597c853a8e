"""Experiment configuration: shipped YAML templates, user overrides, validation and hashing."""

from __future__ import annotations

import copy
import hashlib
import json
from importlib import resources
from pathlib import Path

import yaml

EXPERIMENTS = ("fig1-demo", "linear-singular", "linear-bemporad", "linear-quadcon", "cstr")


class ConfigError(ValueError):
    pass


def template(experiment: str) -> dict:
    if experiment not in EXPERIMENTS:
        raise ConfigError(f"experiment: unknown value {experiment!r}; expected one of {', '.join(EXPERIMENTS)}")
    text = resources.files("explicit_mpc").joinpath("configs", f"{experiment}.yaml").read_text()
    return yaml.safe_load(text)


def _merge(base, override, path=""):
    out = copy.deepcopy(base)
    for key, val in override.items():
        here = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"{here}: unknown key")
        ref = base[key]
        if isinstance(ref, dict):
            if not isinstance(val, dict):
                raise ConfigError(f"{here}: expected a mapping, got {type(val).__name__}")
            out[key] = _merge(ref, val, here)
        else:
            out[key] = _coerce(ref, val, here)
    return out


def _coerce(ref, val, path):
    if isinstance(ref, bool):
        if not isinstance(val, bool):
            raise ConfigError(f"{path}: expected true/false, got {val!r}")
        return val
    if isinstance(ref, int) and not isinstance(ref, bool):
        if isinstance(val, bool) or not isinstance(val, int):
            raise ConfigError(f"{path}: expected an integer, got {val!r}")
        return val
    if isinstance(ref, float):
        if isinstance(val, bool) or not isinstance(val, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {val!r}")
        return float(val)
    if isinstance(ref, str):
        if not isinstance(val, str):
            raise ConfigError(f"{path}: expected a string, got {val!r}")
        return val
    if isinstance(ref, list):
        if not isinstance(val, list):
            raise ConfigError(f"{path}: expected a list, got {val!r}")
        return val
    return val


def _check(cfg: dict):
    """Semantic checks beyond types."""
    e = cfg["experiment"]
    if cfg["seed"] < 0:
        raise ConfigError("seed: must be nonnegative")
    emb = cfg.get("embedding")
    if emb:
        for k in ("c_in", "c_fn"):
            if emb[k] <= 0:
                raise ConfigError(f"embedding.{k}: must be positive")
        if emb["policy_prefix"] < 1 or emb["policy_prefix"] > cfg["problem"]["horizon"]:
            raise ConfigError("embedding.policy_prefix: must lie in [1, problem.horizon]")
    if e == "cstr":
        p = cfg["problem"]
        if p["u_min"] >= p["u_max"]:
            raise ConfigError("problem.u_min: must be below problem.u_max")
        n_rows = cfg["sampling"]["n_init"] * cfg["sampling"]["rollout"]
        if not 0 < cfg["split"]["n_train"] < n_rows:
            raise ConfigError(f"split.n_train: must lie in (0, {n_rows})")
        for tag in cfg["fit"]["parametrizations"]:
            if tag not in ("alpha", "beta", "gamma"):
                raise ConfigError(f"fit.parametrizations: unknown parametrization {tag!r}")
        s = cfg["simulate"]
        if s["sigma"] < 0:
            raise ConfigError("simulate.sigma: must be nonnegative")
        if s["stage1"] not in ("gp", "mlp") or s["stage2"] not in ("poly", "mlp"):
            raise ConfigError("simulate.stage1/stage2: expected gp|mlp and poly|mlp")
        if s["noise_mode"] not in ("disturbance", "measurement"):
            raise ConfigError("simulate.noise_mode: expected disturbance or measurement")
    if e.startswith("linear") and cfg["grid"]["n"] < 2:
        raise ConfigError("grid.n: must be at least 2")


def load_config(experiment: str | None = None, path=None, seed: int | None = None) -> dict:
    """Template for ``experiment`` overlaid with the YAML file at ``path``.

    If only ``path`` is given, its ``experiment`` key selects the template.
    """
    override = {}
    if path is not None:
        try:
            override = yaml.safe_load(Path(path).read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
        if not isinstance(override, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    name = experiment or override.get("experiment")
    if name is None:
        raise ConfigError("experiment: not given on the command line or in the config file")
    if override.get("experiment", name) != name:
        raise ConfigError(f"experiment: config file says {override['experiment']!r}, command line says {name!r}")
    cfg = _merge(template(name), override)
    if seed is not None:
        cfg["seed"] = int(seed)
    _check(cfg)
    return cfg


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]
