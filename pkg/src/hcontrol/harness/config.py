"""Experiment configuration: one JSON document, every default materialised."""

from __future__ import annotations

import copy
import json
from pathlib import Path
from typing import Any

from hcontrol.flowmodel import TrainConfig
from hcontrol.guidance import GuidanceSpec

TASKS = ("train", "toy-fig", "sweep", "gibbs-oracle", "locality", "ablate")
SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


def toy_methods() -> dict[str, dict]:
    """Default method set of the checkerboard comparison."""
    return {
        "dps": GuidanceSpec("dps", jacobian_mode="full_vjp").to_dict(),
        "tfg_ugd": GuidanceSpec("tfg_ugd", tfg={"n_recur": 2, "n_iter": 1, "mu": 0.5, "rho": 0.5}).to_dict(),
        "h_control": GuidanceSpec(
            "h_control",
            hcontrol={"J_max": 4, "outer_mode": "soft", "patch_sizes": (1, 1, 1), "freeze": False},
        ).to_dict(),
    }


DEFAULTS: dict[str, Any] = {
    "task": None,
    "out_dir": "out",
    "seed": 0,
    "seeds": 10,
    "samples_per_seed": 500,
    "steps": 50,
    "threads": 1,
    "band_edges": [0.0, 0.33, 0.66, 1.0],
    "density": {
        "kind": "checkerboard",
        "y_obs": 0.5,
        "sigma_y": 0.2,
        "shape": [4, 4, 4],
        "beta1": 0.3,
        "beta2": 0.1,
        "tau_d": 5.0,
    },
    "model": {
        "backend": "mlp",
        "weights": "weights.bin",
        "dtype": "float32",
        "hit_samples": 5000,
    },
    "train": None,
    "methods": None,
    "sweep": {
        "J": [0, 1, 2, 4, 8, 16],
        "n_recur": [1, 2, 3, 4, 5, 6],
        "n_iter": 1,
        "mu": 0.5,
        "rho": 0.5,
    },
    "gibbs": {
        "sigma": 0.5,
        "observed_fraction": 0.5,
        "chains": 20000,
        "burn_in": 50,
        "ed_samples": 1000,
        "permutations": 200,
    },
    "locality": {
        "shape": [6, 6, 6],
        "beta1": 0.4,
        "beta2": 0.2,
        "tau_d": 7.5,
        "samples": 2000,
        "sigmas": [0.1, 0.3, 0.5, 0.7, 0.9],
    },
    "ablate": {
        "J_max": 10,
        "kappa": 0.1,
        "nu": 0.9,
        "patch_sizes": [2, 2, 2],
        "observed_fraction": 0.25,
        "window": [0, 10],
        "samples": 2000,
        "repeats": 200,
        "oracle_samples": 2000,
    },
}


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in base:
            raise ConfigError(f"unknown config field {path}{key!r}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            out[key] = _merge(base[key], value, f"{path}{key}.")
        else:
            out[key] = copy.deepcopy(value)
    return out


def resolve(doc: dict[str, Any]) -> dict[str, Any]:
    """Fill every unset field with its default and validate the result."""
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    cfg = _merge(DEFAULTS, doc)
    if cfg["task"] not in TASKS:
        raise ConfigError(f"task must be one of {TASKS}, got {cfg['task']!r}")
    if int(cfg["seeds"]) < 1 or int(cfg["samples_per_seed"]) < 1 or int(cfg["steps"]) < 1:
        raise ConfigError("seeds, samples_per_seed and steps must be >= 1")
    try:
        train = TrainConfig(**(cfg["train"] or {}))
    except TypeError as exc:
        raise ConfigError(f"bad train block: {exc}") from exc
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    cfg["train"] = vars(train).copy()
    methods = toy_methods()
    if cfg["methods"]:
        for name, spec in cfg["methods"].items():
            methods[name] = spec
    try:
        cfg["methods"] = {k: GuidanceSpec.from_dict(v).to_dict() for k, v in methods.items()}
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad method spec: {exc}") from exc
    if cfg["model"]["backend"] not in ("mlp", "gaussian"):
        raise ConfigError(f"unknown backend {cfg['model']['backend']!r}")
    if cfg["density"]["kind"] not in ("checkerboard", "gmrf"):
        raise ConfigError(f"unknown density {cfg['density']['kind']!r}")
    return cfg


def load(path) -> dict[str, Any]:
    try:
        text = Path(path).read_text()
    except OSError:
        raise
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return doc
