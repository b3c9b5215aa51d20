"""Run configuration: one JSON document, validated strictly against known keys."""
from __future__ import annotations

import copy
import json
from pathlib import Path

CONFIG_VERSION = 1


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "version": CONFIG_VERSION,
    "seed": 0,
    "out": "run",
    "data": {"dir": None, "time_unit": "months"},
    "simulate": {
        "n": 2000, "k_groups": 2, "m_groups": 2, "baseline_rates": [0.1, 0.4],
        "effect_betas": [1.0, -1.0], "censor_rate": 0.3, "noise_sd": 0.5, "seed": None,
        "dims": {"clinical": 16, "paraclinical": 16, "demographic": 4, "omics": [64, 64]},
        "treat_prob": 0.5,
    },
    "preprocess": {"transforms": {}, "default": "zscore", "variance_threshold": 1e-8, "rare_min_count": 5},
    "split": {"fractions": [0.7, 0.15, 0.15]},
    "model": {
        "n_baseline": 2, "n_response": 2, "n_bins": 20, "d_pre": 256, "n_experts": 4, "top_k": 2,
        "embed_dim": 64, "n_heads": 4, "dropout": 0.1, "lambda_aux": 0.01, "risk_input": "logits",
    },
    "phase1": {"lr": 5e-4, "weight_decay": 1e-5, "batch_size": 128, "epochs": 200, "patience": 10},
    "phase2": {"lr": 0.01, "epochs": 20, "batch_size": 100, "restore_best": True},
    "bounds": {"k_min": 1, "k_max": 5, "m_allowed": [2, 3]},
    "eval": {"grid_points": 100},
    "effects": {"horizon": None, "hopkins_fraction": 0.1},
}

# sections whose values are free-form mappings rather than fixed keys
_OPEN = {("preprocess", "transforms"), ("simulate", "dims")}


def _merge(base: dict, update: dict, path=()) -> dict:
    out = copy.deepcopy(base)
    for key, value in update.items():
        here = path + (key,)
        if key not in base:
            raise ConfigError(f"unknown config key {'.'.join(here)!r}")
        if isinstance(base[key], dict) and here not in _OPEN:
            if not isinstance(value, dict):
                raise ConfigError(f"config key {'.'.join(here)!r} must be an object")
            out[key] = _merge(base[key], value, here)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(config: dict, assignment: str) -> dict:
    """Apply ``a.b.c=value``; the value is parsed as JSON when possible."""
    if "=" not in assignment:
        raise ConfigError(f"--set expects path=value, got {assignment!r}")
    path, raw = assignment.split("=", 1)
    keys = path.strip().split(".")
    update = _parse_value(raw)
    for key in reversed(keys):
        update = {key: update}
    return _merge(config, update)


def validate(config: dict) -> dict:
    if config.get("version") != CONFIG_VERSION:
        raise ConfigError(f"unsupported config version {config.get('version')!r}")
    seed = config["seed"]
    if not isinstance(seed, int) or not 0 <= seed < 2**64:
        raise ConfigError("seed must be an unsigned 64-bit integer")
    m = config["model"]
    for key in ("n_baseline", "n_response", "n_bins", "d_pre", "n_experts", "top_k", "embed_dim", "n_heads"):
        if not isinstance(m[key], int) or m[key] < 1:
            raise ConfigError(f"model.{key} must be a positive integer")
    if m["top_k"] > m["n_experts"]:
        raise ConfigError("model.top_k exceeds model.n_experts")
    if m["embed_dim"] % m["n_heads"]:
        raise ConfigError("model.embed_dim must be divisible by model.n_heads")
    if m["n_bins"] < 2:
        raise ConfigError("model.n_bins must be >= 2")
    b = config["bounds"]
    if not b["k_min"] <= m["n_baseline"] <= b["k_max"]:
        raise ConfigError(f"model.n_baseline={m['n_baseline']} outside bounds [{b['k_min']}, {b['k_max']}]")
    if m["n_response"] not in b["m_allowed"]:
        raise ConfigError(f"model.n_response={m['n_response']} not in allowed {b['m_allowed']}")
    if m["risk_input"] not in ("logits", "x", "none"):
        raise ConfigError("model.risk_input must be 'logits', 'x' or 'none'")
    for phase in ("phase1", "phase2"):
        p = config[phase]
        if p["lr"] <= 0 or p["epochs"] < 0:
            raise ConfigError(f"{phase}: lr must be > 0 and epochs >= 0")
        if p["batch_size"] is not None and p["batch_size"] < 1:
            raise ConfigError(f"{phase}.batch_size must be positive or null (full batch)")
    fr = config["split"]["fractions"]
    if not fr or any(f <= 0 for f in fr) or abs(sum(fr) - 1.0) > 1e-9:
        raise ConfigError("split.fractions must be positive and sum to 1")
    return config


def load_config(path=None, overrides=(), seed=None, out=None, require_data: bool = False) -> dict:
    config = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                user = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError("config must be a JSON object")
        config = _merge(config, user)
    for assignment in overrides:
        config = apply_override(config, assignment)
    if seed is not None:
        config["seed"] = int(seed)
    if out is not None:
        config["out"] = str(out)
    validate(config)
    if require_data:
        d = config["data"]["dir"]
        if d is None or not Path(d).is_dir():
            raise ConfigError(f"data.dir {d!r} does not exist")
    return config


def estimator_params(config: dict) -> dict:
    m, p1, p2 = config["model"], config["phase1"], config["phase2"]
    return dict(m, phase1_lr=p1["lr"], phase1_weight_decay=p1["weight_decay"],
                phase1_batch_size=p1["batch_size"], phase1_epochs=p1["epochs"], patience=p1["patience"],
                phase2_lr=p2["lr"], phase2_epochs=p2["epochs"], phase2_batch_size=p2["batch_size"],
                phase2_restore_best=p2["restore_best"],
                random_state=config["seed"])
