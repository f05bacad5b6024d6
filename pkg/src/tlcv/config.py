"""Run configuration: TOML file -> validated, fully-defaulted nested dict.

Sections mirror the pipeline stages. Unknown sections or keys are rejected
with the line where they appear. ``--override section.key=value`` patches
scalar (or list) keys after loading, parsed with TOML value syntax.
"""

from __future__ import annotations

import copy
import hashlib
import json
import re
from pathlib import Path

import tomli

from .errors import ConfigError

MODELS = ("tlc", "tae", "vde", "deeptda", "tica", "lda")
_REQUIRED = object()

SCHEMA = {
    "seed": 0,
    "system": {
        "kind": _REQUIRED,
        "parameters": {},
        "mass": 1.0,
        "threshold": None,
    },
    "langevin": {"dt": 0.005, "gamma": 1.0, "temperature": 1.0},
    "data": {
        "n_trajs_per_basin": 5,
        "n_steps": 40000,
        "record_stride": 10,
        "tau_frames": 10,
        "exclude_transitions": True,
        "max_pairs": 0,
    },
    "model": {
        "name": "tlc",
        "input_mode": "",
        "lam": 0.1,
        "sigma": 0.05,
        "lr": 1e-3,
        "batch_size": 256,
        "n_iters": 5000,
        "ode_steps": 100,
        "encoder_hidden": [64, 64],
        "flow_hidden": [128, 128],
        "activation": "tanh",
        "beta_kl": 1e-3,
        "ac_weight": 1.0,
        "reg": 1e-10,
    },
    "projection": {"barrier": 8.0, "sigma": 0.1, "pace": 500, "total_steps": 400000, "record_stride": 100,
                   "seed_offset": 1000},
    "smd": {
        "cv": "model",
        "k": [10.0, 20.0, 30.0, 40.0, 50.0, 60.0, 70.0, 80.0, 90.0, 100.0],
        "horizon_steps": 2000,
        "n_replicas": 64,
        "record_stride": 10,
        "equilibration_steps": 2000,
        "hit_threshold": 0.2,
        "energy_margin": 2.0,
    },
    "opes": {
        "cv": "model",
        "pace": 500,
        "sigma": 0.1,
        "barrier": 8.0,
        "gamma": None,
        "total_steps": 200000,
        "record_stride": 100,
        "n_seeds": 4,
        "n_bins": 64,
        "burn_in_fraction": 0.15,
        "checkpoint_stride": 100,
    },
}

_TYPES = {bool: (bool,), int: (int,), float: (int, float), str: (str,), list: (list,), dict: (dict,)}


def _line_of(text: str | None, section: str | None, key: str):
    """1-based line where ``key`` is defined (inside ``[section]`` when given)."""
    if not text:
        return None
    current = None
    pat = re.compile(rf"^\s*{re.escape(key)}\s*=")
    for i, line in enumerate(text.splitlines(), 1):
        m = re.match(r"^\s*\[\s*([^\]]+?)\s*\]", line)
        if m:
            current = m.group(1)
            if section is None and current == key:
                return i
            continue
        if pat.match(line) and current == section:
            return i
    return None


def _check_type(value, default, where, text, section, key):
    if default is None or default is _REQUIRED or value is None:
        return value
    expected = type(default)
    if expected is list and isinstance(value, (int, float)) and not isinstance(value, bool):
        value = [value]
    if expected is float and isinstance(value, bool) or not isinstance(value, _TYPES[expected]):
        raise ConfigError(f"{where} must be {expected.__name__}, got {type(value).__name__}", key=where,
                          line=_line_of(text, section, key))
    return float(value) if expected is float else value


def validate(raw: dict, text: str | None = None) -> dict:
    cfg = {}
    for key in raw:
        if key not in SCHEMA:
            raise ConfigError(f"unknown key '{key}'", key=key, line=_line_of(text, None, key))
    for key, default in SCHEMA.items():
        if not isinstance(default, dict):
            cfg[key] = _check_type(raw.get(key, default), default, key, text, None, key)
            continue
        if key not in raw:
            if any(v is _REQUIRED for v in default.values()):
                raise ConfigError(f"missing required section [{key}]", key=key)
            cfg[key] = copy.deepcopy(default)
            continue
        section = raw[key]
        if not isinstance(section, dict):
            raise ConfigError(f"'{key}' must be a section", key=key, line=_line_of(text, None, key))
        out = {}
        for k in section:
            if k not in default:
                raise ConfigError(f"unknown key '{key}.{k}'", key=f"{key}.{k}", line=_line_of(text, key, k))
        for k, d in default.items():
            if k not in section:
                if d is _REQUIRED:
                    raise ConfigError(f"missing required key '{key}.{k}'", key=f"{key}.{k}",
                                      line=_line_of(text, None, key))
                out[k] = copy.deepcopy(d)
            else:
                out[k] = _check_type(section[k], d, f"{key}.{k}", text, key, k)
        cfg[key] = out
    _semantic_checks(cfg, text)
    return cfg


def _semantic_checks(cfg, text):
    from .systems import KINDS

    if cfg["system"]["kind"] not in KINDS:
        raise ConfigError(f"system.kind must be one of {KINDS}", key="system.kind",
                          line=_line_of(text, "system", "kind"))
    if cfg["model"]["name"] not in MODELS:
        raise ConfigError(f"model.name must be one of {MODELS}", key="model.name",
                          line=_line_of(text, "model", "name"))
    if cfg["model"]["input_mode"] not in ("", "aligned_coords", "pairwise_distances", "raw_coords"):
        raise ConfigError("model.input_mode is not a known input mode", key="model.input_mode",
                          line=_line_of(text, "model", "input_mode"))
    for sec in ("smd", "opes"):
        if cfg[sec]["cv"] not in ("model", "reference"):
            raise ConfigError(f"{sec}.cv must be 'model' or 'reference'", key=f"{sec}.cv",
                              line=_line_of(text, sec, "cv"))
    positive = [("langevin", "dt"), ("data", "n_steps"), ("data", "record_stride"), ("data", "tau_frames"),
                ("data", "n_trajs_per_basin"), ("model", "n_iters"), ("model", "batch_size"),
                ("smd", "horizon_steps"), ("smd", "n_replicas"), ("opes", "pace"), ("opes", "total_steps"),
                ("opes", "n_seeds"), ("opes", "record_stride")]
    for sec, k in positive:
        if not cfg[sec][k] > 0:
            raise ConfigError(f"{sec}.{k} must be positive", key=f"{sec}.{k}", line=_line_of(text, sec, k))
    if isinstance(cfg["smd"]["k"], (int, float)):
        cfg["smd"]["k"] = [float(cfg["smd"]["k"])]
    cfg["smd"]["k"] = [float(k) for k in cfg["smd"]["k"]]


def parse_override(item: str):
    if "=" not in item:
        raise ConfigError(f"override '{item}' is not of the form key=value")
    key, value = item.split("=", 1)
    key = key.strip()
    try:
        parsed = tomli.loads(f"v = {value.strip()}")["v"]
    except tomli.TOMLDecodeError:
        parsed = value.strip()
    return key.split("."), parsed


def apply_overrides(raw: dict, overrides) -> dict:
    raw = copy.deepcopy(raw)
    for item in overrides or ():
        path, value = parse_override(item)
        node = raw
        for p in path[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override '{item}' does not address a key", key=".".join(path))
        node[path[-1]] = value
    return raw


def load(path, overrides=(), seed=None) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    try:
        raw = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    raw = apply_overrides(raw, overrides)
    if seed is not None:
        raw["seed"] = seed
    return validate(raw, text)


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()
