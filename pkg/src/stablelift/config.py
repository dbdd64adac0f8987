"""Experiment configuration: YAML in, validated nested dict out."""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass

import yaml

COMMANDS = ("simulate", "phase-sweep", "pointprocess", "mixcheck", "induce", "density",
            "stable-sample")


class ConfigError(ValueError):
    """Validation failure; ``path`` is the dotted location of the offending field."""

    def __init__(self, path, msg):
        super().__init__(f"{path}: {msg}" if path else msg)
        self.path = path


@dataclass(frozen=True)
class Field:
    kind: type | tuple
    default: object = None
    required: bool = False
    choices: tuple | None = None


_NUM = (int, float)
_OBS = {
    "alpha": Field(_NUM),
    "x0": Field(_NUM),
    "a": Field(_NUM, 1.0),
    "terms": Field(list),
    "support": Field(list),
    "holder": Field(list),
    "variant": Field(str, choices=("i", "ii", "iii")),
}

SCHEMA = {
    "command": Field(str, required=True, choices=COMMANDS),
    "seed": Field(int, 0),
    "workers": Field(int, 1),
    "output": Field(str, "run"),
    "map": {"kind": Field(str, "doubling", choices=("doubling", "lsv")), "gamma": Field(_NUM)},
    "observable": _OBS,
    "simulate": {
        "n": Field(int, 100000), "samples": Field(int, 5000), "burn_in": Field(int, 4096),
        "centering": Field(str, "auto", choices=("auto", "mean", "none")),
        "expect_index": Field(_NUM), "tol_alpha": Field(_NUM, 0.07), "tol_ks": Field(_NUM, 0.05),
    },
    "phase_sweep": {
        "gammas": Field(list, [0.2, 0.4, 0.6, 0.75]), "alphas": Field(list, [0.8, 1.2, 1.5, 1.8]),
        "x0": Field(_NUM, 0.7), "n": Field(int, 100000), "samples": Field(int, 2000),
        "tol_alpha": Field(_NUM, 0.1), "tol_ks": Field(_NUM, 0.05),
        "require_pass": Field(bool, False),
    },
    "pointprocess": {
        "n": Field(int, 10 ** 6), "tau": Field(_NUM, 500.0), "threshold": Field(_NUM),
        "gap": Field(int), "method": Field(str, "runs", choices=("runs", "blocks")),
        "expect_theta": Field(_NUM), "tol_theta": Field(_NUM, 0.05),
    },
    "mixcheck": {
        "eps": Field(list, [0.5, 0.1, 0.02]), "n": Field(list, [10 ** 4, 10 ** 5, 10 ** 6]),
        "samples": Field(int, 10 ** 7), "psi": Field(_NUM, 0.75),
        "max_statistic": Field(_NUM),
    },
    "induce": {
        "x0": Field(_NUM, 0.75), "n": Field(int, 10000), "samples": Field(int, 1000),
        "count": Field(int, 100000), "identity_pairs": Field(int, 100),
        "identity_tol": Field(_NUM, 1e-8),
    },
    "density": {
        "bins": Field(int, 4096), "method": Field(str, "ulam", choices=("ulam", "histogram")),
        "samples": Field(int, 10 ** 6), "grading": Field(_NUM),
    },
    "stable_sample": {
        "alpha": Field(_NUM), "beta": Field(_NUM, 0.0), "scale": Field(_NUM, 1.0),
        "loc": Field(_NUM, 0.0), "m": Field(int, 10000), "fit": Field(bool, True),
    },
}


def _check_leaf(path, f: Field, v):
    if v is None:
        if f.required:
            raise ConfigError(path, "required field missing")
        return f.default
    kinds = f.kind if isinstance(f.kind, tuple) else (f.kind,)
    if isinstance(v, bool) and bool not in kinds:
        raise ConfigError(path, f"expected {'/'.join(k.__name__ for k in kinds)}, got bool")
    if not isinstance(v, kinds):
        if float in kinds and isinstance(v, int):
            pass
        else:
            raise ConfigError(path, f"expected {'/'.join(k.__name__ for k in kinds)}, "
                                    f"got {type(v).__name__}")
    if f.choices is not None and v not in f.choices:
        raise ConfigError(path, f"must be one of {list(f.choices)}, got {v!r}")
    return v


def _validate(node, schema, prefix=""):
    if not isinstance(node, dict):
        raise ConfigError(prefix, "expected a mapping")
    unknown = sorted(set(node) - set(schema))
    if unknown:
        raise ConfigError(f"{prefix}{unknown[0]}", "unknown key")
    out = {}
    for key, sub in schema.items():
        path = f"{prefix}{key}"
        if isinstance(sub, dict):
            out[key] = _validate(node.get(key) or {}, sub, path + ".")
        else:
            out[key] = _check_leaf(path, sub, node.get(key))
    return out


def validate(raw: dict) -> dict:
    """Resolved config with defaults filled in; raises ConfigError with a dotted path."""
    cfg = _validate(raw, SCHEMA)
    m = cfg["map"]
    if m["kind"] == "lsv":
        if m["gamma"] is None:
            raise ConfigError("map.gamma", "required for kind 'lsv'")
        if not 0.0 < m["gamma"] < 1.0:
            raise ConfigError("map.gamma", "must lie in (0, 1)")
    elif m["gamma"] not in (None, 0, 0.0):
        raise ConfigError("map.gamma", "only meaningful for kind 'lsv'")
    if cfg["workers"] < 1:
        raise ConfigError("workers", "must be >= 1")
    obs = cfg["observable"]
    needs_obs = cfg["command"] in ("simulate", "pointprocess", "mixcheck", "induce")
    if needs_obs and obs["variant"] is None:
        if obs["alpha"] is None:
            raise ConfigError("observable.alpha", "required field missing")
        if obs["terms"] is None and obs["x0"] is None:
            raise ConfigError("observable.x0", "give x0 or a terms list")
    if obs["variant"] is not None and (obs["alpha"] is None or obs["x0"] is None):
        raise ConfigError("observable.alpha" if obs["alpha"] is None else "observable.x0",
                          "required for a regime variant")
    if cfg["command"] == "simulate" and cfg["simulate"]["samples"] < 1000:
        raise ConfigError("simulate.samples", "stable fitting needs >= 1000 samples")
    if cfg["command"] == "stable-sample" and cfg["stable_sample"]["alpha"] is None:
        raise ConfigError("stable_sample.alpha", "required field missing")
    if obs["terms"] is not None:
        for i, t in enumerate(obs["terms"]):
            if not isinstance(t, dict) or set(t) - {"a", "x0"} or "x0" not in t:
                raise ConfigError(f"observable.terms[{i}]", "expected {a, x0}")
    if obs["alpha"] is not None and not 0.0 < obs["alpha"] < 2.0:
        raise ConfigError("observable.alpha", "must lie in (0, 2)")
    return cfg


def set_path(raw: dict, dotted: str, value):
    node = raw
    keys = dotted.split(".")
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(dotted, "cannot descend into a leaf")
    node[keys[-1]] = value


def parse_override(text: str):
    if "=" not in text:
        raise ConfigError(text, "override must look like dotted.path=value")
    key, val = text.split("=", 1)
    return key.strip(), yaml.safe_load(val)


def load(path, overrides=()) -> dict:
    """Read YAML (or a manifest JSON), apply ``key=value`` overrides, validate."""
    try:
        with open(path) as fh:
            text = fh.read()
        try:
            raw = json.loads(text)  # manifests; YAML 1.1 would read 1e-08 as a string
        except json.JSONDecodeError:
            raw = yaml.safe_load(text)
    except OSError as exc:
        raise ConfigError("", f"cannot read {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError("", f"cannot parse {path}: {exc}") from exc
    raw = {} if raw is None else raw
    if isinstance(raw, dict) and "config" in raw and "toolkit_version" in raw:
        raw = raw["config"]
    raw = copy.deepcopy(raw)
    for o in overrides:
        k, v = parse_override(o)
        set_path(raw, k, v)
    return validate(raw)


def dumps(cfg: dict) -> str:
    return json.dumps(cfg, indent=2, sort_keys=True)
