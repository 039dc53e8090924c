"""Experiment configuration: a strict JSON schema plus semantic checks.

Structural problems (unknown keys, wrong types) come from the JSON schema,
value problems from :func:`_semantic_checks`; all of them are collected and
raised together in one :class:`ConfigError`.
"""

from __future__ import annotations

import copy
import json
import math
from pathlib import Path
from typing import Any, Optional

import jsonschema

from .errors import ConfigError
from .exprparse import CoefficientField, ExprSyntaxError, constant_value, parse
from .levy import JumpNoiseSpec, LevyMeasureSpec, SubordinatorSpec

CONFIG_PREFIX = "# config: "

_NUM = {"type": "number"}
_POS_INT = {"type": "integer"}
_STR = {"type": "string"}


def _obj(props, required=()):
    return {"type": "object", "properties": props, "required": list(required),
            "additionalProperties": False}


SCHEMA = _obj({
    "name": _STR,
    "subordinator": _obj({
        "family": {"enum": ["identity", "one_sided_stable", "tempered_stable"]},
        "alpha": _NUM,
        "lambda": _NUM,
    }, ["family"]),
    "noise": {"oneOf": [{"type": "null"}, _obj({
        "family": {"enum": ["symmetric_stable", "truncated_symmetric_stable",
                            "one_sided_stable", "tempered_stable"]},
        "alpha": _NUM,
        "lambda": _NUM,
        "r_max": _NUM,
        "r_min": _NUM,
        "jump_cutoff": _NUM,
        "small_jump_cutoff": {"type": ["number", "null"]},
    }, ["family", "alpha"])]},
    "coefficients": _obj({"F": _STR, "sigma": _STR, "h": _STR}),
    "grid": _obj({
        "x_min": _NUM, "x_max": _NUM, "n_x": _POS_INT,
        "dgamma": _NUM, "dt": _NUM, "t_end": _NUM,
        "times": {"type": "array", "items": _NUM},
    }, ["x_min", "x_max", "n_x", "t_end"]),
    "monte_carlo": _obj({
        "n_paths": _POS_INT,
        "seed": _POS_INT,
        "density": {"enum": ["kde", "histogram"]},
        "bandwidth": {"type": ["number", "null"]},
    }),
    "solver": _obj({
        "variant": {"enum": ["auto", "no_jump", "stable_jump", "symmetric_jump", "general_series"]},
        "scheme": {"enum": ["explicit", "implicit"]},
        "series_order": _POS_INT,
        "initial": {"enum": ["delta", "gaussian"]},
        "memory": {"enum": ["auto", "grunwald_letnikov", "convolution", "product_integration"]},
        "talbot_nodes": _POS_INT,
        "jump_form": {"enum": ["pointwise", "adjoint"]},
        "stable_sign": {"enum": ["absolute", "signed"]},
    }),
    "thresholds": _obj({
        "l1": {"type": ["number", "null"]},
        "ks": {"type": ["number", "null"]},
        "moment": {"type": ["number", "null"]},
    }),
    "sweep": {"type": "object", "additionalProperties": {"type": "array", "minItems": 1}},
    "output_dir": _STR,
}, ["subordinator", "grid"])

DEFAULTS = {
    "name": "experiment",
    "noise": None,
    "coefficients": {"F": "0", "sigma": "0", "h": "0"},
    "grid": {"dgamma": 1e-3, "dt": 1e-3},
    "monte_carlo": {"n_paths": 10000, "seed": 0, "density": "kde", "bandwidth": None},
    "solver": {"variant": "auto", "scheme": "implicit", "series_order": 6,
               "initial": "delta", "memory": "auto", "talbot_nodes": 32,
               "jump_form": "pointwise", "stable_sign": "absolute"},
    "thresholds": {"l1": None, "ks": None, "moment": None},
    "sweep": {},
    "output_dir": "out",
}
_NOISE_DEFAULTS = {"lambda": 0.0, "r_max": math.inf, "r_min": 0.0, "jump_cutoff": 1.0,
                   "small_jump_cutoff": None}


def _merge(base, extra):
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "sweep":
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _path(err) -> str:
    parts = [str(p) for p in err.absolute_path]
    if err.validator == "additionalProperties":
        extra = sorted(set(err.instance) - set(err.schema.get("properties", {})))
        parts += extra[:1]
    if err.validator == "required":
        missing = err.message.split("'")[1]
        parts.append(missing)
    return ".".join(parts) or "<root>"


def _semantic_checks(cfg) -> list:
    bad = []

    def need(cond, key, msg):
        if not cond:
            bad.append((key, msg))

    sub = cfg["subordinator"]
    fam = sub["family"]
    if fam != "identity":
        a = sub.get("alpha")
        need(a is not None and 0 < a < 1, "subordinator.alpha", "subordinator α must lie in (0,1)")
    if fam == "tempered_stable":
        need(sub.get("lambda", 0) > 0, "subordinator.lambda", "tempering λ must be positive")

    noise = cfg["noise"]
    if noise is not None:
        nf, a = noise["family"], noise["alpha"]
        if nf in ("one_sided_stable", "tempered_stable"):
            need(0 < a < 1, "noise.alpha", "noise α must lie in (0,1) for one-sided families")
        else:
            need(0 < a < 2, "noise.alpha", "noise α must lie in (0,2)")
        if nf == "tempered_stable":
            need(noise["lambda"] > 0, "noise.lambda", "tempering λ must be positive")
        if nf == "truncated_symmetric_stable":
            need(noise["r_max"] > 0 and math.isfinite(noise["r_max"]), "noise.r_max",
                 "r_max must be positive and finite")
            need(0 <= noise["r_min"] < noise["r_max"], "noise.r_min", "need 0 <= r_min < r_max")
        need(noise["jump_cutoff"] > 0, "noise.jump_cutoff", "jump_cutoff must be positive")
        eps = noise["small_jump_cutoff"]
        need(eps is None or 0 < eps < noise["jump_cutoff"], "noise.small_jump_cutoff",
             "small_jump_cutoff must lie in (0, jump_cutoff)")

    for key, src in cfg["coefficients"].items():
        try:
            parse(src)
        except ExprSyntaxError as exc:
            bad.append((f"coefficients.{key}", str(exc).splitlines()[0]))

    g = cfg["grid"]
    need(g["x_max"] > g["x_min"], "grid.x_max", "x_max must exceed x_min")
    need(g["n_x"] >= 5, "grid.n_x", "n_x must be at least 5")
    for key in ("dgamma", "dt", "t_end"):
        need(g[key] > 0, f"grid.{key}", f"{key} must be positive")
    times = g.get("times") or []
    need(len(times) > 0, "grid.times", "at least one observation time")
    need(all(0 < t <= g["t_end"] for t in times), "grid.times", "observation times must lie in (0, t_end]")
    need(list(times) == sorted(set(times)), "grid.times", "observation times must be strictly increasing")

    mc = cfg["monte_carlo"]
    need(mc["n_paths"] >= 1, "monte_carlo.n_paths", "n_paths must be at least 1")
    need(0 <= mc["seed"] < 2 ** 64, "monte_carlo.seed", "seed must fit in 64 unsigned bits")
    need(mc["bandwidth"] is None or mc["bandwidth"] > 0, "monte_carlo.bandwidth",
         "bandwidth must be positive")

    s = cfg["solver"]
    need(2 <= s["series_order"] <= 12, "solver.series_order", "series_order must lie in [2, 12]")
    need(s["talbot_nodes"] >= 8, "solver.talbot_nodes", "talbot_nodes must be at least 8")
    v = s["variant"]
    if v == "stable_jump":
        need(noise is not None and noise["family"] == "symmetric_stable", "solver.variant",
             "stable_jump needs symmetric_stable noise")
    if v == "symmetric_jump":
        need(noise is not None and noise["family"] in ("symmetric_stable", "truncated_symmetric_stable"),
             "solver.variant", "symmetric_jump needs a symmetric noise measure")
    if v == "general_series":
        need(noise is not None, "solver.variant", "general_series needs a noise measure")
    if noise is not None and noise["family"] == "symmetric_stable" and v in ("auto", "stable_jump"):
        need(noise["alpha"] != 1, "noise.alpha", "the stable-jump solver excludes α = 1")
    if s["memory"] == "grunwald_letnikov":
        need(sub["family"] != "tempered_stable", "solver.memory",
             "Grunwald-Letnikov weights need a stable or identity subordinator")
    need(cfg["thresholds"]["moment"] is None or finite_variance(cfg), "thresholds.moment",
         "second-moment checks need noise with finite variance")
    for key, val in cfg["thresholds"].items():
        need(val is None or val >= 0, f"thresholds.{key}", "thresholds must be nonnegative")
    return bad


def validate(raw: dict) -> dict:
    """Fill defaults and validate; returns the canonical config dict."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object", [("<root>", "not an object")])
    errors = sorted(jsonschema.Draft7Validator(SCHEMA).iter_errors(raw), key=lambda e: list(e.absolute_path))
    if errors:
        viol = [(_path(e), e.message) for e in errors]
        raise ConfigError("invalid config:\n" + "\n".join(f"  {k}: {m}" for k, m in viol), viol)
    cfg = _merge(DEFAULTS, raw)
    if cfg["noise"] is not None:
        cfg["noise"] = _merge(_NOISE_DEFAULTS, cfg["noise"])
    cfg["grid"].setdefault("times", [cfg["grid"]["t_end"]])
    sub = cfg["subordinator"]
    if sub["family"] == "identity":
        sub.setdefault("alpha", 1.0)
    sub.setdefault("lambda", 0.0)
    viol = _semantic_checks(cfg)
    if viol:
        raise ConfigError("invalid config:\n" + "\n".join(f"  {k}: {m}" for k, m in viol), viol)
    return _floats(cfg)


def _floats(cfg):
    g = cfg["grid"]
    for key in ("x_min", "x_max", "dgamma", "dt", "t_end"):
        g[key] = float(g[key])
    g["times"] = [float(t) for t in g["times"]]
    for sec in ("subordinator",):
        for key in ("alpha", "lambda"):
            cfg[sec][key] = float(cfg[sec][key])
    if cfg["noise"] is not None:
        for key in ("alpha", "lambda", "r_max", "r_min", "jump_cutoff"):
            cfg["noise"][key] = float(cfg["noise"][key])
    return cfg


def _json_default(v):
    raise TypeError(f"not serialisable: {v!r}")


def canonical_json(cfg: dict, indent: Optional[int] = None) -> str:
    """Deterministic serialisation; infinite r_max is written as the string "inf"."""
    def fix(o):
        if isinstance(o, float) and math.isinf(o):
            return "inf" if o > 0 else "-inf"
        if isinstance(o, dict):
            return {k: fix(v) for k, v in o.items()}
        if isinstance(o, list):
            return [fix(v) for v in o]
        return o
    seps = (",", ":") if indent is None else (",", ": ")
    return json.dumps(fix(cfg), sort_keys=True, indent=indent, separators=seps,
                      ensure_ascii=False, allow_nan=False, default=_json_default)


def _unfix(o):
    if isinstance(o, dict):
        return {k: (math.inf if k == "r_max" and v == "inf" else _unfix(v)) for k, v in o.items()}
    if isinstance(o, list):
        return [_unfix(v) for v in o]
    return o


def loads(text: str) -> dict:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}", [("<root>", str(exc))]) from exc
    return validate(_unfix(raw))


def load_config(path) -> dict:
    """Load a JSON config, or the config embedded in an output CSV header."""
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc}", [("<path>", str(exc))]) from exc
    if text.startswith("#"):
        for line in text.splitlines():
            if line.startswith(CONFIG_PREFIX):
                return loads(line[len(CONFIG_PREFIX):])
            if not line.startswith("#"):
                break
        raise ConfigError(f"{p} has no embedded config header", [("<path>", "no config header")])
    return loads(text)


def set_path(cfg: dict, dotted: str, value: Any) -> dict:
    """Copy of ``cfg`` with ``a.b.c`` replaced, re-validated."""
    out = copy.deepcopy(cfg)
    node = out
    keys = dotted.split(".")
    for k in keys[:-1]:
        if not isinstance(node.get(k), dict):
            raise ConfigError(f"unknown config key {dotted}", [(dotted, "unknown key")])
        node = node[k]
    if keys[-1] not in node:
        raise ConfigError(f"unknown config key {dotted}", [(dotted, "unknown key")])
    node[keys[-1]] = value
    return validate(out)


# ---------------------------------------------------------------------------
# specs from a validated config


def subordinator_spec(cfg) -> SubordinatorSpec:
    s = cfg["subordinator"]
    if s["family"] == "identity":
        return SubordinatorSpec.identity()
    if s["family"] == "one_sided_stable":
        return SubordinatorSpec.stable(s["alpha"])
    return SubordinatorSpec.tempered(s["alpha"], s["lambda"])


def noise_spec(cfg) -> Optional[JumpNoiseSpec]:
    n = cfg["noise"]
    if n is None:
        return None
    fam, a = n["family"], n["alpha"]
    if fam == "symmetric_stable":
        nu = LevyMeasureSpec.symmetric_stable(a)
    elif fam == "truncated_symmetric_stable":
        nu = LevyMeasureSpec.truncated_symmetric_stable(a, n["r_max"], n["r_min"])
    elif fam == "one_sided_stable":
        nu = LevyMeasureSpec.one_sided_stable(a)
    else:
        nu = LevyMeasureSpec.tempered_stable(a, n["lambda"])
    return JumpNoiseSpec(nu, n["jump_cutoff"])


def finite_variance(cfg) -> bool:
    """False when the jump noise is heavy-tailed and actually enters X."""
    noise = cfg["noise"]
    if noise is None or noise["family"] in ("truncated_symmetric_stable", "tempered_stable"):
        return True
    try:
        return constant_value(parse(cfg["coefficients"]["h"])) == 0.0
    except ExprSyntaxError:
        return False


def coefficient_field(cfg) -> CoefficientField:
    c = cfg["coefficients"]
    return CoefficientField.from_strings(c["F"], c["sigma"], c["h"])
