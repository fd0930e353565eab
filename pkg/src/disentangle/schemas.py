"""JSON schemas for every config and input document the CLI accepts."""
from __future__ import annotations

import jsonschema

_NUM = {"type": "number"}
_COUNT = {"type": "integer", "minimum": 0}
_POS = {"type": "integer", "minimum": 1}
_SEED = {"type": "integer", "minimum": 0, "maximum": 2 ** 64 - 1}
_RANGE = {"type": "array", "items": _NUM, "minItems": 2, "maxItems": 2}

POLICY = {
    "type": "object",
    "properties": {
        "kind": {"enum": ["fixed", "normal", "uniform"]},
        "a": _NUM,
        "b": _NUM,
    },
    "required": ["kind"],
    "additionalProperties": False,
}

FIT_OPTIONS = {
    "type": "object",
    "properties": {
        "lr": {"type": "number", "exclusiveMinimum": 0},
        "betas": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0,
                                             "exclusiveMaximum": 1},
                  "minItems": 2, "maxItems": 2},
        "eps": {"type": "number", "exclusiveMinimum": 0},
        "max_outer": _POS,
        "max_inner": _POS,
        "tol": {"type": "number", "exclusiveMinimum": 0},
        "grad_tol": {"type": "number", "exclusiveMinimum": 0},
        "var_floor": {"type": "number", "exclusiveMinimum": 0},
        "em_steps": _POS,
        "solver": {"enum": ["exact", "adam"]},
        "mode": {"enum": ["joint", "marginal"]},
        "seed": _SEED,
    },
    "additionalProperties": False,
}

GEN = {
    "type": "object",
    "properties": {
        "K": _POS,
        "covariate_dim": _COUNT,
        "theta_range": _RANGE,
        "cov_range": _RANGE,
        "noise_scale": {"type": "number", "minimum": 0},
        "seed": _SEED,
        "regimes": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "properties": {
                    "name": {"type": "string", "pattern": "^[A-Za-z0-9_.-]+$"},
                    "intervened": {"type": "array", "items": _COUNT, "uniqueItems": True},
                    "n": _COUNT,
                    "policy": POLICY,
                },
                "required": ["intervened", "n"],
                "additionalProperties": False,
            },
        },
    },
    "additionalProperties": False,
}

QUERY = {
    "type": "object",
    "properties": {
        "c": {"type": "array", "items": _NUM},
        "do": {"type": "object", "patternProperties": {"^[0-9]+$": _NUM},
               "additionalProperties": False},
        "obs": {"type": "object", "patternProperties": {"^[0-9]+$": _NUM},
                "additionalProperties": False},
    },
    "required": ["c"],
    "additionalProperties": False,
}

SYNTHETIC = {
    "type": "object",
    "properties": {
        "K": _POS,
        "covariate_dim": _COUNT,
        "sizes": {"type": "array", "items": _POS, "minItems": 1},
        "train_regimes": {"type": "array", "items": {"type": "array", "items": _COUNT},
                          "minItems": 1},
        "seeds": _POS,
        "seed": _SEED,
        "eval_n": _POS,
        "fit": FIT_OPTIONS,
    },
    "additionalProperties": False,
}

STROKE = {
    "type": "object",
    "properties": {
        "table": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "properties": {
                    "cell": {"type": "array", "items": _NUM, "minItems": 3, "maxItems": 3},
                    "p": {"type": "number", "minimum": 0},
                },
                "required": ["cell", "p"],
                "additionalProperties": False,
            },
        },
        "treatment_coef": _NUM,
        "outcome": {"type": "object", "additionalProperties": _NUM},
        "bounds": {"type": "array", "items": {"type": "number", "minimum": 0}, "minItems": 1},
        "n_obs": _POS,
        "n_joint": _POS,
        "n_eval": _POS,
        "seeds": _POS,
        "seed": _SEED,
        "do_policy": POLICY,
        "fit": FIT_OPTIONS,
    },
    "additionalProperties": False,
}

VERIFY = {
    "type": "object",
    "properties": {
        "p": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "n": {"type": "integer", "minimum": 100000},
        "seed": _SEED,
    },
    "additionalProperties": False,
}

SCHEMAS = {"gen": GEN, "fit": FIT_OPTIONS, "query": QUERY, "synthetic": SYNTHETIC,
           "stroke": STROKE, "verify": VERIFY}


class ConfigError(ValueError):
    """Config document fails its schema; the message names the offending field."""


def validate(doc, name: str) -> None:
    v = jsonschema.Draft202012Validator(SCHEMAS[name])
    errs = sorted(v.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errs:
        e = errs[0]
        ptr = "/" + "/".join(map(str, e.absolute_path))
        raise ConfigError(f"{name} config invalid at {ptr}: {e.message}")
