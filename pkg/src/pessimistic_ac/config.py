"""INI experiment configuration, canonical text form and config hashing.

A config is a mapping ``section -> key -> typed value`` checked against
``SCHEMA``.  Its canonical text is one ``section.key = value`` line per entry
in sorted order; the config hash is the first 16 hex digits of the SHA-256 of
that text.  CSV outputs carry the canonical lines as comments so a reader can
rebuild the config and confirm the hash.
"""
from __future__ import annotations

import configparser
import hashlib
import math
from dataclasses import dataclass
from typing import Any, Callable

from .textio import fmt


class ConfigError(ValueError):
    """Malformed config text, unknown key or out-of-range value."""


@dataclass(frozen=True)
class Field:
    parse: Callable[[str], Any]
    show: Callable[[Any], str]
    default: Any
    check: Callable[[Any], bool] = lambda v: True
    doc: str = ""


def _float_list(text: str) -> tuple[float, ...]:
    return tuple(float(t) for t in text.split(",") if t.strip())


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.split(",") if t.strip())


def _str_list(text: str) -> tuple[str, ...]:
    return tuple(t.strip() for t in text.split(",") if t.strip())


def _int(default: int, check=lambda v: v >= 0, doc="") -> Field:
    return Field(int, str, default, check, doc)


def _float(default: float, check=lambda v: math.isfinite(v), doc="") -> Field:
    return Field(float, fmt, default, check, doc)


def _text(default: str, choices: tuple[str, ...] | None = None, doc="") -> Field:
    return Field(str.strip, str, default, (lambda v: v in choices) if choices else (lambda v: True), doc)


def _list(parse, item_show, default, check=lambda v: True, doc="") -> Field:
    return Field(parse, lambda v: ",".join(item_show(x) for x in v), default, check, doc)


_positive = lambda v: v > 0  # noqa: E731
_unit_open = lambda v: 0 < v < 1  # noqa: E731

SCHEMA: dict[str, dict[str, Field]] = {
    "general": {
        "master_seed": _int(0, doc="root of every random stream"),
        "workers": _int(1, _positive, "worker processes for independent runs"),
    },
    "verify": {
        "only": _list(_str_list, str, (), doc="comma-separated check names; empty runs all"),
        "mc_budget": _int(200_000, _positive, "Monte-Carlo draws for sampled checks"),
        "lb_bits": _int(20, _positive, "random bit vectors per lower-bound epsilon"),
        "lb_eps": _list(_float_list, fmt, (1 / 16, 1 / 64),
                        lambda v: len(v) > 0 and all(0 < e < 1 for e in v),
                        "lower-bound epsilons"),
        "mdp": _text("", doc="optional MDP file to check"),
        "out": _text("verify.csv", doc="report path"),
    },
    "run-upper": {
        "instance": _text("benchmark", doc="'benchmark' or an MDP file"),
        "data_design": _text("uniform-rollouts", ("uniform-rollouts",),
                             "data design for MDP files: uniform-behavior rollouts"),
        "n_grid": _list(_int_list, str, (300, 1200, 4800),
                        lambda v: len(v) > 0 and all(n > 0 for n in v), "dataset sizes"),
        "seeds": _int(20, _positive, "seeds per dataset size"),
        "eps_final": _float(0.6, _positive, "target accuracy driving the iteration count"),
        "delta": _float(0.1, _unit_open, "failure probability"),
        "eps_be": _float(0.0, lambda v: v >= 0, "assumed inherent Bellman error"),
        "alpha_const": _float(0.1, _positive, "constant in front of the confidence radius"),
        "zeta_const": _float(1.0, _positive, "constant inside the misspecification term"),
        "B": _float(0.0, lambda v: v >= 0, "norm bound; 0 computes it from the instance"),
        "T_cap": _int(2000, _positive, "iteration cap"),
        "eps_solve": _float(1e-6, _positive, "critic solver accuracy"),
        "on_infeasible": _text("abort", ("abort", "inflate"), "critic infeasibility policy"),
        "log_dir": _text("", doc="directory for per-run actor logs; empty disables"),
        "out": _text("run_upper.csv", doc="results path"),
    },
    "run-lower": {
        "eps": _float(1 / 16, _unit_open, "instance epsilon, rounded down to an even level count"),
        "n": _int(3000, lambda v: v >= 3, "dataset size"),
        "trials": _int(50, _positive, "trials for estimating the output distribution"),
        "holdout_trials": _int(50, _positive, "fresh trials for measuring the gap"),
        "algorithm": _text("builtin-actor",
                           ("builtin-actor", "naive-greedy", "constant-reference", "uniform",
                            "external"), "learner under test"),
        "policy_dir": _text("", doc="policy files policy-0000.txt, ... for 'external'"),
        "T_cap": _int(200, _positive, "actor iteration cap"),
        "mc_draws": _int(20_000, _positive, "Monte-Carlo draws when probabilities lack a closed form"),
        "out": _text("run_lower.csv", doc="report path"),
    },
    "ftpl-bench": {
        "T": _int(200, _positive, "rounds"),
        "d": _int(2, _positive, "dimension"),
        "actions": _int(6, lambda v: v >= 2, "points in the action set"),
        "omega": _float(1.0, _positive, "learning-rate scale"),
        "eta": _float(0.0, lambda v: v >= 0, "perturbation scale; 0 picks sqrt(T)"),
        "mc_samples": _int(2000, _positive, "perturbation draws per round"),
        "adversaries": _list(_str_list, str,
                             ("zero", "constant", "alternating", "random", "cycling",
                              "drift", "sparse", "flip", "greedy-trap", "scaled"),
                             lambda v: len(v) > 0, "reward sequences to run"),
        "out": _text("ftpl_bench.csv", doc="results path"),
    },
}

Config = dict[str, dict[str, Any]]


def defaults() -> Config:
    return {sec: {k: f.default for k, f in fields.items()} for sec, fields in SCHEMA.items()}


def set_value(cfg: Config, dotted: str, text: str) -> None:
    """Apply one ``section.key=value`` override."""
    if "." not in dotted:
        raise ConfigError(f"override {dotted!r} must look like section.key")
    sec, key = dotted.split(".", 1)
    if sec not in SCHEMA or key not in SCHEMA[sec]:
        raise ConfigError(f"unknown config key {dotted!r}")
    field = SCHEMA[sec][key]
    try:
        value = field.parse(text)
    except ValueError as err:
        raise ConfigError(f"{dotted}: {err}") from None
    if not field.check(value):
        raise ConfigError(f"{dotted}: value {text!r} out of range")
    cfg[sec][key] = value


def load(path=None, overrides=()) -> Config:
    """Defaults, then the INI file, then ``section.key=value`` overrides in order."""
    cfg = defaults()
    if path:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str  # keep key case
        try:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
        except configparser.Error as err:
            raise ConfigError(f"{path}: {err}") from None
        for sec in parser.sections():
            for key, text in parser.items(sec):
                set_value(cfg, f"{sec}.{key}", text)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        dotted, text = item.split("=", 1)
        set_value(cfg, dotted.strip(), text.strip())
    return cfg


def canonical_lines(cfg: Config) -> list[str]:
    return [f"{sec}.{key} = {SCHEMA[sec][key].show(cfg[sec][key])}"
            for sec in sorted(SCHEMA) for key in sorted(SCHEMA[sec])]


def dumps(cfg: Config) -> str:
    """INI text that ``load`` maps back to an equal config."""
    out = []
    for sec in SCHEMA:
        out.append(f"[{sec}]")
        out.extend(f"{k} = {SCHEMA[sec][k].show(cfg[sec][k])}" for k in SCHEMA[sec])
        out.append("")
    return "\n".join(out)


def config_hash(cfg: Config) -> str:
    text = "\n".join(canonical_lines(cfg)) + "\n"
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def comment_header(cfg: Config) -> str:
    """Comment block placed at the top of every CSV output."""
    lines = [f"# config-hash: {config_hash(cfg)}"]
    lines += [f"# config: {ln}" for ln in canonical_lines(cfg)]
    return "\n".join(lines) + "\n"


def parse_comment_header(lines) -> tuple[Config, str]:
    """Rebuild the config from a CSV comment block; returns (config, recorded hash)."""
    cfg = defaults()
    recorded = None
    for ln in lines:
        if not ln.startswith("#"):
            break
        body = ln[1:].strip()
        if body.startswith("config-hash:"):
            recorded = body.split(":", 1)[1].strip()
        elif body.startswith("config:"):
            dotted, text = body.split(":", 1)[1].split("=", 1)
            set_value(cfg, dotted.strip(), text.strip())
    if recorded is None:
        raise ConfigError("no config-hash comment line")
    return cfg, recorded


__all__ = [
    "ConfigError", "SCHEMA", "defaults", "set_value", "load", "canonical_lines", "dumps",
    "config_hash", "comment_header", "parse_comment_header",
]
