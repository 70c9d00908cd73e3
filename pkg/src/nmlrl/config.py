"""Experiment configuration files (INI syntax, nested dotted sections).

Layout::

    [experiment]
    schema_version = 1
    output_dir = runs/zigzag
    layout =                # empty: built-in layout for run.env

    [run]
    method = mural
    env = zigzag
    seed = 0
    ...

    [run.meta]
    inner_lr = 0.5
    ...

Every key is checked against the dataclass fields; unknown sections or keys
raise ConfigError naming the offender.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, fields, replace

from .classifiers import MetaNmlConfig
from .harness import RunConfig

SCHEMA_VERSION = "1"


class ConfigError(ValueError):
    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


@dataclass(frozen=True)
class ExperimentConfig:
    run: RunConfig
    output_dir: str = "runs"
    layout: str = ""
    schema_version: str = SCHEMA_VERSION


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def _parse(key, text: str, default):
    try:
        if isinstance(default, bool):
            low = text.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return tuple(int(v) for v in text.split(",") if v.strip())
        return text.strip()
    except ValueError as exc:
        raise ConfigError(f"bad value for {key!r}: {text!r}", key) from exc


_EXPERIMENT_KEYS = {"schema_version": SCHEMA_VERSION, "output_dir": "runs", "layout": ""}


def _section_values(parser, section, template, prefix):
    out = {}
    names = {f.name: getattr(template, f.name) for f in fields(template) if f.name != "meta"}
    for key, text in parser.items(section):
        if key not in names:
            raise ConfigError(f"unknown key {prefix}{key!r} in [{section}]", key)
        out[key] = _parse(key, text, names[key])
    return out


def loads(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"),
                                       default_section="__none__")
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"unreadable config: {exc}") from exc
    for section in parser.sections():
        if section not in ("experiment", "run", "run.meta"):
            raise ConfigError(f"unknown section [{section}]", section)
    if not parser.has_section("run"):
        raise ConfigError("missing [run] section", "run")

    exp = {}
    if parser.has_section("experiment"):
        for key, val in parser.items("experiment"):
            if key not in _EXPERIMENT_KEYS:
                raise ConfigError(f"unknown key {key!r} in [experiment]", key)
            exp[key] = val.strip()
    version = exp.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {version!r} (expected {SCHEMA_VERSION})",
                          "schema_version")

    run_vals = _section_values(parser, "run", RunConfig("mural"), "")
    if "method" not in run_vals or "seed" not in run_vals:
        missing = "method" if "method" not in run_vals else "seed"
        raise ConfigError(f"[run] needs {missing!r}", missing)
    meta = RunConfig("mural").meta
    if parser.has_section("run.meta"):
        meta = replace(meta, **_section_values(parser, "run.meta", meta, "meta."))
    try:
        run = RunConfig(meta=meta, **run_vals)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid run settings: {exc}") from exc
    return ExperimentConfig(run, exp.get("output_dir", "runs"), exp.get("layout", ""), version)


def load(path) -> ExperimentConfig:
    with open(path) as fh:
        return loads(fh.read())


def dumps(cfg: ExperimentConfig) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    parser["experiment"] = {"schema_version": cfg.schema_version,
                            "output_dir": cfg.output_dir, "layout": cfg.layout}
    parser["run"] = {f.name: _format(getattr(cfg.run, f.name))
                     for f in fields(cfg.run) if f.name != "meta"}
    parser["run.meta"] = {f.name: _format(getattr(cfg.run.meta, f.name))
                          for f in fields(cfg.run.meta)}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def dump(cfg: ExperimentConfig, path) -> None:
    with open(path, "w") as fh:
        fh.write(dumps(cfg))
