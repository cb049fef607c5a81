"""Plain sectioned key=value run configuration.

Four sections (model, loss, train, synth) map one-to-one onto the config
records. Merge order, weakest first: record defaults, the COSF_SEED
environment variable (which seeds both [train] and [synth]), the config
file, then command-line overrides. Unknown sections or keys are rejected
by name; values are parsed against the record field types and then
validated by the records themselves.

A few settings exist in two records because both sides consume them: the
ablation toggles, the contrastive temperature and denominator mode, and
the group size. Each such setting has one authoritative key whose value
is copied onto its mirrors, so an operator sets it once. Explicitly
setting a mirror to a conflicting value is an error, never a silent
override.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Mapping, get_args, get_origin, get_type_hints

from .config import LossConfig, ModelConfig, SynthSpec, TrainConfig
from .errors import ConfigError, IOParseError

_SECTIONS = {
    "model": ModelConfig,
    "loss": LossConfig,
    "train": TrainConfig,
    "synth": SynthSpec,
}

# authoritative key -> mirror keys kept in lockstep with it
_LINKED = {
    ("train", "use_refine"): (("model", "use_refine"),),
    ("train", "use_group"): (("model", "use_group"),),
    ("train", "use_fuse"): (("model", "use_fuse"),),
    ("loss", "tau"): (("model", "tau"),),
    ("loss", "paper_exact_denominator"): (("model", "paper_exact_denominator"),),
    ("train", "group_size"): (("model", "group_size"), ("synth", "group_size")),
}

ENV_SEED = "COSF_SEED"


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig
    loss: LossConfig
    train: TrainConfig
    synth: SynthSpec


def _schema() -> dict[str, dict[str, type]]:
    out = {}
    for section, cls in _SECTIONS.items():
        hints = get_type_hints(cls)
        out[section] = {f.name: hints[f.name] for f in fields(cls)}
    return out


_SCHEMA = _schema()


def _parse_value(section: str, key: str, raw: str, typ):
    raw = raw.strip()
    where = f"[{section}] {key}"
    if typ is bool:
        if raw == "true":
            return True
        if raw == "false":
            return False
        raise ConfigError(f"{where} must be true or false, got {raw!r}")
    if typ is int:
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{where} must be an integer, got {raw!r}") from None
    if typ is float:
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{where} must be a number, got {raw!r}") from None
    if get_origin(typ) is tuple:
        arity = len(get_args(typ))
        parts = [p.strip() for p in raw.split(",")]
        if len(parts) != arity:
            raise ConfigError(f"{where} needs {arity} comma-separated integers, got {raw!r}")
        try:
            return tuple(int(p) for p in parts)
        except ValueError:
            raise ConfigError(f"{where} needs {arity} comma-separated integers, got {raw!r}") from None
    raise ConfigError(f"{where} has an unsupported schema type {typ!r}")


def _check_key(section: str, key: str) -> type:
    if section not in _SCHEMA:
        raise ConfigError(f"unknown section [{section}]; valid sections: {', '.join(_SECTIONS)}")
    try:
        return _SCHEMA[section][key]
    except KeyError:
        raise ConfigError(
            f"unknown key {key!r} in section [{section}]; valid keys: {', '.join(sorted(_SCHEMA[section]))}"
        ) from None


def _read_file(path) -> dict[tuple[str, str], str]:
    parser = configparser.ConfigParser(
        interpolation=None,
        delimiters=("=",),
        comment_prefixes=("#",),
        inline_comment_prefixes=("#",),
        strict=True,
        default_section="\x00disabled",
    )
    parser.optionxform = str
    try:
        with open(path, "r", encoding="utf-8") as fh:
            parser.read_file(fh, source=str(path))
    except OSError as e:
        raise IOParseError(f"cannot read config file {path}: {e.strerror or e}") from None
    except configparser.Error as e:
        raise IOParseError(f"malformed config file: {e}") from None
    out = {}
    for section in parser.sections():
        for key, raw in parser.items(section):
            _check_key(section, key)
            out[(section, key)] = raw
    return out


def _split_override(dotted: str) -> tuple[str, str]:
    section, sep, key = dotted.partition(".")
    if not sep or not section or not key or "." in key:
        raise ConfigError(f"override key must look like section.key, got {dotted!r}")
    return section, key


def load_run_config(
    path=None,
    overrides: Mapping[str, str] | None = None,
    env: Mapping[str, str] | None = None,
) -> RunConfig:
    """Merge defaults, COSF_SEED, the config file, and overrides (strongest
    last) into validated records."""
    env = os.environ if env is None else env
    values: dict[tuple[str, str], object] = {}
    explicit: set[tuple[str, str]] = set()
    for section, cls in _SECTIONS.items():
        for f in fields(cls):
            values[(section, f.name)] = f.default

    raw_seed = env.get(ENV_SEED)
    if raw_seed is not None:
        try:
            seed = int(raw_seed)
        except ValueError:
            raise ConfigError(f"{ENV_SEED} must be an integer, got {raw_seed!r}") from None
        for spot in (("train", "seed"), ("synth", "seed")):
            values[spot] = seed
            explicit.add(spot)

    if path is not None:
        for (section, key), raw in _read_file(path).items():
            values[(section, key)] = _parse_value(section, key, raw, _SCHEMA[section][key])
            explicit.add((section, key))

    for dotted, raw in (overrides or {}).items():
        section, key = _split_override(dotted)
        typ = _check_key(section, key)
        values[(section, key)] = _parse_value(section, key, str(raw), typ)
        explicit.add((section, key))

    for auth, mirrors in _LINKED.items():
        group = (auth, *mirrors)
        set_members = [spot for spot in group if spot in explicit]
        chosen = values[set_members[0] if set_members else auth]
        for spot in set_members[1:]:
            if values[spot] != chosen:
                s0, k0 = set_members[0]
                s1, k1 = spot
                raise ConfigError(
                    f"[{s0}] {k0} = {_format_value(chosen)} conflicts with "
                    f"[{s1}] {k1} = {_format_value(values[spot])}; these keys mirror one setting"
                )
        for spot in group:
            values[spot] = chosen

    records = {}
    for section, cls in _SECTIONS.items():
        kwargs = {f.name: values[(section, f.name)] for f in fields(cls)}
        records[section] = cls(**kwargs)
    return RunConfig(**records)


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def effective_config_text(cfg: RunConfig) -> str:
    """Canonical echo of every setting. Reparsing the text reproduces the
    same RunConfig, which is what makes the echo usable as provenance."""
    blocks = []
    for section, cls in _SECTIONS.items():
        record = getattr(cfg, section)
        lines = [f"[{section}]"]
        for name in sorted(f.name for f in fields(cls)):
            lines.append(f"{name} = {_format_value(getattr(record, name))}")
        blocks.append("\n".join(lines))
    return "\n\n".join(blocks) + "\n"


def write_effective_config(cfg: RunConfig, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    target = out / "effective_config.cfg"
    target.write_text(effective_config_text(cfg), encoding="utf-8")
    return target
