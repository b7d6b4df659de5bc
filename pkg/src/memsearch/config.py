"""Run configuration: one JSON document, nested sections, dotted command-line overrides.

Precedence is defaults < config file < flags. Every problem found while
loading is collected and reported together, each under its dotted key.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .corpus import SynthConfig
from .encoder import EncoderConfig
from .searcher import SearchConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("; ".join(problems))


@dataclass
class CorpusSection:
    data_dir: str | None = None  # a directory written by `synth`
    synth: SynthConfig = field(default_factory=SynthConfig)


@dataclass
class EvalSection:
    split: str = "dev"
    k1: int = 10
    z: int = 3


@dataclass
class AuditSection:
    split: str = "sym_test"
    update_split: str = "sym_dev"
    cutoffs: tuple[float, ...] = (0.25, 0.5, 1.0, 2.0, 4.0, 8.0, math.inf)


@dataclass
class AlignSection:
    level: int = 1
    claim_ids: tuple[int, ...] = ()
    split: str = "dev"


@dataclass
class RunConfig:
    seed: int = 7
    out_dir: str = "runs"
    deterministic: bool = True
    corpus: CorpusSection = field(default_factory=CorpusSection)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    search: SearchConfig = field(default_factory=SearchConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalSection = field(default_factory=EvalSection)
    audit: AuditSection = field(default_factory=AuditSection)
    align: AlignSection = field(default_factory=AlignSection)

    def to_dict(self) -> dict:
        return _to_plain(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


SPLITS = ("train", "dev", "test", "sym_dev", "sym_test")


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_to_plain(x) for x in obj]
    if isinstance(obj, float) and math.isinf(obj):
        return "inf" if obj > 0 else "-inf"
    return obj


def _scalar_kind(f: dataclasses.Field, default) -> tuple[type | None, bool, type | None]:
    """(scalar type, nullable, element type for sequences) from the annotation string."""
    ann = str(f.type).replace(" ", "")
    nullable = "None" in ann.split("|")
    base = next((p for p in ann.split("|") if p != "None"), ann)
    if base.startswith(("tuple[", "list[")):
        elem = base[base.index("[") + 1 :].split(",")[0].rstrip("]")
        return tuple, nullable, {"int": int, "float": float, "str": str}.get(elem, str)
    kind = {"int": int, "float": float, "str": str, "bool": bool}.get(base)
    if kind is None and default is not None:
        kind = type(default)
    return kind, nullable, None


def _coerce(value, kind, elem, nullable, key: str, problems: list[str]):
    if value is None:
        if nullable:
            return None
        problems.append(f"{key}: must not be null")
        return dataclasses.MISSING
    if kind is tuple:
        if not isinstance(value, (list, tuple)):
            problems.append(f"{key}: expected a list")
            return dataclasses.MISSING
        out = []
        for i, v in enumerate(value):
            c = _coerce(v, elem, None, False, f"{key}[{i}]", problems)
            if c is dataclasses.MISSING:
                return c
            out.append(c)
        return tuple(out)
    if kind is bool:
        if isinstance(value, bool):
            return value
        problems.append(f"{key}: expected true or false, got {value!r}")
        return dataclasses.MISSING
    if kind is int:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
        problems.append(f"{key}: expected an integer, got {value!r}")
        return dataclasses.MISSING
    if kind is float:
        if isinstance(value, str) and value in ("inf", "-inf"):
            return float(value)
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        problems.append(f"{key}: expected a number, got {value!r}")
        return dataclasses.MISSING
    if kind is str:
        if isinstance(value, str):
            return value
        problems.append(f"{key}: expected a string, got {value!r}")
        return dataclasses.MISSING
    return value


def _build(cls, raw: dict, prefix: str, problems: list[str]):
    if not isinstance(raw, dict):
        problems.append(f"{prefix.rstrip('.') or '<root>'}: expected an object")
        return cls()
    defaults = cls()
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for k in sorted(raw):
        key = prefix + k
        if k not in fields:
            problems.append(f"{key}: unknown key")
            continue
        default = getattr(defaults, k)
        if dataclasses.is_dataclass(default):
            kwargs[k] = _build(type(default), raw[k], key + ".", problems)
            continue
        kind, nullable, elem = _scalar_kind(fields[k], default)
        v = _coerce(raw[k], kind, elem, nullable, key, problems)
        if v is not dataclasses.MISSING:
            kwargs[k] = v
    try:
        obj = cls(**kwargs)
        if hasattr(obj, "validate"):
            obj.validate()
        return obj
    except (TypeError, ValueError) as e:
        problems.append(f"{prefix.rstrip('.') or '<root>'}: {e}")
        return defaults


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def nest(flat: dict[str, Any]) -> dict:
    """{"train.lr_encoder": 0.1} -> {"train": {"lr_encoder": 0.1}}."""
    out: dict = {}
    for key, v in flat.items():
        node = out
        *head, last = key.split(".")
        for h in head:
            node = node.setdefault(h, {})
        node[last] = v
    return out


def from_dict(raw: dict) -> RunConfig:
    problems: list[str] = []
    cfg = _build(RunConfig, raw, "", problems)
    if cfg.eval.split not in SPLITS:
        problems.append(f"eval.split: must be one of {', '.join(SPLITS)}")
    if cfg.audit.split not in SPLITS or cfg.audit.update_split not in SPLITS:
        problems.append(f"audit.split / audit.update_split: must be among {', '.join(SPLITS)}")
    if cfg.align.level not in (1, 2, 3):
        problems.append("align.level: must be 1, 2 or 3")
    if list(cfg.audit.cutoffs) != sorted(cfg.audit.cutoffs):
        problems.append("audit.cutoffs: must be sorted ascending")
    if problems:
        raise ConfigError(problems)
    return cfg


def load_config(path: str | Path | None = None, overrides: dict[str, Any] | None = None) -> RunConfig:
    raw: dict = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigError([f"{path}: not valid JSON ({e})"]) from None
    return from_dict(_merge(raw, nest(overrides or {})))


def flag_keys(cls=RunConfig, prefix: str = "") -> list[str]:
    """Every leaf key as a dotted path, in declaration order."""
    keys = []
    defaults = cls()
    for f in dataclasses.fields(cls):
        v = getattr(defaults, f.name)
        if dataclasses.is_dataclass(v):
            keys += flag_keys(type(v), prefix + f.name + ".")
        else:
            keys.append(prefix + f.name)
    return keys


def parse_flag_value(text: str):
    """JSON when it parses (numbers, booleans, lists, null), else the raw string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text
