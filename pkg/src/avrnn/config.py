"""Flat dotted-key run configuration shared by every CLI command.

Grammar, one entry per line::

    # full-line comment
    train.iters = 5000
    model.z_dim = 4        # trailing comment
    model.emission_kind = gaussian

Blank lines are ignored.  Keys belong to the sections ``model`` (sequence
model), ``adv`` (critic and adversarial step), ``train`` (loop), ``data``
(dataset path) and ``out`` (output directory).  Unknown keys are rejected, and
every scalar can be overridden on the command line by a flag of the same
dotted name, e.g. ``--train.iters 10``.  Booleans accept
``true/false/yes/no/1/0``.
"""

from __future__ import annotations

from dataclasses import fields
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

from .adversarial import AdvConfig
from .training import TrainConfig
from .vrnn import VrnnConfig


class ConfigError(ValueError):
    """A bad key or value; ``key`` names the offending entry when known."""

    def __init__(self, message: str, key: Optional[str] = None):
        super().__init__(message)
        self.key = key


def _section(prefix: str, cls, skip: Iterable[str] = ()) -> Dict[str, Tuple[type, object]]:
    out = {}
    inst = cls()
    for f in fields(cls):
        if f.name in skip:
            continue
        default = getattr(inst, f.name)
        out[f"{prefix}.{f.name}"] = (type(default), default)
    return out


SCHEMA: Dict[str, Tuple[type, object]] = {}
SCHEMA.update(_section("model", VrnnConfig))
SCHEMA.update(_section("adv", AdvConfig))
SCHEMA.update(_section("train", TrainConfig, skip=("model", "adv")))
SCHEMA["data.path"] = (str, "")
SCHEMA["out.dir"] = (str, "")

_TRUE = {"true", "yes", "1", "on"}
_FALSE = {"false", "no", "0", "off"}


def parse_value(key: str, raw: str):
    """Convert ``raw`` to the type declared for ``key``."""
    if key not in SCHEMA:
        raise ConfigError(f"unknown config key {key!r}", key)
    typ = SCHEMA[key][0]
    raw = raw.strip()
    try:
        if typ is bool:
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for {key} (expected {typ.__name__})", key) from None


def parse_config_text(text: str) -> Dict[str, object]:
    """Parse config text into ``{dotted key: typed value}``; only keys that appear are returned."""
    out: Dict[str, object] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {body!r}")
        key, raw = (s.strip() for s in body.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}", key)
        out[key] = parse_value(key, raw)
    return out


class RunConfig:
    """Defaults merged with a config file and command-line overrides."""

    def __init__(self, values: Optional[Mapping[str, object]] = None):
        self.values: Dict[str, object] = {k: d for k, (_, d) in SCHEMA.items()}
        self.explicit: set = set()
        if values:
            self.update(values)

    def update(self, values: Mapping[str, object]) -> None:
        for k, v in values.items():
            if k not in SCHEMA:
                raise ConfigError(f"unknown config key {k!r}", k)
            self.values[k] = v
            self.explicit.add(k)

    def set(self, key: str, raw: str) -> None:
        self.update({key: parse_value(key, raw)})

    def __getitem__(self, key: str):
        return self.values[key]

    def section(self, prefix: str) -> Dict[str, object]:
        p = prefix + "."
        return {k[len(p):]: v for k, v in self.values.items() if k.startswith(p)}

    def require(self, keys: Sequence[str]) -> None:
        for k in keys:
            if self.values.get(k) in ("", None):
                raise ConfigError(f"missing required key {k!r}", k)

    def model_config(self) -> VrnnConfig:
        return _build(VrnnConfig, "model", self.section("model"))

    def adv_config(self) -> AdvConfig:
        return _build(AdvConfig, "adv", self.section("adv"))

    def train_config(self) -> TrainConfig:
        return _build(TrainConfig, "train", self.section("train"),
                      model=self.model_config(), adv=self.adv_config())

    def to_text(self) -> str:
        return "".join(f"{k} = {_fmt(v)}\n" for k, v in self.values.items())


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _build(cls, prefix: str, kw: Dict[str, object], **extra):
    try:
        return cls(**kw, **extra)
    except ValueError as exc:
        msg = str(exc)
        key = next((f"{prefix}.{k}" for k in kw if k in msg), None)
        raise ConfigError(f"invalid {prefix} config: {msg}", key) from None


def load_config(path) -> RunConfig:
    with open(path) as fh:
        return RunConfig(parse_config_text(fh.read()))


def split_overrides(argv: Sequence[str]) -> Tuple[List[str], List[Tuple[str, str]]]:
    """Separate ``--section.key value`` (or ``--section.key=value``) pairs from other arguments."""
    rest: List[str] = []
    pairs: List[Tuple[str, str]] = []
    i = 0
    while i < len(argv):
        a = argv[i]
        if a.startswith("--") and "." in a.split("=", 1)[0]:
            name = a[2:]
            if "=" in name:
                key, raw = name.split("=", 1)
            else:
                if i + 1 >= len(argv):
                    raise ConfigError(f"flag {a} needs a value", name)
                key, raw = name, argv[i + 1]
                i += 1
            pairs.append((key, raw))
        else:
            rest.append(a)
        i += 1
    return rest, pairs
