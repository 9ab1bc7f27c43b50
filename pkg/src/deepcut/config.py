"""Flat ``key = value`` run configuration.

One key per line, ``#`` starts a comment, lists are comma-separated. Values
resolve as built-in defaults, then the file, then command-line flags.
"""

from __future__ import annotations

import difflib
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping

from .engines import METHODS, TrainConfig

OUT_DIR_ENV = "DEEPCUT_OUT"


class ConfigError(ValueError):
    """Bad key or value in a run configuration; the message names the key."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


def _default_out_dir() -> str:
    return os.environ.get(OUT_DIR_ENV, "runs")


@dataclass(frozen=True)
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    preset: str = "wnut16-scale"
    data_seed: int = 0
    train_file: str | None = None
    dev_file: str | None = None
    test_file: str | None = None
    methods: tuple[str, ...] = METHODS
    fractions: tuple[float, ...] = (0.01, 0.10)
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    out_dir: str = field(default_factory=_default_out_dir)

    def as_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["train"] = self.train.as_dict()
        d["methods"] = list(self.methods)
        d["fractions"] = list(self.fractions)
        d["seeds"] = list(self.seeds)
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "RunConfig":
        d = dict(d)
        train = TrainConfig(**d.pop("train", {}))
        for key in ("methods", "fractions", "seeds"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(train=train, **d)


_TRAIN_KEYS = {f.name: f for f in fields(TrainConfig)}
_RUN_KEYS = {f.name: f for f in fields(RunConfig) if f.name != "train"}
KEYS = sorted(_TRAIN_KEYS.keys() | _RUN_KEYS.keys())
# common longhand names, used only to suggest the real key
_SYNONYMS = {"temperature": "tau", "lambda": "gamma", "learning_rate": "lr", "shards": "sisa_shards",
             "k": "sisa_shards", "dropout": "dropout_rate", "output_dir": "out_dir"}


def _scalar(key: str, kind: str, raw: str):
    raw = raw.strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(key, f"expected {kind}, got {raw!r}") from None
    return raw


def _kind(key: str) -> str:
    ann = str((_TRAIN_KEYS.get(key) or _RUN_KEYS[key]).type)
    for kind in ("float", "int", "str"):
        if kind in ann:
            return kind
    return "str"


def check_key(key: str) -> None:
    if key not in _TRAIN_KEYS and key not in _RUN_KEYS:
        guess = difflib.get_close_matches(key, KEYS + list(_SYNONYMS), n=1)
        hint = f"; did you mean {_SYNONYMS.get(guess[0], guess[0])!r}?" if guess else ""
        raise ConfigError(key, f"unknown key{hint}")


def coerce(key: str, raw: str):
    """Convert one textual value to the type its key expects."""
    check_key(key)
    if key == "methods":
        items = tuple(m.strip() for m in raw.split(",") if m.strip())
        bad = [m for m in items if m not in METHODS]
        if bad or not items:
            raise ConfigError(key, f"unknown method(s) {bad}; choose from {', '.join(METHODS)}")
        return items
    if key == "fractions":
        return tuple(_scalar(key, "float", v) for v in raw.split(",") if v.strip())
    if key == "seeds":
        return tuple(_scalar(key, "int", v) for v in raw.split(",") if v.strip())
    if key == "forget_batch_size" and raw.strip().lower() in ("", "none", "auto"):
        return None
    if raw.strip().lower() == "none" and key.endswith("_file"):
        return None
    return _scalar(key, _kind(key), raw)


def parse_file(path) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", f"expected key = value, got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key] = value
    return out


def load_config(path=None, overrides: Mapping[str, Any] | None = None) -> RunConfig:
    """Resolve defaults < file < overrides and validate the result.

    ``overrides`` may hold strings (converted like file values) or already
    typed values; ``None`` entries are ignored so unset flags fall through.
    """
    values: dict[str, Any] = {}
    if path is not None:
        for key, raw in parse_file(path).items():
            values[key] = coerce(key, raw)
    for key, val in (overrides or {}).items():
        if val is None:
            continue
        check_key(key)
        values[key] = coerce(key, val) if isinstance(val, str) else val

    train = replace(TrainConfig(), **{k: v for k, v in values.items() if k in _TRAIN_KEYS})
    run = RunConfig(train=train, **{k: v for k, v in values.items() if k in _RUN_KEYS})
    validate(run)
    return run


def validate(run: RunConfig) -> None:
    try:
        run.train.validate()
    except ValueError as exc:
        key = next((k for k in _TRAIN_KEYS if str(exc).startswith(k)), "train")
        raise ConfigError(key, str(exc)) from None
    if not run.seeds:
        raise ConfigError("seeds", "at least one seed is required")
    if not run.fractions:
        raise ConfigError("fractions", "at least one fraction is required")
    for f in run.fractions:
        if not 0.0 < f < 1.0:
            raise ConfigError("fractions", f"{f} is outside (0, 1)")
    files = (run.train_file, run.dev_file, run.test_file)
    if any(files) and not all(files):
        raise ConfigError("train_file", "train_file, dev_file and test_file must be given together")


def _render(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, (tuple, list)):
        return ",".join(_render(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dump_config(run: RunConfig) -> str:
    """Flat text that ``load_config`` resolves back to ``run``."""
    flat = dict(run.train.as_dict())
    flat.update({k: getattr(run, k) for k in _RUN_KEYS})
    return "".join(f"{k} = {_render(flat[k])}\n" for k in sorted(flat))
