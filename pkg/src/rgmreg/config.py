"""Flat ``key = value`` run configuration.

One file covers the dataset, model, training and evaluation settings.  Keys
are validated against the known set, values are coerced to the type of the
default, and the resolved configuration has a stable text form and checksum.
"""

import hashlib
from dataclasses import dataclass, field, fields

from .data import DatasetConfig
from .network import ModelConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunSettings:
    data_dir: str = "data"
    out_dir: str = "runs"
    checkpoint: str = ""
    method: str = "rgm"
    iters: int = 2
    jobs: int = 1
    dump_images: bool = False


# Flat key -> (section, attribute). Dataset seed and train seed are both driven by `seed`.
_SECTIONS = {
    "dataset": DatasetConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "run": RunSettings,
}
_ALIASES = {
    "dataset.seed": "seed",
    "train.seed": "seed",
    "model.init_seed": "seed",
}


def _keymap():
    keys = {}
    for section, cls in _SECTIONS.items():
        for f in fields(cls):
            flat = _ALIASES.get(f"{section}.{f.name}", f.name)
            keys.setdefault(flat, []).append((section, f.name))
    return keys


KEYS = _keymap()


def _coerce(raw, default, key):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            if default and isinstance(default[0], int):
                return tuple(int(s) for s in items)
            return tuple(items)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def _format(value):
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def parse_kv(text, source="<config>"):
    """Parse ``key = value`` lines ('#' starts a comment) into a dict of strings."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        s = line.split("#", 1)[0].strip()
        if not s:
            continue
        if "=" not in s:
            raise ConfigError(f"{source}: line {lineno}: expected 'key = value'")
        k, v = s.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def format_kv(d):
    return "".join(f"{k} = {_format(v)}\n" for k, v in d.items())


@dataclass
class RunConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    run: RunSettings = field(default_factory=RunSettings)

    @classmethod
    def from_values(cls, values, source="<config>"):
        unknown = sorted(set(values) - set(KEYS))
        if unknown:
            raise ConfigError(f"{source}: unknown keys {unknown}")
        parts = {}
        for section, cls_ in _SECTIONS.items():
            kwargs = {}
            for f in fields(cls_):
                flat = _ALIASES.get(f"{section}.{f.name}", f.name)
                if flat in values:
                    kwargs[f.name] = _coerce(str(values[flat]), f.default, flat)
            try:
                parts[section] = cls_(**kwargs)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{source}: {exc}") from None
        return cls(**parts)

    @classmethod
    def load(cls, path=None, overrides=None):
        values = {}
        if path:
            with open(path) as fh:
                values.update(parse_kv(fh.read(), str(path)))
        for k, v in (overrides or {}).items():
            if v is not None:
                values[k] = str(v)
        return cls.from_values(values, str(path or "<defaults>"))

    def flat(self):
        out = {}
        for key, targets in KEYS.items():
            section, attr = targets[0]
            out[key] = getattr(getattr(self, section), attr)
        return dict(sorted(out.items()))

    def text(self):
        return format_kv(self.flat())

    def checksum(self):
        return hashlib.sha256(self.text().encode()).hexdigest()[:16]
