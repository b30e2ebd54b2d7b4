"""Run configuration and its flat ``section.key = value`` text format.

Example::

    # runs/synth.cfg
    data.name = synthetic
    xform.family = projective
    nin.widths = 16, 16
    sgd.base_lr = 0.05
    epochs = 30

Tuples are comma-separated. Keys without a dot address top-level fields.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field

from .data import SyntheticConfig
from .errors import ConfigError
from .model import NinConfig, ProbeSpec
from .nn.optim import SgdConfig
from .xform import XformConfig


@dataclass
class DataConfig:
    name: str = "synthetic"  # "synthetic" or "cifar10"
    path: str = ""  # CIFAR-10 binary directory
    test_fraction: float = 0.2  # synthetic only
    split_seed: int = 1

    def __post_init__(self):
        if self.name not in ("synthetic", "cifar10"):
            raise ValueError(f"data.name must be 'synthetic' or 'cifar10', got {self.name!r}")
        if not 0.0 < self.test_fraction < 1.0:
            raise ValueError("data.test_fraction must lie in (0, 1)")


@dataclass
class ProbeConfig:
    """Probe head and its optimizer; the probe schedule is independent of AET's."""

    kind: str = "fc_3"
    hidden: int = 200
    epochs: int = 30
    batch_size: int = 128
    base_lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    drop_factor: float = 5.0
    drop_epochs: tuple = (20,)

    def __post_init__(self):
        ProbeSpec(self.kind, self.hidden)  # validates kind and width
        self.drop_epochs = tuple(int(e) for e in self.drop_epochs)
        if self.epochs <= 0 or self.batch_size < 2:
            raise ValueError("probe.epochs must be positive and probe.batch_size >= 2")

    def spec(self, num_classes: int) -> ProbeSpec:
        return ProbeSpec(self.kind, self.hidden, num_classes)

    def sgd(self) -> SgdConfig:
        return SgdConfig(self.base_lr, self.momentum, self.weight_decay, self.drop_factor, self.drop_epochs)


@dataclass
class RunConfig:
    seed: int = 0
    epochs: int = 1500
    batch_size: int = 512
    eval_every: int = 0  # 0: every 10% of the epochs
    knn_k: int = 10
    out_dir: str = ""  # empty: $AET_OUT_DIR or ./runs/out
    wall_clock: bool = True  # record per-epoch wall time in the metrics log
    data: DataConfig = field(default_factory=DataConfig)
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    xform: XformConfig = field(default_factory=XformConfig)
    nin: NinConfig = field(default_factory=NinConfig)
    sgd: SgdConfig = field(default_factory=SgdConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)

    def __post_init__(self):
        if self.epochs <= 0:
            raise ValueError("epochs must be positive")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2 (batch-norm)")
        if self.knn_k < 1 or self.eval_every < 0:
            raise ValueError("knn_k must be >= 1 and eval_every >= 0")

    @property
    def eval_cadence(self) -> int:
        return self.eval_every or max(1, self.epochs // 10)

    def resolved_out_dir(self) -> str:
        return self.out_dir or os.path.join(os.environ.get("AET_OUT_DIR", "runs"), "out")

    def check_paths(self):
        if self.data.name == "cifar10" and not os.path.isdir(self.data.path):
            raise ConfigError(f"data.path does not exist: {self.data.path!r}")


SECTIONS = ("data", "synthetic", "xform", "nin", "sgd", "probe")


# ---------------------------------------------------------------------------
# flat key/value text format

def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ", ".join(_format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_scalar(text: str, like):
    text = text.strip()
    if isinstance(like, bool):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if isinstance(like, int):
        return int(text)
    if isinstance(like, float):
        return float(text)
    if like is None:
        for cast in (int, float):
            try:
                return cast(text)
            except ValueError:
                pass
    return text


def _parse_value(text: str, default):
    if isinstance(default, tuple):
        items = [t for t in (s.strip() for s in text.split(",")) if t]
        like = default[0] if default else None
        return tuple(_parse_scalar(t, like) for t in items)
    return _parse_scalar(text, default)


def to_flat(cfg: RunConfig) -> dict:
    """Every field as ``dotted.key -> text``, in declaration order."""
    out = {}
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if f.name in SECTIONS:
            for sf in dataclasses.fields(v):
                if sf.repr:
                    out[f"{f.name}.{sf.name}"] = _format_value(getattr(v, sf.name))
        else:
            out[f.name] = _format_value(v)
    return out


def from_flat(values: dict, base: RunConfig | None = None) -> RunConfig:
    """Apply ``dotted.key -> text`` overrides on top of ``base`` (or defaults)."""
    base = base or RunConfig()
    top = {f.name: getattr(base, f.name) for f in dataclasses.fields(base) if f.name not in SECTIONS}
    sections = {s: {f.name: getattr(getattr(base, s), f.name) for f in dataclasses.fields(getattr(base, s))}
                for s in SECTIONS}
    for key, text in values.items():
        section, _, name = key.rpartition(".")
        target = sections.get(section) if section else top
        if target is None or name not in target:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            target[name] = _parse_value(str(text), target[name])
        except ValueError as e:
            raise ConfigError(f"bad value for {key!r}: {e}") from e
    try:
        built = {s: type(getattr(base, s))(**sections[s]) for s in SECTIONS}
        return RunConfig(**top, **built)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e


def parse_text(text: str, source="<config>") -> dict:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        values[key.strip()] = value.strip()
    return values


def load_config(path, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the file, then ``overrides`` (highest precedence)."""
    values = {}
    if path:
        try:
            with open(path) as fh:
                values = parse_text(fh.read(), str(path))
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
    values.update(overrides or {})
    return from_flat(values)


def dump_config(cfg: RunConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in to_flat(cfg).items())
