"""Distillation plan: dataclasses plus an INI reader/writer.

Plan files have the sections ``[data]``, ``[student]``, ``[teachers]``,
``[distill]`` and ``[optim]``. ``[teachers]`` maps teacher names to
checkpoint paths, in order.
"""

from __future__ import annotations

import configparser
import io
import os
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Dict, List, Optional

from .datagen import ShapeGridSpec
from .encoder import EncoderConfig
from .errors import ConfigError
from .losses import BalancingStrategy


@dataclass
class OptimConfig:
    lr: float = 3e-4
    weight_decay: float = 0.03
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 64
    epochs: int = 30
    warmup_epochs: int = 3
    grad_clip: float = 0.0  # 0 disables clipping


@dataclass
class StudentConfig:
    dim: int = 32
    depth: int = 4
    heads: int = 4
    mlp_ratio: int = 4
    seed: int = 0


@dataclass
class DistillPlan:
    data: ShapeGridSpec = field(default_factory=ShapeGridSpec)
    student: StudentConfig = field(default_factory=StudentConfig)
    teachers: Dict[str, str] = field(default_factory=dict)
    standardize: bool = True
    dedicated_projectors: bool = True
    ladder: bool = True
    selected_blocks: Optional[List[int]] = None
    top_hidden: Optional[int] = None
    rung_hidden: Optional[int] = None
    elementwise_l1: bool = False
    balancing: BalancingStrategy = field(default_factory=BalancingStrategy)
    std_decay: float = 0.99
    std_eps: float = 1e-6
    std_freeze_epoch: int = 0  # 0 keeps statistics updating for the whole run
    fresh_data: bool = True
    optim: OptimConfig = field(default_factory=OptimConfig)
    seed: int = 0
    output: str = "runs/distill"
    checkpoint_every: int = 0  # steps; 0 writes only the final checkpoint
    checkpoint_dtype: str = "f32"
    workers: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self):
        o = self.optim
        if o.warmup_epochs >= o.epochs:
            raise ConfigError(f"warmup_epochs ({o.warmup_epochs}) must be below epochs ({o.epochs})")
        if o.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if self.data.train_size < o.batch_size:
            raise ConfigError("train_size must hold at least one batch")
        if self.checkpoint_dtype not in ("f32", "f64"):
            raise ConfigError(f"checkpoint_dtype must be f32 or f64, got {self.checkpoint_dtype!r}")
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")
        if self.balancing.kind == "manual" and self.teachers and \
                len(self.balancing.manual_weights) != len(self.teachers):
            raise ConfigError("manual_weights needs one weight per teacher")
        self.encoder_config()

    def require_teachers(self):
        if not self.teachers:
            raise ConfigError("plan lists no teachers")

    def encoder_config(self) -> EncoderConfig:
        s = self.student
        return EncoderConfig(image_size=self.data.image_size, channels=self.data.channels,
                             patch_size=self.data.cell_pixels, dim=s.dim, depth=s.depth, heads=s.heads,
                             mlp_ratio=s.mlp_ratio, seed=s.seed)

    @property
    def steps_per_epoch(self):
        return self.data.train_size // self.optim.batch_size

    @property
    def total_steps(self):
        return self.steps_per_epoch * self.optim.epochs

    def with_balancing(self, **kw):
        return replace(self, balancing=replace(self.balancing, **kw))


# ---------------------------------------------------------------- INI io

def _parse_bool(v):
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {v!r}")


def _parse_list(v, cast):
    v = str(v).strip()
    if v in ("", "none"):
        return None
    return [cast(x) for x in v.replace(" ", "").split(",") if x]


def _coerce(value, template, name):
    try:
        if isinstance(template, bool):
            return _parse_bool(value)
        if isinstance(template, int):
            return int(value)
        if isinstance(template, float):
            return float(value)
        return str(value)
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {value!r}") from exc


def _fill(cls, items, section):
    defaults = cls()
    known = {f.name for f in fields(cls)}
    kw = {}
    for k, v in items.items():
        if k not in known:
            raise ConfigError(f"unknown key {k!r} in [{section}]")
        kw[k] = _coerce(v, getattr(defaults, k), f"{section}.{k}")
    return cls(**{**asdict(defaults), **kw})


_DISTILL_SCALARS = ("standardize", "dedicated_projectors", "ladder", "elementwise_l1", "std_decay", "std_eps",
                    "std_freeze_epoch", "fresh_data", "seed", "output", "checkpoint_every",
                    "checkpoint_dtype", "workers")
_OPTIONAL_INTS = ("top_hidden", "rung_hidden")
_BALANCING_KEYS = {"balancing": "kind", "p": "p", "granularity": "granularity",
                   "manual_weights": "manual_weights", "adaloss_decay": "adaloss_decay"}


def plan_from_parser(cp: configparser.ConfigParser, base_dir=".", overrides=None) -> DistillPlan:
    sections = {s: dict(cp.items(s)) for s in cp.sections()}
    for key, value in (overrides or {}).items():
        sec, _, name = key.partition(".")
        sections.setdefault(sec, {})[name] = value
    unknown = set(sections) - {"data", "student", "teachers", "distill", "optim"}
    if unknown:
        raise ConfigError(f"unknown sections {sorted(unknown)}")
    data = _fill(ShapeGridSpec, sections.get("data", {}), "data")
    student = _fill(StudentConfig, sections.get("student", {}), "student")
    optim = _fill(OptimConfig, sections.get("optim", {}), "optim")
    teachers = {}
    for name, path in sections.get("teachers", {}).items():
        path = os.path.expanduser(path)
        teachers[name] = path if os.path.isabs(path) else os.path.normpath(os.path.join(base_dir, path))
    dist = dict(sections.get("distill", {}))
    defaults = DistillPlan.__dataclass_fields__
    kw = {}
    bal_defaults = BalancingStrategy()
    bal = {}
    for k, v in dist.items():
        if k in _DISTILL_SCALARS:
            kw[k] = _coerce(v, defaults[k].default, f"distill.{k}")
        elif k in _OPTIONAL_INTS:
            kw[k] = None if str(v).strip().lower() in ("", "none") else _coerce(v, 0, f"distill.{k}")
        elif k == "selected_blocks":
            kw[k] = _parse_list(v, int)
        elif k in _BALANCING_KEYS:
            attr = _BALANCING_KEYS[k]
            if attr == "manual_weights":
                bal[attr] = _parse_list(v, float)
            else:
                bal[attr] = _coerce(v, getattr(bal_defaults, attr), f"distill.{k}")
        else:
            raise ConfigError(f"unknown key {k!r} in [distill]")
    output = kw.get("output")
    if output is not None and not os.path.isabs(output):
        kw["output"] = os.path.normpath(os.path.join(base_dir, output))
    return DistillPlan(data=data, student=student, teachers=teachers, optim=optim,
                       balancing=BalancingStrategy(**bal), **kw)


def load_plan(path, overrides=None) -> DistillPlan:
    cp = configparser.ConfigParser()
    if not cp.read(path):
        raise ConfigError(f"cannot read plan file {path}")
    return plan_from_parser(cp, os.path.dirname(os.path.abspath(path)), overrides)


def parse_plan(text, base_dir=".", overrides=None) -> DistillPlan:
    cp = configparser.ConfigParser()
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    return plan_from_parser(cp, base_dir, overrides)


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, list):
        return ",".join(str(x) for x in v)
    if v is None:
        return "none"
    return repr(v) if isinstance(v, float) else str(v)


def plan_to_ini(plan: DistillPlan) -> str:
    """Fully resolved plan, readable by :func:`parse_plan`."""
    cp = configparser.ConfigParser()
    cp["data"] = {k: _fmt(v) for k, v in asdict(plan.data).items()}
    cp["student"] = {k: _fmt(v) for k, v in asdict(plan.student).items()}
    cp["teachers"] = dict(plan.teachers)
    dist = {k: _fmt(getattr(plan, k)) for k in _DISTILL_SCALARS}
    dist["selected_blocks"] = _fmt(plan.selected_blocks)
    for k in _OPTIONAL_INTS:
        dist[k] = _fmt(getattr(plan, k))
    for key, attr in _BALANCING_KEYS.items():
        dist[key] = _fmt(getattr(plan.balancing, attr))
    cp["distill"] = dist
    cp["optim"] = {k: _fmt(v) for k, v in asdict(plan.optim).items()}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()
