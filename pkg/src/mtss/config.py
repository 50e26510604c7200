"""Experiment configuration: a line-oriented ``key = value`` format with ``[section]`` headers.

Sections and keys are closed-world. ``[task.<id>]`` sections declare tasks in
the order they appear; that order is the serial schedule order. Example::

    [experiment]
    id = rp_col
    seed = 3

    [task.rp]
    kind = relative_position

    [task.col]
    kind = colorization

:func:`serialize_config` writes every key (defaults included) in a fixed
order, so parse -> serialize -> parse is the identity.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field, fields
from enum import Enum

from .tasks import AugmentConfig, TaskKind, TaskSpec
from .trunk import TrunkConfig


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class Mode(str, Enum):
    ASYNC = "async"
    SYNC = "sync"
    HYBRID = "hybrid"


class LassoMode(str, Enum):
    NONE = "none"
    EVAL_ONLY = "eval_only"
    PRETRAIN_ONLY = "pretrain_only"
    BOTH = "both"

    @property
    def pretrain(self) -> bool:
        return self in (LassoMode.PRETRAIN_ONLY, LassoMode.BOTH)

    @property
    def eval(self) -> bool:
        return self in (LassoMode.EVAL_ONLY, LassoMode.BOTH)


@dataclass(frozen=True)
class OptimizerConfig:
    rho: float = 0.9
    lr: float = 1e-3
    eps: float = 1e-8


@dataclass(frozen=True)
class TaskEntry:
    """A task plus how the simulated cluster runs it."""
    spec: TaskSpec
    workers: int = 1
    quota: int = 0  # 0 means workers - backups
    backups: int = 0
    latency: float = 1.0
    latency_jitter: float = 0.0
    slow_workers: int = 0
    slow_factor: float = 1.0

    @property
    def effective_quota(self) -> int:
        return self.quota or self.workers - self.backups


@dataclass(frozen=True)
class EvalConfig:
    suite: tuple[str, ...] = ("frozen_linear", "finetune", "depth")
    train_size: int = 240
    test_size: int = 400
    probe_steps: int = 300
    probe_lr: float = 0.01
    finetune_steps: int = 60
    finetune_lr: float = 1e-3
    depth_train_size: int = 64
    depth_test_size: int = 32
    depth_steps: int = 60
    batch_size: int = 16
    topk: int = 2


EVAL_KINDS = ("frozen_linear", "finetune", "depth")


@dataclass(frozen=True)
class ExperimentConfig:
    experiment_id: str
    seed: int
    tasks: tuple[TaskEntry, ...]
    mode: Mode = Mode.HYBRID
    precision: int = 64
    trunk: TrunkConfig = field(default_factory=TrunkConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    lasso_mode: LassoMode = LassoMode.NONE
    lasso_lambda: float = 1e-3
    max_steps: int = 0
    max_cost: float = 0.0
    checkpoint_interval: float = 0.0
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        if not self.tasks:
            raise ConfigError("at least one [task.<id>] section is required")
        ids = [t.spec.task_id for t in self.tasks]
        if len(set(ids)) != len(ids):
            raise ConfigError(f"duplicate task ids in {ids}")
        if self.max_steps <= 0 and self.max_cost <= 0:
            object.__setattr__(self, "max_steps", 0)
        if self.checkpoint_interval <= 0:
            object.__setattr__(self, "checkpoint_interval", self.default_checkpoint_interval())

    def default_checkpoint_interval(self) -> float:
        """Budget divided into 8 ticks."""
        if self.max_cost > 0:
            return self.max_cost / 8.0
        mean_cost = sum(t.spec.step_cost for t in self.tasks) / len(self.tasks)
        return max(self.max_steps * mean_cost / 8.0, 1.0)

    @property
    def task_ids(self) -> list[str]:
        return [t.spec.task_id for t in self.tasks]

    def task(self, task_id: str) -> TaskEntry:
        for t in self.tasks:
            if t.spec.task_id == task_id:
                return t
        raise KeyError(task_id)

    def replace(self, **kw) -> "ExperimentConfig":
        from dataclasses import replace
        kw.setdefault("checkpoint_interval", self.checkpoint_interval if "max_cost" not in kw and "max_steps" not in kw else 0.0)
        return replace(self, **kw)


# ---------------------------------------------------------------------------
# schema
# ---------------------------------------------------------------------------

def _bool(text: str) -> bool:
    t = text.lower()
    if t in ("true", "yes", "on", "1"):
        return True
    if t in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, Enum):
        return v.value
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ", ".join(_fmt(x) for x in v)
    return str(v)


def _positive(lo=None, hi=None, strict=False):
    def check(v):
        if lo is not None and (v <= lo if strict else v < lo):
            return f"must be {'>' if strict else '>='} {lo}"
        if hi is not None and v > hi:
            return f"must be <= {hi}"
        if isinstance(v, float) and not math.isfinite(v):
            return "must be finite"
        return None
    return check


def _choice(*options):
    def parse(text):
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {text!r}")
        return text
    return parse


def _suite(text):
    items = tuple(s.strip() for s in text.split(",") if s.strip())
    for s in items:
        if s not in EVAL_KINDS:
            raise ValueError(f"unknown evaluation {s!r} (choose from {', '.join(EVAL_KINDS)})")
    return items


def _pair(text):
    parts = [float(p) for p in text.split(",")]
    if len(parts) != 2:
        raise ValueError(f"expected two comma-separated numbers, got {text!r}")
    return tuple(parts)


# key: (parser, range check or None)
_EXPERIMENT = {
    "id": (str, None),
    "seed": (int, _positive(0)),
    "mode": (_choice("async", "sync", "hybrid"), None),
    "precision": (int, lambda v: None if v in (32, 64) else "must be 32 or 64"),
}
_TRUNK = {
    "units": (int, _positive(1)),
    "width": (int, _positive(1)),
    "stem_stride": (int, _positive(1)),
    "dilate_from": (int, _positive(0)),
    "zero_init_residual": (_bool, None),
    "residual_scale": (float, _positive(0.0)),
}
_OPTIMIZER = {
    "rho": (float, lambda v: None if 0.0 <= v < 1.0 else "must lie in [0, 1)"),
    "lr": (float, _positive(0.0, strict=True)),
    "eps": (float, _positive(0.0)),
}
_LASSO = {
    "mode": (_choice(*(m.value for m in LassoMode)), None),
    "lambda": (float, _positive(0.0)),
}
_TRAIN = {
    "max_steps": (int, _positive(0)),
    "max_cost": (float, _positive(0.0)),
    "checkpoint_interval": (float, _positive(0.0)),
}
_TASK = {
    "kind": (_choice(*(k.value for k in TaskKind)), None),
    "harmonized": (_bool, None),
    "lasso": (_choice("auto", "on", "off"), None),
    "batch_size": (int, _positive(1)),
    "image_size": (int, _positive(4)),
    "grid": (int, _positive(2)),
    "patch": (int, _positive(2)),
    "jitter": (int, _positive(0)),
    "bins": (int, _positive(2)),
    "label_stride": (int, _positive(1)),
    "margin": (float, _positive(0.0, strict=True)),
    "hidden": (int, _positive(1)),
    "embed": (int, _positive(1)),
    "step_cost": (float, _positive(0.0)),
    "loss_scale": (float, _positive(0.0, strict=True)),
    "augment_shift": (float, _positive(0.0)),
    "augment_rotation": (float, _positive(0.0)),
    "augment_scale": (_pair, None),
    "augment_color": (float, _positive(0.0)),
    "workers": (int, _positive(1)),
    "quota": (int, _positive(0)),
    "backups": (int, _positive(0)),
    "latency": (float, _positive(0.0, strict=True)),
    "latency_jitter": (float, _positive(0.0, hi=0.99)),
    "slow_workers": (int, _positive(0)),
    "slow_factor": (float, _positive(1.0)),
}
_EVAL = {
    "suite": (_suite, None),
    "train_size": (int, _positive(2)),
    "test_size": (int, _positive(1)),
    "probe_steps": (int, _positive(0)),
    "probe_lr": (float, _positive(0.0, strict=True)),
    "finetune_steps": (int, _positive(0)),
    "finetune_lr": (float, _positive(0.0, strict=True)),
    "depth_train_size": (int, _positive(1)),
    "depth_test_size": (int, _positive(1)),
    "depth_steps": (int, _positive(0)),
    "batch_size": (int, _positive(1)),
    "topk": (int, _positive(1)),
}
_SECTIONS = {
    "experiment": _EXPERIMENT,
    "trunk": _TRUNK,
    "optimizer": _OPTIMIZER,
    "lasso": _LASSO,
    "train": _TRAIN,
    "eval": _EVAL,
}

_TASK_ID = re.compile(r"^[A-Za-z0-9_]+$")


def _parse_lines(text: str):
    """Yield (lineno, section, key, value) with section headers resolved."""
    section = None
    seen: dict[tuple[str, str], int] = {}
    sections_seen: dict[str, int] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = re.sub(r"\s+[#;].*$", "", raw).strip()
        if not line or line[0] in "#;":
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"malformed section header {raw.strip()!r}", lineno)
            section = line[1:-1].strip()
            if section.startswith("task."):
                tid = section[5:]
                if not _TASK_ID.match(tid):
                    raise ConfigError(f"invalid task id {tid!r}", lineno)
            elif section not in _SECTIONS:
                raise ConfigError(f"unknown section [{section}]", lineno)
            if section in sections_seen:
                raise ConfigError(f"section [{section}] repeated (first at line {sections_seen[section]})", lineno)
            sections_seen[section] = lineno
            yield lineno, section, None, None
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", lineno)
        if section is None:
            raise ConfigError("key outside of any section", lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        schema = _TASK if section.startswith("task.") else _SECTIONS[section]
        if key not in schema:
            raise ConfigError(f"unknown key {key!r} in [{section}]", lineno)
        if (section, key) in seen:
            raise ConfigError(f"duplicate key {key!r} in [{section}]", lineno)
        seen[(section, key)] = lineno
        parser, check = schema[key]
        try:
            parsed = parser(value)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {exc}", lineno) from None
        if check is not None:
            problem = check(parsed)
            if problem:
                raise ConfigError(f"{key} = {value}: {problem}", lineno)
        yield lineno, section, key, parsed


def parse_config(text: str) -> ExperimentConfig:
    """Parse and validate; the first problem raises :class:`ConfigError` with its line."""
    values: dict[str, dict] = {s: {} for s in _SECTIONS}
    lines: dict[str, int] = {}
    tasks: dict[str, dict] = {}
    for lineno, section, key, value in _parse_lines(text):
        if section.startswith("task."):
            tasks.setdefault(section[5:], {})
            lines.setdefault(section, lineno)
            if key is not None:
                tasks[section[5:]][key] = value
        elif key is not None:
            values[section][key] = value
    ex = values["experiment"]
    if "seed" not in ex:
        raise ConfigError("missing mandatory key 'seed' in [experiment]", lines.get("experiment"))
    lasso_mode = LassoMode(values["lasso"].get("mode", "none"))
    entries = []
    for tid, kv in tasks.items():
        if "kind" not in kv:
            raise ConfigError(f"[task.{tid}] needs a 'kind'", lines[f"task.{tid}"])
        entries.append(_task_entry(tid, kv, lasso_mode, lines[f"task.{tid}"]))
    tr = values["train"]
    ev = dict(values["eval"])
    try:
        return ExperimentConfig(
            experiment_id=ex.get("id", "experiment"),
            seed=ex["seed"],
            mode=Mode(ex.get("mode", "hybrid")),
            precision=ex.get("precision", 64),
            trunk=TrunkConfig(**values["trunk"]),
            optimizer=OptimizerConfig(**values["optimizer"]),
            lasso_mode=lasso_mode,
            lasso_lambda=values["lasso"].get("lambda", 1e-3),
            tasks=tuple(entries),
            max_steps=tr.get("max_steps", 0),
            max_cost=tr.get("max_cost", 0.0),
            checkpoint_interval=tr.get("checkpoint_interval", 0.0),
            eval=EvalConfig(**ev),
        )
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _task_entry(tid: str, kv: dict, lasso_mode: LassoMode, lineno: int) -> TaskEntry:
    lasso = kv.pop("lasso", "auto")
    lasso_on = lasso_mode.pretrain if lasso == "auto" else lasso == "on"
    aug_default = AugmentConfig()
    augment = AugmentConfig(
        kv.pop("augment_shift", aug_default.max_shift),
        kv.pop("augment_rotation", aug_default.max_rotation),
        kv.pop("augment_scale", aug_default.scale_range),
        kv.pop("augment_color", aug_default.color_shift),
    )
    sched = {k: kv.pop(k) for k in ("workers", "quota", "backups", "latency", "latency_jitter",
                                    "slow_workers", "slow_factor") if k in kv}
    try:
        spec = TaskSpec(task_id=tid, lasso=lasso_on, augment=augment, **kv)
        entry = TaskEntry(spec, **sched)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"[task.{tid}]: {exc}", lineno) from None
    if entry.backups >= entry.workers:
        raise ConfigError(f"[task.{tid}]: backups ({entry.backups}) must be fewer than workers ({entry.workers})", lineno)
    if not 1 <= entry.effective_quota <= entry.workers:
        raise ConfigError(f"[task.{tid}]: quota {entry.effective_quota} outside 1..{entry.workers}", lineno)
    if entry.slow_workers > entry.workers:
        raise ConfigError(f"[task.{tid}]: slow_workers exceeds workers", lineno)
    return entry


def serialize_config(cfg: ExperimentConfig) -> str:
    """Canonical text with every key written out."""
    out = []

    def section(name, items):
        out.append(f"[{name}]")
        out.extend(f"{k} = {_fmt(v)}" for k, v in items)
        out.append("")

    section("experiment", [("id", cfg.experiment_id), ("seed", cfg.seed), ("mode", cfg.mode),
                           ("precision", cfg.precision)])
    section("trunk", [(f.name, getattr(cfg.trunk, f.name)) for f in fields(TrunkConfig)
                      if f.name != "in_channels"])
    section("optimizer", [(f.name, getattr(cfg.optimizer, f.name)) for f in fields(OptimizerConfig)])
    section("lasso", [("mode", cfg.lasso_mode), ("lambda", cfg.lasso_lambda)])
    section("train", [("max_steps", cfg.max_steps), ("max_cost", cfg.max_cost),
                      ("checkpoint_interval", cfg.checkpoint_interval)])
    for t in cfg.tasks:
        s = t.spec
        items = [("kind", s.kind), ("harmonized", s.harmonized), ("lasso", "on" if s.lasso else "off")]
        items += [(k, getattr(s, k)) for k in ("batch_size", "image_size", "grid", "patch", "jitter", "bins",
                                               "label_stride", "margin", "hidden", "embed", "step_cost",
                                               "loss_scale")]
        a = s.augment
        items += [("augment_shift", a.max_shift), ("augment_rotation", a.max_rotation),
                  ("augment_scale", tuple(a.scale_range)), ("augment_color", a.color_shift)]
        items += [(k, getattr(t, k)) for k in ("workers", "quota", "backups", "latency", "latency_jitter",
                                               "slow_workers", "slow_factor")]
        section(f"task.{s.task_id}", items)
    section("eval", [(f.name, getattr(cfg.eval, f.name)) for f in fields(EvalConfig)])
    return "\n".join(out)


def load_config(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())
