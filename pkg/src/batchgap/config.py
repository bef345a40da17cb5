"""Experiment configuration: parsing, validation, serialization.

The format is line-oriented ``key = value`` under ``[section]`` headers with
``#`` comment lines.  Unknown sections or keys are rejected, and every error
names the offending line, so a typo never silently falls back to a default.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .autodiff import GradMode
from .regularizers import RegularizerSpec
from .update_rules import UpdateConfig

DEFAULT_LR = 0.1          # shipped tuning default for plain runs
DEFAULT_STRENGTH = 0.01   # shipped tuning default for gn/ft penalties


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetConfig:
    kind: str = "synthetic"
    clusters: int = 20
    dim: int = 64
    size: int = 8192
    classes: int = 10
    label_noise: float = 0.1
    separation: float = 1.0
    input_scale: float = 1.0
    val_size: int = 1024
    test_size: int = 2048
    images: str | None = None
    labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None
    whiten: bool = False

    def __post_init__(self):
        if self.kind not in ("synthetic", "idx"):
            raise ConfigError(f"unknown dataset kind {self.kind!r}")
        if self.kind == "idx" and (self.images is None or self.labels is None):
            raise ConfigError("idx dataset needs both images and labels paths")
        if not 0.0 <= self.label_noise < 1.0:
            raise ConfigError("label_noise must lie in [0, 1)")
        if self.clusters < self.classes:
            raise ConfigError("need at least one cluster per class")


@dataclass(frozen=True)
class Seeds:
    data: int = 0
    init: int = 0
    reg: int = 0
    update: int = 0


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    hidden: tuple[int, ...] = (256, 256)
    batch_size: int = 32
    micro_batch_size: int = 32
    steps: int = 5000
    metric_every: int = 10
    eval_batch_size: int = 1280
    eval_micro_batch_size: int = 128
    seeds: Seeds = field(default_factory=Seeds)
    out_dir: str = "runs/run"
    wall_clock: bool = False
    regularizer: RegularizerSpec | None = None
    update: UpdateConfig = field(default_factory=UpdateConfig)

    def __post_init__(self):
        if self.batch_size < 1 or self.steps < 0 or self.metric_every < 1:
            raise ConfigError("batch_size, metric_every must be positive; steps non-negative")
        if self.batch_size % self.micro_batch_size != 0:
            raise ConfigError(
                f"micro_batch_size {self.micro_batch_size} does not divide "
                f"batch_size {self.batch_size}"
            )
        if self.eval_batch_size % self.eval_micro_batch_size != 0:
            raise ConfigError(
                f"eval_micro_batch_size {self.eval_micro_batch_size} does not divide "
                f"eval_batch_size {self.eval_batch_size}"
            )
        if self.update.rule == "graft_external" and not self.update.norm_schedule_path:
            raise ConfigError("graft_external needs a norm_schedule path")
        if self.regularizer is not None and self.update.rule != "sgd":
            raise ConfigError("penalized losses are studied under plain sgd only")


# ---------------------------------------------------------------------------
# raw text -> sections
# ---------------------------------------------------------------------------

def _split_sections(text: str) -> dict[str, dict[str, tuple[str, int]]]:
    """Parse the section/key/value surface; values keep their line numbers."""
    sections: dict[str, dict[str, tuple[str, int]]] = {}
    current: str | None = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            sections.setdefault(current, {})
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        if current is None:
            raise ConfigError(f"line {lineno}: key outside any [section]")
        key, _, value = line.partition("=")
        key = key.strip()
        if key in sections[current]:
            raise ConfigError(f"line {lineno}: duplicate key {key!r} in [{current}]")
        sections[current][key] = (value.strip(), lineno)
    return sections


def _cast_int(v: str) -> int:
    return int(v)


def _cast_float(v: str) -> float:
    return float(v)


def _cast_bool(v: str) -> bool:
    lv = v.lower()
    if lv in ("true", "yes", "on", "1"):
        return True
    if lv in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _cast_str(v: str) -> str:
    return v


def _cast_int_tuple(v: str) -> tuple[int, ...]:
    if not v:
        return ()
    return tuple(int(p.strip()) for p in v.split(","))


_SCHEMA = {
    "dataset": {
        "kind": _cast_str, "clusters": _cast_int, "dim": _cast_int, "size": _cast_int,
        "classes": _cast_int, "label_noise": _cast_float, "separation": _cast_float,
        "input_scale": _cast_float,
        "val_size": _cast_int, "test_size": _cast_int, "images": _cast_str,
        "labels": _cast_str, "test_images": _cast_str, "test_labels": _cast_str,
        "whiten": _cast_bool,
    },
    "model": {"hidden": _cast_int_tuple},
    "training": {
        "batch_size": _cast_int, "micro_batch_size": _cast_int, "steps": _cast_int,
        "metric_every": _cast_int, "eval_batch_size": _cast_int,
        "eval_micro_batch_size": _cast_int, "seed_data": _cast_int,
        "seed_init": _cast_int, "seed_reg": _cast_int, "seed_update": _cast_int,
        "out_dir": _cast_str, "wall_clock": _cast_bool,
    },
    "regularizer": {
        "kind": _cast_str, "strength": _cast_float, "micro_batch_size": _cast_int,
        "grad_mode": _cast_str, "fd_eps": _cast_float,
    },
    "update": {
        "rule": _cast_str, "lr": _cast_float, "momentum": _cast_float,
        "weight_decay": _cast_float, "schedule": _cast_str, "cosine_period": _cast_int,
        "sigma_sq": _cast_float, "shutoff_step": _cast_int, "norm_schedule": _cast_str,
    },
}


def _typed_section(sections, name: str) -> dict:
    """Cast one section against its schema; unknown keys name their line."""
    raw = sections.get(name, {})
    out = {}
    for key, (value, lineno) in raw.items():
        caster = _SCHEMA[name].get(key)
        if caster is None:
            raise ConfigError(f"line {lineno}: unknown key {key!r} in [{name}]")
        try:
            out[key] = caster(value)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key!r}: {exc}") from None
    return out


def _line_of(sections, name: str, key: str) -> str:
    """Human-readable location of a key, when it was given explicitly."""
    entry = sections.get(name, {}).get(key)
    return f"line {entry[1]}: " if entry else ""


def _build_config(sections) -> ExperimentConfig:
    for name in sections:
        if name not in _SCHEMA and name != "grid":
            raise ConfigError(f"unknown section [{name}]")

    ds = DatasetConfig(**_typed_section(sections, "dataset"))
    model = _typed_section(sections, "model")
    tr = _typed_section(sections, "training")
    upd_raw = _typed_section(sections, "update")
    reg_raw = _typed_section(sections, "regularizer")

    seeds = Seeds(data=tr.pop("seed_data", 0), init=tr.pop("seed_init", 0),
                  reg=tr.pop("seed_reg", 0), update=tr.pop("seed_update", 0))

    if "norm_schedule" in upd_raw:
        upd_raw["norm_schedule_path"] = upd_raw.pop("norm_schedule")
    if "lr" not in upd_raw:
        upd_raw["lr"] = DEFAULT_LR
    try:
        update = UpdateConfig(**upd_raw)
    except ValueError as exc:
        raise ConfigError(f"[update]: {exc}") from None

    regularizer = None
    if reg_raw:
        if "kind" not in reg_raw:
            raise ConfigError("[regularizer] section needs a kind")
        mode_name = reg_raw.pop("grad_mode", "double_backprop")
        fd_eps = reg_raw.pop("fd_eps", None)
        if mode_name == "double_backprop":
            mode = GradMode.double_backprop()
        elif mode_name == "finite_difference":
            mode = GradMode.finite_difference(fd_eps)
        else:
            raise ConfigError(f"unknown grad_mode {mode_name!r}")
        reg_raw.setdefault("strength", DEFAULT_STRENGTH)
        reg_raw.setdefault("micro_batch_size", tr.get("micro_batch_size", 32))
        try:
            regularizer = RegularizerSpec(grad_mode=mode, **reg_raw)
        except ValueError as exc:
            raise ConfigError(f"[regularizer]: {exc}") from None

    # one micro-batch size governs both the partition and the penalty
    if regularizer is not None and "micro_batch_size" in sections.get("regularizer", {}):
        if "micro_batch_size" in tr and tr["micro_batch_size"] != regularizer.micro_batch_size:
            where = _line_of(sections, "regularizer", "micro_batch_size")
            raise ConfigError(
                f"{where}conflicting micro_batch_size in [training] and [regularizer]"
            )
        tr["micro_batch_size"] = regularizer.micro_batch_size
    try:
        return ExperimentConfig(dataset=ds, hidden=model.get("hidden", (256, 256)),
                                seeds=seeds, regularizer=regularizer, update=update, **tr)
    except ConfigError as exc:
        where = (_line_of(sections, "regularizer", "micro_batch_size")
                 or _line_of(sections, "training", "micro_batch_size"))
        raise ConfigError(f"{where}{exc}") from None


def parse_config(text: str) -> ExperimentConfig:
    sections = _split_sections(text)
    if "grid" in sections:
        raise ConfigError("this is a grid file; use parse_grid")
    return _build_config(sections)


def serialize_config(cfg: ExperimentConfig) -> str:
    """Render every effective value; reparsing yields an equal config."""
    ds = cfg.dataset
    lines = ["[dataset]", f"kind = {ds.kind}"]
    if ds.kind == "synthetic":
        lines += [f"clusters = {ds.clusters}", f"dim = {ds.dim}", f"size = {ds.size}",
                  f"classes = {ds.classes}", f"label_noise = {ds.label_noise!r}",
                  f"separation = {ds.separation!r}",
                  f"input_scale = {ds.input_scale!r}", f"val_size = {ds.val_size}",
                  f"test_size = {ds.test_size}"]
    else:
        lines += [f"images = {ds.images}", f"labels = {ds.labels}"]
        if ds.test_images:
            lines += [f"test_images = {ds.test_images}", f"test_labels = {ds.test_labels}"]
        lines += [f"val_size = {ds.val_size}", f"test_size = {ds.test_size}",
                  f"whiten = {str(ds.whiten).lower()}"]
    lines += ["", "[model]", f"hidden = {','.join(str(w) for w in cfg.hidden)}"]
    lines += [
        "", "[training]",
        f"batch_size = {cfg.batch_size}",
        f"micro_batch_size = {cfg.micro_batch_size}",
        f"steps = {cfg.steps}",
        f"metric_every = {cfg.metric_every}",
        f"eval_batch_size = {cfg.eval_batch_size}",
        f"eval_micro_batch_size = {cfg.eval_micro_batch_size}",
        f"seed_data = {cfg.seeds.data}",
        f"seed_init = {cfg.seeds.init}",
        f"seed_reg = {cfg.seeds.reg}",
        f"seed_update = {cfg.seeds.update}",
        f"out_dir = {cfg.out_dir}",
        f"wall_clock = {str(cfg.wall_clock).lower()}",
    ]
    reg = cfg.regularizer
    if reg is not None:
        lines += ["", "[regularizer]", f"kind = {reg.kind}",
                  f"strength = {reg.strength!r}",
                  f"micro_batch_size = {reg.micro_batch_size}",
                  f"grad_mode = {reg.grad_mode.kind}"]
        if reg.grad_mode.eps is not None:
            lines.append(f"fd_eps = {reg.grad_mode.eps!r}")
    upd = cfg.update
    lines += ["", "[update]", f"rule = {upd.rule}", f"lr = {upd.lr!r}",
              f"momentum = {upd.momentum!r}", f"weight_decay = {upd.weight_decay!r}",
              f"schedule = {upd.schedule}"]
    if upd.cosine_period is not None:
        lines.append(f"cosine_period = {upd.cosine_period}")
    if upd.rule == "anti_pgd":
        lines.append(f"sigma_sq = {upd.sigma_sq!r}")
        if upd.shutoff_step is not None:
            lines.append(f"shutoff_step = {upd.shutoff_step}")
    if upd.norm_schedule_path:
        lines.append(f"norm_schedule = {upd.norm_schedule_path}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# grids
# ---------------------------------------------------------------------------

GRID_AXES = ("lr", "strength", "micro_batch_size", "sigma_sq")

_GRID_SCHEMA = {
    "variants": _cast_str, "repeats": _cast_int, "max_cells": _cast_int,
    "sb_batch_size": _cast_int, "lb_batch_size": _cast_int,
    "lr": _cast_str, "strength": _cast_str, "micro_batch_size": _cast_str,
    "sigma_sq": _cast_str,
}


@dataclass(frozen=True)
class GridSpec:
    """Cross product of variants and hyperparameter axes over a base config."""

    base: ExperimentConfig
    variants: tuple[str, ...]
    axes: dict[str, tuple]
    repeats: int = 1
    max_cells: int = 256
    sb_batch_size: int = 32
    lb_batch_size: int = 1024

    def __post_init__(self):
        if not self.variants:
            raise ConfigError("grid needs at least one variant")
        if self.repeats < 1:
            raise ConfigError("repeats must be positive")
        count = self.cell_count()
        if count > self.max_cells:
            raise ConfigError(f"grid has {count} cells, above the limit of {self.max_cells}")

    def cell_count(self) -> int:
        n = len(self.variants) * self.repeats
        for vals in self.axes.values():
            n *= len(vals)
        return n


def parse_grid(text: str) -> GridSpec:
    sections = _split_sections(text)
    if "grid" not in sections:
        raise ConfigError("grid file needs a [grid] section")
    raw = {}
    for key, (value, lineno) in sections.pop("grid").items():
        if key not in _GRID_SCHEMA:
            raise ConfigError(f"line {lineno}: unknown key {key!r} in [grid]")
        raw[key] = _GRID_SCHEMA[key](value)
    base = _build_config(sections)

    if "variants" not in raw:
        raise ConfigError("[grid] needs a variants list")
    variants = tuple(v.strip() for v in raw["variants"].split(",") if v.strip())
    axes = {}
    for name in GRID_AXES:
        if name in raw:
            cast = _cast_int if name == "micro_batch_size" else _cast_float
            axes[name] = tuple(cast(p.strip()) for p in raw[name].split(","))
    return GridSpec(base=base, variants=variants, axes=axes,
                    repeats=raw.get("repeats", 1), max_cells=raw.get("max_cells", 256),
                    sb_batch_size=raw.get("sb_batch_size", 32),
                    lb_batch_size=raw.get("lb_batch_size", 1024))


def serialize_grid(grid: GridSpec) -> str:
    lines = ["[grid]", f"variants = {', '.join(grid.variants)}"]
    for name, vals in grid.axes.items():
        lines.append(f"{name} = {', '.join(repr(v) if isinstance(v, float) else str(v) for v in vals)}")
    lines += [f"repeats = {grid.repeats}", f"max_cells = {grid.max_cells}",
              f"sb_batch_size = {grid.sb_batch_size}",
              f"lb_batch_size = {grid.lb_batch_size}", ""]
    return "\n".join(lines) + serialize_config(grid.base)
