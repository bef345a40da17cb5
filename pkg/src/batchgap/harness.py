"""Experiment orchestration: single runs, grids, presets, run verification.

A run directory contains:

  manifest.json      config snapshot, seeds, dataset provenance, timestamps
  telemetry.csv      trajectory rows (byte-deterministic given the seeds)
  norm_schedule.csv  per-step update-gradient norms (donor data for grafting)
  params.bin         final parameter checkpoint
  result.json        final/best accuracies and run status
  abort.bin          last-good checkpoint, present only after an abort
"""

from __future__ import annotations

import datetime as _dt
import itertools
import json
import logging
import traceback
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import (
    ConfigError,
    DatasetConfig,
    ExperimentConfig,
    GridSpec,
    Seeds,
    serialize_config,
)
from .data import Dataset, load_idx, make_synthetic_splits
from .models import accuracy, save_checkpoint
from .regularizers import RegularizerSpec
from .telemetry import RunLogger, read_telemetry
from .trainer import train
from .update_rules import NormSchedule, UpdateConfig

log = logging.getLogger(__name__)

RESULT_FILE = "result.json"
MANIFEST_FILE = "manifest.json"
TELEMETRY_FILE = "telemetry.csv"
SCHEDULE_FILE = "norm_schedule.csv"
CHECKPOINT_FILE = "params.bin"
ABORT_FILE = "abort.bin"

DONOR_PLACEHOLDER = "@sb_sgd"


@dataclass
class RunResult:
    run_dir: str
    status: str                    # ok | aborted | failed
    final_test_acc: float | None
    best_val_acc: float | None
    telemetry_path: str
    manifest_path: str
    error: str = ""


def build_datasets(cfg: ExperimentConfig) -> tuple[Dataset, Dataset, Dataset]:
    ds = cfg.dataset
    if ds.kind == "synthetic":
        return make_synthetic_splits(
            clusters=ds.clusters, dim=ds.dim, size=ds.size, classes=ds.classes,
            label_noise=ds.label_noise, seed=cfg.seeds.data,
            separation=ds.separation, input_scale=ds.input_scale,
            val_size=ds.val_size, test_size=ds.test_size)
    full = load_idx(ds.images, ds.labels, whiten=ds.whiten)
    if ds.test_images:
        test = load_idx(ds.test_images, ds.test_labels, whiten=ds.whiten)
        carve = ds.val_size
    else:
        carve = ds.val_size + ds.test_size
        test = None
    if carve >= full.n:
        raise ConfigError("val/test carve-out exceeds the dataset size")
    val = Dataset(full.inputs[full.n - ds.val_size:], full.labels[full.n - ds.val_size:],
                  num_classes=full.num_classes, split="val", provenance=full.provenance)
    if test is None:
        lo, hi = full.n - carve, full.n - ds.val_size
        test = Dataset(full.inputs[lo:hi], full.labels[lo:hi],
                       num_classes=full.num_classes, split="test",
                       provenance=full.provenance)
    train_ds = Dataset(full.inputs[:full.n - carve], full.labels[:full.n - carve],
                       num_classes=full.num_classes, split="train",
                       provenance=full.provenance)
    return train_ds, val, test


def run_experiment(cfg: ExperimentConfig, out_dir: str | None = None) -> RunResult:
    """Execute one configured run and materialize its run directory."""
    run_dir = Path(out_dir or cfg.out_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = run_dir / MANIFEST_FILE
    telemetry_path = run_dir / TELEMETRY_FILE

    train_ds, val_ds, test_ds = build_datasets(cfg)
    manifest = {
        "config": serialize_config(cfg),
        "seeds": {"data": cfg.seeds.data, "init": cfg.seeds.init,
                  "reg": cfg.seeds.reg, "update": cfg.seeds.update},
        "dataset_provenance": train_ds.provenance,
        "version": __version__,
        "started_at": _dt.datetime.now().isoformat(timespec="seconds"),
        "status": "running",
    }
    manifest_path.write_text(json.dumps(manifest, indent=2, default=str) + "\n")

    last_epoch = [-1]
    with RunLogger(telemetry_path) as logger:
        def on_record(rec):
            logger.append(rec)
            if rec.epoch != last_epoch[0]:
                logger.flush()
                last_epoch[0] = rec.epoch

        outcome = train(cfg, train_ds, val_ds, on_record=on_record)

    if outcome.grad_norms:
        NormSchedule(np.arange(len(outcome.grad_norms)),
                     np.array(outcome.grad_norms)).save(run_dir / SCHEDULE_FILE)

    status = "aborted" if outcome.aborted else "ok"
    if outcome.aborted:
        save_checkpoint(outcome.params, run_dir / ABORT_FILE)
        log.error("run aborted at step %d: %s", outcome.steps_completed, outcome.abort_reason)
        final_test = None
    else:
        save_checkpoint(outcome.params, run_dir / CHECKPOINT_FILE)
        final_test = accuracy(outcome.params, test_ds.inputs, test_ds.labels)

    result = {
        "status": status,
        "final_test_acc": final_test,
        "best_val_acc": outcome.best_val_acc,
        "steps_completed": outcome.steps_completed,
        "abort_reason": outcome.abort_reason,
    }
    (run_dir / RESULT_FILE).write_text(json.dumps(result, indent=2) + "\n")
    manifest["status"] = status
    manifest["finished_at"] = _dt.datetime.now().isoformat(timespec="seconds")
    manifest_path.write_text(json.dumps(manifest, indent=2, default=str) + "\n")

    return RunResult(run_dir=str(run_dir), status=status, final_test_acc=final_test,
                     best_val_acc=outcome.best_val_acc,
                     telemetry_path=str(telemetry_path),
                     manifest_path=str(manifest_path),
                     error=outcome.abort_reason)


# ---------------------------------------------------------------------------
# grid execution
# ---------------------------------------------------------------------------

# Named run variants: overrides applied to the grid's base config.  'sb'/'lb'
# refer to the grid-level small/large batch sizes.
VARIANTS = ("sb_sgd", "lb_sgd", "lb_gn", "lb_ft", "lb_aj", "lb_uj",
            "lb_sample_gn", "eg", "ig", "ngd", "anti_pgd")

_PENALTY_OF = {"lb_gn": "gn", "lb_ft": "ft", "lb_aj": "aj", "lb_uj": "uj",
               "lb_sample_gn": "sample_gn"}


def variant_config(grid: GridSpec, variant: str, axis_values: dict, repeat: int
                   ) -> ExperimentConfig:
    """Resolve one grid cell into a full experiment config."""
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}")
    base = grid.base
    sb, lb = grid.sb_batch_size, grid.lb_batch_size
    lr = float(axis_values.get("lr", base.update.lr))
    micro = int(axis_values.get("micro_batch_size", min(sb, lb)))

    batch = sb if variant == "sb_sgd" else lb
    reg = None
    if variant in ("sb_sgd", "lb_sgd") or variant in _PENALTY_OF:
        # sgd keeps the base run's momentum/decay/schedule knobs
        update = replace(base.update, rule="sgd", lr=lr, sigma_sq=0.0,
                         shutoff_step=None, norm_schedule_path=None)
    elif variant == "ig":
        update = UpdateConfig(rule="graft_iterative", lr=lr)
    elif variant == "eg":
        donor = base.update.norm_schedule_path or DONOR_PLACEHOLDER
        update = UpdateConfig(rule="graft_external", lr=lr, norm_schedule_path=donor)
    elif variant == "ngd":
        update = UpdateConfig(rule="ngd", lr=lr)
    else:  # anti_pgd
        sigma_sq = float(axis_values.get("sigma_sq", base.update.sigma_sq or 0.01))
        shutoff = base.update.shutoff_step
        if shutoff is None:
            shutoff = (3 * base.steps) // 4  # leave a noise-free tail to converge
        update = UpdateConfig(rule="anti_pgd", lr=lr, sigma_sq=sigma_sq,
                              shutoff_step=shutoff)

    if variant in _PENALTY_OF:
        strength = axis_values.get("strength")
        if strength is None:
            strength = (base.regularizer.strength if base.regularizer is not None
                        else 0.01)
        reg = RegularizerSpec(kind=_PENALTY_OF[variant], strength=float(strength),
                              micro_batch_size=micro)
    if variant == "sb_sgd":
        micro = min(micro, sb)
    seeds = Seeds(data=base.seeds.data + repeat, init=base.seeds.init + repeat,
                  reg=base.seeds.reg + repeat, update=base.seeds.update + repeat)
    return replace(base, batch_size=batch, micro_batch_size=micro,
                   regularizer=reg, update=update, seeds=seeds)


def _cell_name(variant: str, axis_values: dict, repeat: int) -> str:
    parts = [variant]
    for key in sorted(axis_values):
        parts.append(f"{key}={axis_values[key]:g}")
    parts.append(f"r{repeat}")
    return "-".join(parts)


def run_grid(grid: GridSpec, out_root: str) -> tuple[list[RunResult], str]:
    """Run every cell of the grid; per-cell failures are recorded, not fatal.

    Returns all results plus the path of a summary CSV aggregating repeats
    per cell (mean test accuracy with half-range spread).
    """
    root = Path(out_root)
    root.mkdir(parents=True, exist_ok=True)
    axis_names = list(grid.axes)
    axis_space = list(itertools.product(*(grid.axes[a] for a in axis_names))) or [()]

    results: list[RunResult] = []
    rows: dict[tuple, list[RunResult]] = {}
    donor_schedules: dict[int, str] = {}

    for variant in grid.variants:
        for combo in axis_space:
            axis_values = dict(zip(axis_names, combo))
            for repeat in range(grid.repeats):
                name = _cell_name(variant, axis_values, repeat)
                run_dir = root / name
                try:
                    cfg = variant_config(grid, variant, axis_values, repeat)
                    if cfg.update.norm_schedule_path == DONOR_PLACEHOLDER:
                        donor = donor_schedules.get(repeat)
                        if donor is None:
                            raise ConfigError(
                                "external grafting needs an sb_sgd cell (same repeat) "
                                "to run first, or an explicit norm_schedule path")
                        cfg = replace(cfg, update=replace(cfg.update,
                                                          norm_schedule_path=donor))
                    result = run_experiment(cfg, out_dir=str(run_dir))
                except Exception as exc:  # cell isolation: grid must continue
                    log.error("cell %s failed: %s", name, exc)
                    log.debug("%s", traceback.format_exc())
                    result = RunResult(run_dir=str(run_dir), status="failed",
                                       final_test_acc=None, best_val_acc=None,
                                       telemetry_path="", manifest_path="",
                                       error=str(exc))
                if variant == "sb_sgd" and result.status == "ok":
                    donor_schedules.setdefault(
                        repeat, str(Path(result.run_dir) / SCHEDULE_FILE))
                results.append(result)
                rows.setdefault((variant, combo), []).append(result)

    summary_path = root / "summary.csv"
    with open(summary_path, "w") as fh:
        header = ["variant", *axis_names, "runs", "ok", "mean_test_acc",
                  "half_range", "mean_best_val"]
        fh.write(",".join(header) + "\n")
        for (variant, combo), cell in rows.items():
            accs = [r.final_test_acc for r in cell if r.final_test_acc is not None]
            vals = [r.best_val_acc for r in cell if r.best_val_acc is not None]
            cols = [variant, *(f"{v:g}" for v in combo), str(len(cell)), str(len(accs)),
                    f"{np.mean(accs):.6f}" if accs else "",
                    f"{(np.max(accs) - np.min(accs)) / 2:.6f}" if accs else "",
                    f"{np.mean(vals):.6f}" if vals else ""]
            fh.write(",".join(cols) + "\n")
    return results, str(summary_path)


# ---------------------------------------------------------------------------
# shipped presets
# ---------------------------------------------------------------------------

def _desk_base(steps: int, out_dir: str = "runs/preset") -> ExperimentConfig:
    return ExperimentConfig(
        dataset=DatasetConfig(), hidden=(256, 256), batch_size=32,
        micro_batch_size=32, steps=steps, metric_every=10,
        out_dir=out_dir, update=UpdateConfig(rule="sgd", lr=0.1),
    )


def preset_experiments(steps: int = 5000, repeats: int = 3) -> dict[str, GridSpec]:
    """Named experiment grids mirroring the study's comparison layouts.

    ``steps``/``repeats`` rescale the budget; the default is the full
    desk-scale protocol (32 vs 1024 batch sizes, 5000 steps).
    """
    base = _desk_base(steps)
    common = dict(repeats=repeats, sb_batch_size=32, lb_batch_size=1024,
                  max_cells=512)
    presets = {
        "regularizer-comparison": GridSpec(
            base=base,
            variants=("sb_sgd", "lb_sgd", "lb_gn", "lb_ft", "lb_aj", "lb_uj"),
            axes={}, **common),
        "microbatch-ablation": GridSpec(
            base=base, variants=("lb_gn", "lb_ft"),
            axes={"micro_batch_size": (32, 128, 512, 1024)}, **common),
        "sample-penalty-sweep": GridSpec(
            base=base, variants=("lb_sample_gn",),
            axes={"strength": (0.003, 0.01, 0.03, 0.1),
                  "micro_batch_size": (32, 128, 512)}, **common),
        "grafting-comparison": GridSpec(
            base=base, variants=("sb_sgd", "lb_sgd", "eg", "ig", "ngd"),
            axes={}, **common),
        "anti-pgd-grid": GridSpec(
            base=base, variants=("anti_pgd",),
            axes={"lr": (0.05, 0.1, 0.5), "sigma_sq": (0.01, 0.001)}, **common),
        "desk-directional": desk_directional_grid(),
    }
    return presets


# Tuned once over the shipped grid machinery (lr in {0.05..0.4}, strength in
# {0.1, 0.3, 1.0}, both batch regimes on the same lr grid) and pinned; the
# dataset's small input scale keeps initial logits near zero so the early
# gradient-norm rise is visible at this budget.
DESK_DIRECTIONAL_STRENGTH = 0.3


def desk_directional_grid(seeds: int = 5) -> GridSpec:
    """Reduced-budget grid for the directional small-vs-large batch check.

    Batch sizes keep the 32x ratio of the full protocol; the dataset, step
    budget and model are shrunk so five seeds of six variants finish within
    minutes on a laptop CPU.
    """
    base = ExperimentConfig(
        dataset=DatasetConfig(clusters=16, dim=32, size=1024, classes=8,
                              label_noise=0.25, separation=1.2, input_scale=0.2,
                              val_size=512, test_size=2048),
        hidden=(64, 64), batch_size=32, micro_batch_size=32, steps=600,
        metric_every=20, eval_batch_size=256, eval_micro_batch_size=32,
        out_dir="runs/desk-directional",
        update=UpdateConfig(rule="sgd", lr=0.4),
    )
    return GridSpec(base=base,
                    variants=("sb_sgd", "lb_sgd", "lb_gn", "lb_ft"),
                    axes={"strength": (DESK_DIRECTIONAL_STRENGTH,)},
                    repeats=seeds, sb_batch_size=32, lb_batch_size=1024,
                    max_cells=512)


# ---------------------------------------------------------------------------
# run verification
# ---------------------------------------------------------------------------

def verify_run(run_dir: str) -> list[str]:
    """Check a run directory for completeness; returns problems (empty = ok)."""
    root = Path(run_dir)
    problems = []
    manifest = root / MANIFEST_FILE
    telemetry = root / TELEMETRY_FILE
    result = root / RESULT_FILE
    if not manifest.exists():
        problems.append(f"missing {MANIFEST_FILE}")
    else:
        try:
            json.loads(manifest.read_text())
        except json.JSONDecodeError as exc:
            problems.append(f"unreadable manifest: {exc}")
    if not telemetry.exists():
        problems.append(f"missing {TELEMETRY_FILE}")
    else:
        try:
            records = read_telemetry(telemetry)
            steps = [r.step for r in records]
            if steps != sorted(set(steps)):
                problems.append("telemetry steps are not strictly increasing")
            if not records:
                problems.append("telemetry has no rows")
        except ValueError as exc:
            problems.append(str(exc))
    if not result.exists():
        problems.append(f"missing {RESULT_FILE}")
    else:
        try:
            res = json.loads(result.read_text())
            if res.get("status") == "ok":
                if res.get("final_test_acc") is None:
                    problems.append("result lacks final_test_acc")
                if not (root / CHECKPOINT_FILE).exists():
                    problems.append(f"missing {CHECKPOINT_FILE}")
        except json.JSONDecodeError as exc:
            problems.append(f"unreadable result: {exc}")
    return problems
