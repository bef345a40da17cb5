"""The step-budgeted training loop shared by the harness and the estimator.

Each step: draw a mini-batch, partition it into micro-batches, evaluate the
(optionally penalized) loss and gradient, apply the update rule, and log
telemetry at the metric cadence.  All randomness flows from four explicit
seeds (data, init, regularizer, update); metric-time sampling is derived
from the data seed and the step index so that diagnostics never perturb the
training streams.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .config import ExperimentConfig
from .data import (
    BatchSampler,
    Dataset,
    microbatch_gradients,
    partition_microbatches,
)
from .models import (
    ModelParams,
    ModelSpec,
    batch_loss_and_gradient,
    cross_entropy_values,
    forward_values,
)
from .regularizers import penalized_loss
from .telemetry import (
    TrajectoryRecord,
    avg_microbatch_grad_norm,
    fisher_trace_estimate,
)
from .update_rules import (
    AntiPgdState,
    NormSchedule,
    UpdateError,
    anti_pgd_step,
    external_graft_magnitude,
    graft_step,
    graft_step_with_magnitude,
    iterative_graft_gradients,
    lr_at,
    ngd_step,
    sgd_step,
)

_SAMPLER_SALT = 0x73616D70   # "samp"
_EVAL_SALT = 0x6576616C      # "eval"
_METRIC_SALT = 0x6D657472    # "metr"


@dataclass
class TrainOutcome:
    params: ModelParams
    records: list[TrajectoryRecord]
    grad_norms: list[float]          # per-step update-gradient norms (donor data)
    best_val_acc: float
    steps_completed: int
    aborted: bool = False
    abort_reason: str = ""


def _eval_extent(n: int, want_size: int, want_micro: int) -> tuple[int, int]:
    """Largest evaluation batch/micro pair that fits the available data."""
    size = min(want_size, n)
    micro = min(want_micro, size)
    size -= size % micro
    return size, micro


def train(cfg: ExperimentConfig, train_ds: Dataset, val_ds: Dataset,
          on_record=None) -> TrainOutcome:
    spec = ModelSpec(train_ds.dim, train_ds.num_classes, cfg.hidden,
                     init_seed=cfg.seeds.init)
    params = ModelParams.init(spec)
    sampler = BatchSampler(train_ds.n, seed=[cfg.seeds.data, _SAMPLER_SALT])
    upd_rng = np.random.default_rng([cfg.seeds.update])
    upd = cfg.update
    reg = cfg.regularizer

    velocity = None
    anti_state = None
    if upd.rule == "anti_pgd":
        anti_state = AntiPgdState.init(params.count, upd.sigma_sq, upd.shutoff_step)
    donor = None
    if upd.rule == "graft_external":
        donor = NormSchedule.load(upd.norm_schedule_path)

    eval_size, eval_micro = _eval_extent(train_ds.n, cfg.eval_batch_size,
                                         cfg.eval_micro_batch_size)
    eval_rng = np.random.default_rng([cfg.seeds.data, _EVAL_SALT])
    eval_idx = eval_rng.choice(train_ds.n, size=eval_size, replace=False)
    x_eval, y_eval = train_ds.inputs[eval_idx], train_ds.labels[eval_idx]

    x_train, y_train = train_ds.inputs, train_ds.labels
    x_val, y_val = val_ds.inputs, val_ds.labels

    t0 = time.perf_counter()
    records: list[TrajectoryRecord] = []
    grad_norms: list[float] = []
    best_val = 0.0

    def measure(step: int, penalty_value, update_norm: float) -> None:
        nonlocal best_val
        logits = forward_values(params, x_eval)
        train_loss = cross_entropy_values(logits, y_eval)
        train_acc = float(np.mean(np.argmax(logits, axis=1) == y_eval))
        val_acc = float(np.mean(np.argmax(forward_values(params, x_val), axis=1) == y_val))
        best_val = max(best_val, val_acc)
        avg_norm = avg_microbatch_grad_norm(params, x_eval, y_eval, eval_micro,
                                            check_finite=False)
        metric_rng = np.random.default_rng([cfg.seeds.data, _METRIC_SALT, step])
        fisher = fisher_trace_estimate(params, x_eval, y_eval, eval_micro, metric_rng,
                                       check_finite=False)
        wall = (time.perf_counter() - t0) * 1000.0 if cfg.wall_clock else 0.0
        rec = TrajectoryRecord(
            step=step, epoch=step * cfg.batch_size // train_ds.n,
            train_loss=train_loss, train_acc=train_acc, val_acc=val_acc,
            avg_mb_grad_norm=avg_norm, fisher_trace=fisher, penalty=penalty_value,
            update_norm=update_norm, lr=lr_at(upd, step), wall_ms=wall,
        )
        records.append(rec)
        if on_record is not None:
            on_record(rec)

    measure(0, None, 0.0)

    for step in range(cfg.steps):
        batch_idx = sampler.next_batch(cfg.batch_size)

        penalty_value = None
        slice_grads = None
        try:
            if reg is not None:
                partition = partition_microbatches(batch_idx, cfg.micro_batch_size)
                step_rng = None
                if reg.needs_rng:
                    step_rng = np.random.default_rng([cfg.seeds.reg, reg.stream, step])
                result = penalized_loss(params, x_train, y_train, partition, reg,
                                        step_rng, check_finite=False)
                loss_val, grad = result.value, result.gradient
                penalty_value = result.report.penalty_value
            elif upd.rule == "graft_iterative":
                partition = partition_microbatches(batch_idx, cfg.micro_batch_size)
                losses, slice_grads = microbatch_gradients(params, x_train, y_train,
                                                           partition, check_finite=False)
                loss_val = float(np.sum(losses) / len(losses))
                grad = np.zeros_like(params.flat)
                for g in slice_grads:
                    grad += g
                grad /= len(slice_grads)
            else:
                loss_val, grad = batch_loss_and_gradient(
                    params, x_train[batch_idx], y_train[batch_idx], check_finite=False)

            if not np.isfinite(loss_val) or not np.all(np.isfinite(grad)):
                raise UpdateError(f"non-finite loss or gradient at step {step}")

            theta = params.flat
            if upd.rule == "sgd":
                new_theta, velocity = sgd_step(theta, grad, upd, velocity, step)
            elif upd.rule == "ngd":
                new_theta = ngd_step(theta, grad, upd.lr)
            elif upd.rule == "graft_iterative":
                g_m, g_d = iterative_graft_gradients(slice_grads, grad, upd.lr, upd_rng)
                new_theta = graft_step(theta, g_m, g_d)
            elif upd.rule == "graft_external":
                mag = external_graft_magnitude(donor, step, upd.lr)
                new_theta = graft_step_with_magnitude(theta, mag, grad)
            else:
                new_theta, anti_state = anti_pgd_step(theta, grad, anti_state,
                                                      upd.lr, step, upd_rng)
        except UpdateError as exc:
            return TrainOutcome(params=params, records=records, grad_norms=grad_norms,
                                best_val_acc=best_val, steps_completed=step,
                                aborted=True, abort_reason=str(exc))

        grad_norms.append(float(np.linalg.norm(grad)))
        update_norm = float(np.linalg.norm(new_theta - theta))
        params = ModelParams(spec, new_theta)

        done = step + 1
        if done % cfg.metric_every == 0 or done == cfg.steps:
            measure(done, penalty_value, update_norm)

    return TrainOutcome(params=params, records=records, grad_norms=grad_norms,
                        best_val_acc=best_val, steps_completed=cfg.steps)
