"""Penalized training losses built on squared micro-batch gradient norms.

Every penalty here has the same skeleton: split the mini-batch into equal
micro-batches, attach to each micro-batch a scalar (a loss or a weighted
logit average), and penalize the squared parameter-gradient norm of that
scalar.  The variants differ only in the scalar:

  gn         cross-entropy against the true labels
  ft         cross-entropy against labels drawn from the model's own
             predictive distribution (a one-sample Fisher-trace estimate)
  aj         uniform logit average (1/(C*m)) * sum of all logits
  uj         logit average weighted by a fresh unit-sphere vector per
             micro-batch
  sample_gn  gn restricted to a single uniformly drawn micro-batch

The total objective is base_loss + strength * penalty where the penalty is
the mean of the squared norms over the penalized micro-batches.  Gradients
flow through both factors of the norm (full double backprop) unless the
finite-difference mode is selected.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import DegenerateStepError, GradMode, Tape, Tensor, default_fd_eps
from .data import MicroBatchPartition
from .models import (
    ModelParams,
    cross_entropy_tensor,
    forward_tensor,
    sample_predictive_label,
)

KINDS = ("gn", "ft", "aj", "uj", "sample_gn")


@dataclass(frozen=True)
class RegularizerSpec:
    """Which penalty to apply, how strongly, and over what micro-batches."""

    kind: str
    strength: float = 0.01
    micro_batch_size: int = 32
    grad_mode: GradMode = GradMode.double_backprop()
    stream: int = 0  # salts the per-step rng derivation

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown regularizer kind {self.kind!r}")
        if self.strength < 0:
            raise ValueError("regularizer strength must be non-negative")
        if self.micro_batch_size < 1:
            raise ValueError("micro-batch size must be positive")

    @property
    def needs_rng(self) -> bool:
        return self.kind in ("ft", "uj", "sample_gn")


@dataclass
class PenaltyReport:
    """Telemetry for one penalized-loss evaluation."""

    base_loss: float
    penalty_value: float          # pre-strength, mean over penalized slices
    num_microbatches: int         # how many slices were penalized
    microbatch_sq_norms: list[float]


class PenalizedLoss(NamedTuple):
    value: float
    gradient: np.ndarray
    report: PenaltyReport


def unit_sphere_sample(c: int, rng: np.random.Generator) -> np.ndarray:
    """Isotropic unit vector: normalized Gaussian draw, redrawn if zero."""
    if c < 1:
        raise ValueError("dimension must be positive")
    while True:
        v = rng.standard_normal(c)
        norm = float(np.linalg.norm(v))
        if norm > 0.0:
            return v / norm


# ---------------------------------------------------------------------------
# generic engine
# ---------------------------------------------------------------------------

ScalarPair = Callable[[int, Tensor], tuple[Tensor, Tensor]]


def penalized_scalar_objective(theta: np.ndarray, k: int, make_slice_scalars: ScalarPair,
                               strength: float, mode: GradMode = GradMode.double_backprop(),
                               pen_slices: set[int] | None = None,
                               pen_multiplier: float = 1.0,
                               check_finite: bool = True) -> PenalizedLoss:
    """Mean of per-slice scalars plus a squared-gradient-norm penalty.

    ``make_slice_scalars(i, theta_tensor)`` builds the slice's base and
    penalty scalars on theta's tape; it may be re-invoked at a perturbed
    theta in finite-difference mode, but its first invocation for a slice is
    always at the unperturbed point (so per-slice sampling can be cached).
    Slices outside ``pen_slices`` contribute only their base scalar.
    """
    theta = np.asarray(theta, dtype=np.float64)
    penalized = set(range(k)) if pen_slices is None else pen_slices
    lam = strength * pen_multiplier

    total_grad = np.zeros_like(theta)
    base_sum = 0.0
    sq_norms: list[float] = []

    for i in range(k):
        if i in penalized:
            if mode.kind == "double_backprop":
                base_val, grad_i, sq = _penalized_slice_double(
                    theta, i, make_slice_scalars, lam, check_finite)
            else:
                base_val, grad_i, sq = _penalized_slice_fd(
                    theta, i, make_slice_scalars, lam, mode.eps, check_finite)
            sq_norms.append(sq)
        else:
            tape = Tape(check_finite=check_finite)
            th = tape.leaf(theta, name="theta")
            base, _ = make_slice_scalars(i, th)
            base_val = base.item()
            grad_i = tape.backward(base).wrt(th).values
        base_sum += base_val
        total_grad += grad_i

    base_loss = base_sum / k
    penalty = float(np.sum(sq_norms) / len(sq_norms)) if sq_norms else 0.0
    value = base_loss + strength * penalty
    report = PenaltyReport(base_loss=base_loss, penalty_value=penalty,
                           num_microbatches=len(sq_norms), microbatch_sq_norms=sq_norms)
    return PenalizedLoss(value, total_grad / k, report)


def _penalized_slice_double(theta, i, make_slice_scalars, lam, check_finite):
    tape = Tape(check_finite=check_finite)
    th = tape.leaf(theta, name="theta")
    base, pen = make_slice_scalars(i, th)
    first = tape.backward(pen, create_graph=True)
    sq = ad.sum(ad.square(first.wrt(th)))
    obj = ad.add(base, ad.scale(sq, lam))
    grad = tape.backward(obj).wrt(th).values
    return base.item(), grad, sq.item()


def _penalized_slice_fd(theta, i, make_slice_scalars, lam, eps, check_finite):
    tape = Tape(check_finite=check_finite)
    th = tape.leaf(theta, name="theta")
    base, pen = make_slice_scalars(i, th)
    base_val = base.item()
    v = tape.backward(pen).wrt(th).values
    sq = float(np.sum(v * v))  # same reduction as the double-backprop path

    # second forward for the base gradient (the first tape is consumed)
    tape_b = Tape(check_finite=check_finite)
    th_b = tape_b.leaf(theta, name="theta")
    base_b, _ = make_slice_scalars(i, th_b)
    grad = tape_b.backward(base_b).wrt(th_b).values

    if lam != 0.0 and np.any(v):
        step = eps if eps is not None else default_fd_eps(theta)
        probe = theta + step * v
        if np.array_equal(probe, theta):
            raise DegenerateStepError(
                f"finite-difference step eps={step:g} does not move the parameters"
            )
        tape_p = Tape(check_finite=check_finite)
        th_p = tape_p.leaf(probe, name="theta")
        _, pen_p = make_slice_scalars(i, th_p)
        v_probe = tape_p.backward(pen_p).wrt(th_p).values
        grad = grad + lam * 2.0 * (v_probe - v) / step
    return base_val, grad, sq


# ---------------------------------------------------------------------------
# the five penalties
# ---------------------------------------------------------------------------

def _ce_family(params: ModelParams, x: np.ndarray, y: np.ndarray,
               partition: MicroBatchPartition, strength: float, mode: GradMode,
               pen_labels_for, pen_slices=None, pen_multiplier=1.0,
               check_finite=True) -> PenalizedLoss:
    """Shared path for gn/ft/sample_gn: penalty scalar is a cross-entropy.

    ``pen_labels_for(i, logits_values)`` picks the labels of slice i's
    penalty term; results are cached so finite-difference probes reuse the
    same draw.
    """
    spec = params.spec
    cache: dict[int, np.ndarray] = {}

    def make(i: int, th: Tensor):
        sl = partition.slices[i]
        logits = forward_tensor(th, spec, x[sl])
        base = cross_entropy_tensor(logits, y[sl])
        if i not in cache:
            cache[i] = pen_labels_for(i, logits.values)
        pen = cross_entropy_tensor(logits, cache[i])
        return base, pen

    return penalized_scalar_objective(params.flat, partition.k, make, strength, mode,
                                      pen_slices=pen_slices, pen_multiplier=pen_multiplier,
                                      check_finite=check_finite)


def gn_penalized_loss(params: ModelParams, x: np.ndarray, y: np.ndarray,
                      partition: MicroBatchPartition, strength: float,
                      mode: GradMode = GradMode.double_backprop(),
                      check_finite: bool = True) -> PenalizedLoss:
    """Base loss plus the mean squared micro-batch loss-gradient norm."""

    def labels(i, _logits):
        return y[partition.slices[i]]

    return _ce_family(params, x, y, partition, strength, mode, labels,
                      check_finite=check_finite)


def ft_penalized_loss(params: ModelParams, x: np.ndarray, y: np.ndarray,
                      partition: MicroBatchPartition, strength: float,
                      rng: np.random.Generator,
                      mode: GradMode = GradMode.double_backprop(),
                      label_override: np.ndarray | None = None,
                      check_finite: bool = True) -> PenalizedLoss:
    """Fisher-trace penalty: like gn but against sampled predictive labels.

    One label per example per call, drawn from per-slice child streams so the
    draw is independent of slice evaluation order.  ``label_override`` (a
    full-length label array) replaces the sampling; overriding with the true
    labels makes this bit-identical to :func:`gn_penalized_loss`.
    """
    streams = rng.spawn(partition.k)

    def labels(i, logits_values):
        if label_override is not None:
            return np.asarray(label_override)[partition.slices[i]]
        return sample_predictive_label(logits_values, streams[i])

    return _ce_family(params, x, y, partition, strength, mode, labels,
                      check_finite=check_finite)


def sample_gn_penalized_loss(params: ModelParams, x: np.ndarray, y: np.ndarray,
                             partition: MicroBatchPartition, strength: float,
                             rng: np.random.Generator,
                             mode: GradMode = GradMode.double_backprop(),
                             check_finite: bool = True) -> PenalizedLoss:
    """Penalize one uniformly drawn micro-batch's gradient norm, at full weight."""
    s = int(rng.integers(partition.k))

    def labels(i, _logits):
        return y[partition.slices[i]]

    return _ce_family(params, x, y, partition, strength, mode, labels,
                      pen_slices={s}, pen_multiplier=float(partition.k),
                      check_finite=check_finite)


def aj_penalized_loss(params: ModelParams, x: np.ndarray, y: np.ndarray,
                      partition: MicroBatchPartition, strength: float,
                      mode: GradMode = GradMode.double_backprop(),
                      check_finite: bool = True) -> PenalizedLoss:
    """Average-Jacobian penalty: squared norm of the uniform logit-mean gradient.

    The penalty scalar is the plain mean of all logits in the micro-batch, so
    its gradient is the network Jacobian contracted with the uniform class
    weighting; labels are never read by the penalty.
    """
    spec = params.spec

    def make(i: int, th: Tensor):
        sl = partition.slices[i]
        logits = forward_tensor(th, spec, x[sl])
        base = cross_entropy_tensor(logits, y[sl])
        pen = ad.mean(logits)
        return base, pen

    return penalized_scalar_objective(params.flat, partition.k, make, strength, mode,
                                      check_finite=check_finite)


def uj_penalized_loss(params: ModelParams, x: np.ndarray, y: np.ndarray,
                      partition: MicroBatchPartition, strength: float,
                      rng: np.random.Generator,
                      mode: GradMode = GradMode.double_backprop(),
                      unit_override: np.ndarray | None = None,
                      check_finite: bool = True) -> PenalizedLoss:
    """Unit-Jacobian penalty: random unit-sphere class weighting per micro-batch."""
    spec = params.spec
    streams = rng.spawn(partition.k)
    units: dict[int, np.ndarray] = {}

    def make(i: int, th: Tensor):
        sl = partition.slices[i]
        logits = forward_tensor(th, spec, x[sl])
        base = cross_entropy_tensor(logits, y[sl])
        if i not in units:
            if unit_override is not None:
                units[i] = np.asarray(unit_override, dtype=np.float64)
            else:
                units[i] = unit_sphere_sample(spec.class_count, streams[i])
        u_row = Tensor(units[i].reshape(1, -1))
        pen = ad.scale(ad.sum(ad.mul(logits, u_row)), 1.0 / len(sl))
        return base, pen

    return penalized_scalar_objective(params.flat, partition.k, make, strength, mode,
                                      check_finite=check_finite)


def ft_microbatch_sq_norms(params: ModelParams, x: np.ndarray, y: np.ndarray,
                           partition: MicroBatchPartition, rng: np.random.Generator,
                           check_finite: bool = True) -> list[float]:
    """Per-slice squared sampled-label gradient norms, first-order only.

    Shares the sampling scheme and reduction of :func:`ft_penalized_loss`
    exactly (same spawned streams, same inverse-CDF draw, same summation), so
    with an identically seeded rng the mean of this list equals that
    function's reported penalty value bit-for-bit at a fraction of the cost.
    """
    spec = params.spec
    streams = rng.spawn(partition.k)
    out = []
    for i, sl in enumerate(partition.slices):
        tape = Tape(check_finite=check_finite)
        th = tape.leaf(params.flat, name="theta")
        logits = forward_tensor(th, spec, x[sl])
        labels = sample_predictive_label(logits.values, streams[i])
        pen = cross_entropy_tensor(logits, labels)
        v = tape.backward(pen).wrt(th).values
        out.append(float(np.sum(v * v)))
    return out


def penalized_loss(params: ModelParams, x: np.ndarray, y: np.ndarray,
                   partition: MicroBatchPartition, spec: RegularizerSpec,
                   rng: np.random.Generator | None = None,
                   check_finite: bool = True) -> PenalizedLoss:
    """Dispatch on the regularizer kind."""
    if spec.needs_rng and rng is None:
        raise ValueError(f"regularizer {spec.kind!r} needs an rng")
    kw = dict(mode=spec.grad_mode, check_finite=check_finite)
    if spec.kind == "gn":
        return gn_penalized_loss(params, x, y, partition, spec.strength, **kw)
    if spec.kind == "ft":
        return ft_penalized_loss(params, x, y, partition, spec.strength, rng, **kw)
    if spec.kind == "aj":
        return aj_penalized_loss(params, x, y, partition, spec.strength, **kw)
    if spec.kind == "uj":
        return uj_penalized_loss(params, x, y, partition, spec.strength, rng, **kw)
    return sample_gn_penalized_loss(params, x, y, partition, spec.strength, rng, **kw)
