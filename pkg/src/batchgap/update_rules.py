"""Parameter update rules: SGD, gradient grafting, NGD, and Anti-PGD.

All rules operate on flat float64 parameter vectors and return new vectors;
mutable rule state (momentum velocity, Anti-PGD noise) is explicit.  Rules
never propagate non-finite values silently: a bad gradient aborts the step
with a diagnostic.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, replace

import numpy as np

log = logging.getLogger(__name__)

RULES = ("sgd", "graft_iterative", "graft_external", "ngd", "anti_pgd")
SCHEDULES = ("constant", "cosine")

NORM_SCHEDULE_HEADER = ["step", "grad_norm"]


class UpdateError(RuntimeError):
    """A step could not be applied (non-finite gradient, bad state)."""


@dataclass(frozen=True)
class UpdateConfig:
    """Rule selection plus the standard SGD knobs.

    Momentum, weight decay and the cosine schedule are SGD-only: the other
    rules are studied without those confounds.
    """

    rule: str = "sgd"
    lr: float = 0.1
    momentum: float = 0.0
    weight_decay: float = 0.0
    schedule: str = "constant"
    cosine_period: int | None = None
    sigma_sq: float = 0.0          # anti_pgd noise variance
    shutoff_step: int | None = None  # anti_pgd noise shutoff
    norm_schedule_path: str | None = None  # graft_external donor file

    def __post_init__(self):
        if self.rule not in RULES:
            raise ValueError(f"unknown update rule {self.rule!r}")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight decay must be non-negative")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.schedule == "cosine" and (self.cosine_period is None or self.cosine_period < 1):
            raise ValueError("cosine schedule needs a positive period")
        if self.sigma_sq < 0:
            raise ValueError("noise variance must be non-negative")
        if self.rule != "sgd" and (self.momentum != 0.0 or self.weight_decay != 0.0
                                   or self.schedule != "constant"):
            raise ValueError("momentum/weight decay/schedules apply to the sgd rule only")


def lr_at(cfg: UpdateConfig, step: int) -> float:
    """Learning rate in effect at a given step index."""
    if cfg.schedule == "cosine":
        return cfg.lr * (1.0 + np.cos(np.pi * step / cfg.cosine_period)) / 2.0
    return cfg.lr


def _check_gradient(gradient: np.ndarray, what: str = "gradient") -> np.ndarray:
    gradient = np.asarray(gradient, dtype=np.float64)
    if not np.all(np.isfinite(gradient)):
        bad = int(np.sum(~np.isfinite(gradient)))
        raise UpdateError(f"non-finite {what}: {bad} bad entries")
    return gradient


def sgd_step(theta: np.ndarray, gradient: np.ndarray, cfg: UpdateConfig,
             velocity: np.ndarray | None = None, step: int = 0
             ) -> tuple[np.ndarray, np.ndarray]:
    """Heavy-ball SGD: v <- momentum*v + g + wd*theta; theta <- theta - lr_t*v."""
    gradient = _check_gradient(gradient)
    if gradient.shape != theta.shape:
        raise UpdateError(f"gradient shape {gradient.shape} != parameter shape {theta.shape}")
    if velocity is None:
        velocity = np.zeros_like(theta)
    d = gradient
    if cfg.weight_decay != 0.0:
        d = d + cfg.weight_decay * theta
    velocity = cfg.momentum * velocity + d
    return theta - lr_at(cfg, step) * velocity, velocity


def graft_step(theta: np.ndarray, magnitude_grad: np.ndarray, direction_grad: np.ndarray
               ) -> np.ndarray:
    """Step whose length is taken from one gradient and direction from another.

    The update is -||g_M|| * g_D / ||g_D||.  A vanishing direction gradient
    skips the step (logged) since normalizing it is meaningless.
    """
    g_m = _check_gradient(magnitude_grad, "magnitude gradient")
    return graft_step_with_magnitude(theta, float(np.linalg.norm(g_m)), direction_grad)


def graft_step_with_magnitude(theta: np.ndarray, magnitude: float,
                              direction_grad: np.ndarray) -> np.ndarray:
    g_d = _check_gradient(direction_grad, "direction gradient")
    norm_d = float(np.linalg.norm(g_d))
    if norm_d <= 1e-12 * (1.0 + float(np.linalg.norm(theta))):
        log.warning("grafting: direction gradient vanished (norm %.3e), skipping step", norm_d)
        return theta.copy()
    return theta - (magnitude / norm_d) * g_d


def iterative_graft_gradients(slice_gradients: list[np.ndarray], mean_gradient: np.ndarray,
                              lr: float, rng: np.random.Generator
                              ) -> tuple[np.ndarray, np.ndarray]:
    """Magnitude from one uniformly drawn micro-batch gradient, direction from the mean.

    The drawn slice gradient is reused from the accumulation pass rather than
    recomputed, so grafting costs one extra norm and no extra backward.
    """
    pick = int(rng.integers(len(slice_gradients)))
    return lr * slice_gradients[pick], mean_gradient


def ngd_step(theta: np.ndarray, gradient: np.ndarray, lr: float) -> np.ndarray:
    """Normalized gradient descent: every update has Euclidean length lr."""
    g = _check_gradient(gradient)
    norm = float(np.linalg.norm(g))
    if norm <= 1e-12 * (1.0 + float(np.linalg.norm(theta))):
        log.warning("ngd: gradient vanished (norm %.3e), skipping step", norm)
        return theta.copy()
    return theta - (lr / norm) * g


@dataclass
class AntiPgdState:
    """Carry-over noise vector for anticorrelated perturbations."""

    sigma_sq: float
    xi: np.ndarray
    shutoff_step: int | None = None

    @classmethod
    def init(cls, param_count: int, sigma_sq: float, shutoff_step: int | None = None
             ) -> "AntiPgdState":
        if sigma_sq < 0:
            raise ValueError("noise variance must be non-negative")
        return cls(sigma_sq=sigma_sq, xi=np.zeros(param_count), shutoff_step=shutoff_step)


def anti_pgd_step(theta: np.ndarray, gradient: np.ndarray, state: AntiPgdState,
                  lr: float, step: int, rng: np.random.Generator
                  ) -> tuple[np.ndarray, AntiPgdState]:
    """SGD step plus the difference of consecutive Gaussian noise draws.

    perturbation_k = xi_{k+1} - xi_k with xi ~ N(0, sigma^2 I); consecutive
    perturbations are anticorrelated (correlation -1/2) and their sum
    telescopes, so shutting the noise off lets the iterates converge.
    """
    g = _check_gradient(gradient)
    active = state.shutoff_step is None or step < state.shutoff_step
    if active and state.sigma_sq > 0.0:
        xi_next = rng.normal(0.0, np.sqrt(state.sigma_sq), size=theta.shape)
    else:
        xi_next = state.xi
    new_theta = theta - lr * g + (xi_next - state.xi)
    return new_theta, replace(state, xi=xi_next)


# ---------------------------------------------------------------------------
# donor norm schedules for external grafting
# ---------------------------------------------------------------------------

@dataclass
class NormSchedule:
    """Recorded per-step gradient norms from a donor training run."""

    steps: np.ndarray
    norms: np.ndarray

    def __post_init__(self):
        self.steps = np.asarray(self.steps, dtype=np.int64)
        self.norms = np.asarray(self.norms, dtype=np.float64)
        if self.steps.size == 0:
            raise ValueError("empty norm schedule")
        if self.steps.size != self.norms.size:
            raise ValueError("steps and norms differ in length")
        if np.any(np.diff(self.steps) <= 0):
            raise ValueError("schedule steps must be strictly increasing")
        if np.any(self.norms < 0):
            raise ValueError("recorded norms must be non-negative")

    def norm_at(self, step: int) -> float:
        """Recorded norm at a step, linearly interpolated between records.

        Before the first record the first value holds; past the last record
        the final value holds (with a warning, since the donor ran shorter).
        """
        if step > int(self.steps[-1]):
            log.warning("norm schedule ends at step %d; holding last value for step %d",
                        int(self.steps[-1]), step)
            return float(self.norms[-1])
        return float(np.interp(step, self.steps, self.norms))

    @classmethod
    def load(cls, path) -> "NormSchedule":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != NORM_SCHEDULE_HEADER:
                raise ValueError(f"bad norm-schedule header {header!r} in {path}")
            rows = [(int(r[0]), float(r[1])) for r in reader]
        if not rows:
            raise ValueError(f"norm schedule {path} has no data rows")
        steps, norms = zip(*rows)
        return cls(np.array(steps), np.array(norms))

    def save(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(NORM_SCHEDULE_HEADER)
            for s, n in zip(self.steps, self.norms):
                writer.writerow([int(s), f"{float(n):.17g}"])


def external_graft_magnitude(schedule: NormSchedule, step: int, lr: float) -> float:
    """Donor-run step length: lr times the recorded gradient norm at ``step``."""
    return lr * schedule.norm_at(step)
