"""Scikit-learn estimator wrapping the penalized-SGD training loop.

This is the composition surface for the wider ecosystem: the classifier
plugs into pipelines, ``GridSearchCV`` and friends, while the heavy lifting
lives in :mod:`batchgap.trainer`.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .autodiff import GradMode
from .config import DatasetConfig, ExperimentConfig, Seeds
from .data import Dataset
from .models import forward_values, softmax_values
from .regularizers import KINDS, RegularizerSpec
from .trainer import train
from .update_rules import UpdateConfig


class PenalizedSGDClassifier(BaseEstimator, ClassifierMixin):
    """MLP softmax classifier trained by SGD with micro-batch norm penalties.

    Parameters
    ----------
    hidden_layer_sizes : tuple of int
        Widths of the relu hidden layers.
    batch_size : int
        Mini-batch size per update step.
    micro_batch_size : int or None
        Micro-batch size for gradient accumulation and penalties; must divide
        ``batch_size``.  ``None`` means one micro-batch per mini-batch.
    penalty : {'gn', 'ft', 'aj', 'uj', 'sample_gn'} or None
        Squared-gradient-norm penalty applied per micro-batch.
    penalty_strength : float
        Penalty coefficient.
    grad_mode : {'double_backprop', 'finite_difference'}
        How penalty gradients are obtained.
    update_rule : {'sgd', 'graft_iterative', 'graft_external', 'ngd', 'anti_pgd'}
        Parameter update procedure.  Non-sgd rules cannot be combined with a
        penalty.
    learning_rate, momentum, weight_decay, lr_schedule, cosine_period
        Standard SGD knobs (momentum/decay/schedule apply to 'sgd' only).
    sigma_sq, shutoff_step
        Anti-PGD noise variance and shutoff step.
    norm_schedule : str or None
        Donor norm-schedule CSV path for external grafting.
    max_steps : int
        Update-step budget (training is step-budgeted, not epoch-budgeted).
    validation_fraction : float
        Fraction of the fit data held out for the validation-accuracy metric.
    random_state : int
        Master seed; data order, init, penalty sampling and update noise all
        derive from it deterministically.

    Attributes
    ----------
    classes_ : ndarray
        Sorted class labels seen in ``fit``.
    params_ : ModelParams
        Trained flat parameter vector with layer structure.
    trajectory_ : list of TrajectoryRecord
        Telemetry rows collected during training.
    loss_curve_ : list of float
        Evaluation-batch loss at each metric step.
    """

    def __init__(self, hidden_layer_sizes=(256, 256), batch_size=32,
                 micro_batch_size=None, penalty=None, penalty_strength=0.01,
                 grad_mode="double_backprop", fd_eps=None, update_rule="sgd",
                 learning_rate=0.1, momentum=0.0, weight_decay=0.0,
                 lr_schedule="constant", cosine_period=None, sigma_sq=0.0,
                 shutoff_step=None, norm_schedule=None, max_steps=1000,
                 metric_every=10, eval_batch_size=1280, eval_micro_batch_size=128,
                 validation_fraction=0.1, random_state=0):
        self.hidden_layer_sizes = hidden_layer_sizes
        self.batch_size = batch_size
        self.micro_batch_size = micro_batch_size
        self.penalty = penalty
        self.penalty_strength = penalty_strength
        self.grad_mode = grad_mode
        self.fd_eps = fd_eps
        self.update_rule = update_rule
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.lr_schedule = lr_schedule
        self.cosine_period = cosine_period
        self.sigma_sq = sigma_sq
        self.shutoff_step = shutoff_step
        self.norm_schedule = norm_schedule
        self.max_steps = max_steps
        self.metric_every = metric_every
        self.eval_batch_size = eval_batch_size
        self.eval_micro_batch_size = eval_micro_batch_size
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    def _config(self) -> ExperimentConfig:
        micro = self.micro_batch_size if self.micro_batch_size is not None else self.batch_size
        reg = None
        if self.penalty is not None:
            if self.penalty not in KINDS:
                raise ValueError(f"unknown penalty {self.penalty!r}")
            if self.grad_mode == "double_backprop":
                mode = GradMode.double_backprop()
            elif self.grad_mode == "finite_difference":
                mode = GradMode.finite_difference(self.fd_eps)
            else:
                raise ValueError(f"unknown grad_mode {self.grad_mode!r}")
            reg = RegularizerSpec(kind=self.penalty, strength=self.penalty_strength,
                                  micro_batch_size=micro, grad_mode=mode)
        update = UpdateConfig(rule=self.update_rule, lr=self.learning_rate,
                              momentum=self.momentum, weight_decay=self.weight_decay,
                              schedule=self.lr_schedule, cosine_period=self.cosine_period,
                              sigma_sq=self.sigma_sq, shutoff_step=self.shutoff_step,
                              norm_schedule_path=self.norm_schedule)
        rs = int(self.random_state)
        return ExperimentConfig(
            dataset=DatasetConfig(), hidden=tuple(self.hidden_layer_sizes),
            batch_size=self.batch_size, micro_batch_size=micro,
            steps=self.max_steps, metric_every=self.metric_every,
            eval_batch_size=self.eval_batch_size,
            eval_micro_batch_size=self.eval_micro_batch_size,
            seeds=Seeds(data=rs, init=rs + 1, reg=rs + 2, update=rs + 3),
            regularizer=reg, update=update,
        )

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        if self.classes_.size < 2:
            raise ValueError("need at least two classes")
        self.n_features_in_ = X.shape[1]
        cfg = self._config()

        n = X.shape[0]
        n_val = int(round(self.validation_fraction * n))
        order = np.random.default_rng([int(self.random_state), 0x76616C]).permutation(n)
        val_idx, train_idx = order[:n_val], order[n_val:]
        if train_idx.size == 0:
            raise ValueError("validation split leaves no training data")
        train_ds = Dataset(X[train_idx], y_idx[train_idx],
                           num_classes=self.classes_.size, split="train")
        if val_idx.size:
            val_ds = Dataset(X[val_idx], y_idx[val_idx],
                             num_classes=self.classes_.size, split="val")
        else:
            val_ds = Dataset(X[train_idx], y_idx[train_idx],
                             num_classes=self.classes_.size, split="val")

        outcome = train(cfg, train_ds, val_ds)
        if outcome.aborted:
            raise RuntimeError(f"training aborted: {outcome.abort_reason}")
        self.params_ = outcome.params
        self.trajectory_ = outcome.records
        self.loss_curve_ = [r.train_loss for r in outcome.records]
        self.best_validation_score_ = outcome.best_val_acc
        self.n_iter_ = outcome.steps_completed
        return self

    def decision_function(self, X):
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(
                f"X has {X.shape[1]} features, expected {self.n_features_in_}"
            )
        return forward_values(self.params_, X)

    def predict_proba(self, X):
        return softmax_values(self.decision_function(X))

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[np.argmax(scores, axis=1)]
