"""batchgap: micro-batch gradient-norm interventions for the batch-size gap.

A desk-scale toolkit for training softmax classifiers with explicitly
regularized micro-batch gradient norms (or Fisher-trace / Jacobian variants),
alternative update rules (grafting, normalized gradient descent, Anti-PGD),
and first-class telemetry of the average micro-batch gradient-norm
trajectory.
"""

__version__ = "0.1.0"

from .autodiff import (
    GradMode,
    GradientMap,
    Tape,
    Tensor,
    finite_diff_gradient,
    grad_norm_sq_gradient,
)
from .config import (
    ConfigError,
    DatasetConfig,
    ExperimentConfig,
    GridSpec,
    Seeds,
    parse_config,
    parse_grid,
    serialize_config,
    serialize_grid,
)
from .data import (
    BatchSampler,
    Dataset,
    MicroBatchPartition,
    accumulate_full_gradient,
    load_idx,
    make_synthetic,
    make_synthetic_splits,
    partition_microbatches,
    write_idx,
)
from .estimator import PenalizedSGDClassifier
from .harness import (
    RunResult,
    preset_experiments,
    run_experiment,
    run_grid,
    verify_run,
)
from .models import (
    ModelParams,
    ModelSpec,
    cross_entropy_tensor,
    forward_values,
    load_checkpoint,
    per_example_jacobian,
    sample_predictive_label,
    save_checkpoint,
)
from .regularizers import (
    PenaltyReport,
    RegularizerSpec,
    aj_penalized_loss,
    ft_penalized_loss,
    gn_penalized_loss,
    penalized_loss,
    sample_gn_penalized_loss,
    uj_penalized_loss,
    unit_sphere_sample,
)
from .telemetry import (
    RunLogger,
    TrajectoryRecord,
    avg_microbatch_grad_norm,
    emit_line_plot,
    fisher_trace_estimate,
    read_telemetry,
)
from .trainer import TrainOutcome, train
from .update_rules import (
    AntiPgdState,
    NormSchedule,
    UpdateConfig,
    anti_pgd_step,
    external_graft_magnitude,
    graft_step,
    iterative_graft_gradients,
    ngd_step,
    sgd_step,
)

__all__ = [name for name in dir() if not name.startswith("_")]
