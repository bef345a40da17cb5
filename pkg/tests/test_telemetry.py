"""Telemetry tests: metric definitions, CSV round-trips, SVG plotting."""

import numpy as np
import pytest

from batchgap.data import partition_microbatches
from batchgap.models import ModelParams, ModelSpec, batch_loss_and_gradient
from batchgap.regularizers import ft_penalized_loss
from batchgap.telemetry import (
    TELEMETRY_HEADER,
    RunLogger,
    TrajectoryRecord,
    avg_microbatch_grad_norm,
    emit_line_plot,
    fisher_trace_estimate,
    moving_average,
    read_telemetry,
)


def tiny_problem(seed=0, n=8, d=3, c=3):
    rng = np.random.default_rng(seed)
    params = ModelParams.init(ModelSpec(d, c, (4,), init_seed=seed))
    x = rng.standard_normal((n, d))
    y = rng.integers(0, c, size=n)
    return params, x, y


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def test_avg_norm_is_zero_at_exact_saturation():
    spec = ModelSpec(input_dim=2, class_count=3, hidden=())
    flat = np.zeros(spec.param_count)
    flat[6] = 900.0
    params = ModelParams(spec, flat)
    x = np.random.default_rng(0).standard_normal((8, 2))
    y = np.zeros(8, dtype=int)
    assert avg_microbatch_grad_norm(params, x, y, 4) == 0.0


def test_avg_norm_single_slice_equals_full_batch_norm():
    params, x, y = tiny_problem(seed=1)
    got = avg_microbatch_grad_norm(params, x, y, len(y))
    _, g = batch_loss_and_gradient(params, x, y)
    want = float(np.linalg.norm(g))
    assert abs(got - want) <= 1e-12 * (1.0 + want)


def test_avg_norm_matches_brute_force_recomputation():
    params, x, y = tiny_problem(seed=2)
    m = 2
    got = avg_microbatch_grad_norm(params, x, y, m)
    norms = []
    for lo in range(0, len(y), m):
        _, g = batch_loss_and_gradient(params, x[lo:lo + m], y[lo:lo + m])
        norms.append(np.linalg.norm(g))
    want = float(np.sum(norms) / len(norms))
    assert abs(got - want) <= 1e-12 * (1.0 + want)


def test_fisher_trace_is_non_negative_and_matches_penalty_path():
    params, x, y = tiny_problem(seed=3)
    got = fisher_trace_estimate(params, x, y, 4, np.random.default_rng(11))
    assert got >= 0.0
    part = partition_microbatches(np.arange(len(y)), 4)
    res = ft_penalized_loss(params, x, y, part, strength=1.0,
                            rng=np.random.default_rng(11))
    assert got == res.report.penalty_value


def test_fisher_trace_two_class_enumeration():
    """m=1, C=2: Monte Carlo over label draws must approach the exhaustive
    two-term expectation."""
    params, x, _ = tiny_problem(seed=4, n=1, c=2)
    from batchgap.models import forward_values, softmax_values

    probs = softmax_values(forward_values(params, x))[0]
    exhaustive = 0.0
    for c in range(2):
        _, g = batch_loss_and_gradient(params, x, np.array([c]))
        exhaustive += probs[c] * float(np.sum(g * g))
    draws = 4000
    vals = np.array([
        fisher_trace_estimate(params, x, np.zeros(1, dtype=int), 1,
                              np.random.default_rng(i))
        for i in range(draws)
    ])
    se = vals.std(ddof=1) / np.sqrt(draws)
    assert abs(vals.mean() - exhaustive) <= 3.0 * se


def test_fisher_trace_near_saturation_matches_gn_norm():
    """When the predictive distribution is an exact one-hot at the true
    labels, sampled labels coincide with true labels and the Fisher estimate
    equals the squared-norm metric."""
    spec = ModelSpec(input_dim=2, class_count=3, hidden=())
    flat = np.zeros(spec.param_count)
    flat[6] = 900.0
    params = ModelParams(spec, flat)
    x = np.random.default_rng(5).standard_normal((4, 2))
    y = np.zeros(4, dtype=int)
    fisher = fisher_trace_estimate(params, x, y, 2, np.random.default_rng(0))
    assert fisher == 0.0  # all gradients exactly vanish at this construction


def test_metrics_do_not_mutate_parameters():
    params, x, y = tiny_problem(seed=6)
    before = params.flat.tobytes()
    avg_microbatch_grad_norm(params, x, y, 4)
    fisher_trace_estimate(params, x, y, 4, np.random.default_rng(0))
    assert params.flat.tobytes() == before


# ---------------------------------------------------------------------------
# trajectory CSV
# ---------------------------------------------------------------------------

def _record(step, **over):
    base = dict(step=step, epoch=step // 10, train_loss=1.2345678901234567,
                train_acc=0.5, val_acc=0.25, avg_mb_grad_norm=3.3e-7,
                fisher_trace=1.7976931348623157e2, penalty=None,
                update_norm=0.125, lr=0.1, wall_ms=0.0)
    base.update(over)
    return TrajectoryRecord(**base)


def test_empty_run_writes_header_only(tmp_path):
    path = tmp_path / "t.csv"
    with RunLogger(path):
        pass
    assert path.read_text() == ",".join(TELEMETRY_HEADER) + "\n"


def test_three_records_make_four_lines(tmp_path):
    path = tmp_path / "t.csv"
    with RunLogger(path) as logger:
        for s in (0, 10, 20):
            logger.append(_record(s))
    assert len(path.read_text().splitlines()) == 4


def test_round_trip_preserves_every_field(tmp_path):
    path = tmp_path / "t.csv"
    rng = np.random.default_rng(7)
    records = [
        _record(s, train_loss=float(rng.standard_normal()) * 10 ** int(rng.integers(-8, 8)),
                penalty=None if s == 0 else float(rng.random()))
        for s in range(0, 50, 10)
    ]
    with RunLogger(path) as logger:
        for r in records:
            logger.append(r)
    back = read_telemetry(path)
    assert back == records  # 17 significant digits round-trip exactly


def test_monotonic_step_enforcement(tmp_path):
    with RunLogger(tmp_path / "t.csv") as logger:
        logger.append(_record(5))
        with pytest.raises(ValueError):
            logger.append(_record(5))


def test_read_rejects_wrong_header(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("step,loss\n1,2\n")
    with pytest.raises(ValueError):
        read_telemetry(p)


# ---------------------------------------------------------------------------
# smoothing and plots
# ---------------------------------------------------------------------------

def test_moving_average_window_one_is_identity():
    vals = np.array([3.0, 1.0, 4.0, 1.0, 5.0])
    np.testing.assert_array_equal(moving_average(vals, 1), vals)


def test_moving_average_alternating_sequence():
    vals = np.array([0.0, 2.0] * 6)
    out = moving_average(vals, 2)
    np.testing.assert_array_equal(out[1:], 1.0)
    assert out[0] == 0.0  # partial head window


def test_plot_constant_column_is_horizontal(tmp_path):
    csv_path = tmp_path / "t.csv"
    with RunLogger(csv_path) as logger:
        for s in range(0, 40, 10):
            logger.append(_record(s, val_acc=0.75))
    out = tmp_path / "plot.svg"
    emit_line_plot(csv_path, ["val_acc"], out)
    text = out.read_text()
    assert text.startswith("<svg")
    poly = [ln for ln in text.splitlines() if "polyline" in ln][0]
    pts = poly.split('points="')[1].split('"')[0].split()
    ys = {p.split(",")[1] for p in pts}
    assert len(ys) == 1  # every vertex at the same height


def test_plot_skips_empty_cells_and_rejects_unknown_columns(tmp_path):
    csv_path = tmp_path / "t.csv"
    with RunLogger(csv_path) as logger:
        logger.append(_record(0, penalty=None))
        logger.append(_record(10, penalty=0.5))
    out = tmp_path / "plot.svg"
    emit_line_plot(csv_path, ["penalty", "val_acc"], out, smooth_window=1)
    assert out.exists()
    with pytest.raises(ValueError, match="unknown column"):
        emit_line_plot(csv_path, ["nope"], out)


def test_plot_applies_smoothing_at_plot_time_only(tmp_path):
    csv_path = tmp_path / "t.csv"
    with RunLogger(csv_path) as logger:
        for i, v in enumerate([0.0, 2.0, 0.0, 2.0]):
            logger.append(_record(i * 10, val_acc=v))
    before = csv_path.read_bytes()
    emit_line_plot(csv_path, ["val_acc"], tmp_path / "s.svg", smooth_window=2)
    assert csv_path.read_bytes() == before
