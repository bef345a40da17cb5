"""Update-rule tests: step algebra, norm invariants, schedules, noise
statistics, and the donor norm-schedule file format."""

import numpy as np
import pytest

from batchgap.update_rules import (
    AntiPgdState,
    NormSchedule,
    UpdateConfig,
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


# ---------------------------------------------------------------------------
# sgd
# ---------------------------------------------------------------------------

def test_plain_sgd_step():
    cfg = UpdateConfig(rule="sgd", lr=0.5)
    theta = np.array([1.0, -2.0])
    g = np.array([0.2, 0.4])
    new, _ = sgd_step(theta, g, cfg)
    np.testing.assert_array_equal(new, theta - 0.5 * g)


def test_zero_gradient_leaves_params_unchanged():
    cfg = UpdateConfig(rule="sgd", lr=0.5)
    theta = np.array([1.0, -2.0])
    new, _ = sgd_step(theta, np.zeros(2), cfg)
    np.testing.assert_array_equal(new, theta)


def test_momentum_accumulates_velocity():
    cfg = UpdateConfig(rule="sgd", lr=1.0, momentum=0.9)
    theta = np.zeros(1)
    g = np.ones(1)
    theta, v = sgd_step(theta, g, cfg)
    assert v[0] == 1.0 and theta[0] == -1.0
    theta, v = sgd_step(theta, g, cfg, velocity=v)
    assert v[0] == pytest.approx(1.9)
    assert theta[0] == pytest.approx(-2.9)


def test_weight_decay_pulls_towards_zero():
    cfg = UpdateConfig(rule="sgd", lr=0.1, weight_decay=0.5)
    theta = np.array([2.0])
    new, _ = sgd_step(theta, np.zeros(1), cfg)
    assert new[0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)


def test_cosine_schedule_endpoints_and_midpoint():
    cfg = UpdateConfig(rule="sgd", lr=0.4, schedule="cosine", cosine_period=100)
    assert lr_at(cfg, 0) == pytest.approx(0.4)
    assert lr_at(cfg, 50) == pytest.approx(0.2)
    assert lr_at(cfg, 100) == pytest.approx(0.0, abs=1e-17)


def test_non_finite_gradient_aborts():
    cfg = UpdateConfig(rule="sgd", lr=0.1)
    with pytest.raises(UpdateError, match="non-finite"):
        sgd_step(np.zeros(2), np.array([1.0, np.nan]), cfg)
    with pytest.raises(UpdateError, match="shape"):
        sgd_step(np.zeros(2), np.zeros(3), cfg)


def test_update_config_validation():
    with pytest.raises(ValueError):
        UpdateConfig(rule="adam")
    with pytest.raises(ValueError):
        UpdateConfig(rule="sgd", lr=0.0)
    with pytest.raises(ValueError):
        UpdateConfig(rule="sgd", momentum=1.0)
    with pytest.raises(ValueError):
        UpdateConfig(rule="sgd", schedule="cosine")  # needs a period
    with pytest.raises(ValueError):
        UpdateConfig(rule="ngd", momentum=0.5)


# ---------------------------------------------------------------------------
# grafting
# ---------------------------------------------------------------------------

def test_graft_with_equal_gradients_is_plain_step():
    theta = np.array([1.0, 2.0, 3.0])
    g = np.array([0.5, -0.5, 1.0])
    new = graft_step(theta, g, g)
    np.testing.assert_allclose(new, theta - g, rtol=1e-15)


def test_grafted_step_norm_equals_magnitude_gradient_norm():
    rng = np.random.default_rng(0)
    for _ in range(50):
        theta = rng.standard_normal(20)
        g_m = rng.standard_normal(20)
        g_d = rng.standard_normal(20)
        new = graft_step(theta, g_m, g_d)
        step = new - theta
        want = np.linalg.norm(g_m)
        assert abs(np.linalg.norm(step) - want) <= 1e-12 * (1.0 + want)
        # direction is exactly opposite the direction gradient
        cos = float(step @ g_d) / (np.linalg.norm(step) * np.linalg.norm(g_d))
        assert cos == pytest.approx(-1.0, abs=1e-12)


def test_zero_magnitude_freezes_params():
    theta = np.array([1.0, 2.0])
    new = graft_step(theta, np.zeros(2), np.array([1.0, 0.0]))
    np.testing.assert_array_equal(new, theta)


def test_vanishing_direction_skips_step(caplog):
    theta = np.array([1.0, 2.0])
    with caplog.at_level("WARNING"):
        new = graft_step(theta, np.ones(2), np.zeros(2))
    np.testing.assert_array_equal(new, theta)
    assert any("skipping" in r.message for r in caplog.records)


def test_iterative_graft_single_slice_reduces_to_sgd():
    g = np.array([0.3, -0.6])
    g_m, g_d = iterative_graft_gradients([g], g, lr=0.25,
                                         rng=np.random.default_rng(0))
    np.testing.assert_array_equal(g_m, 0.25 * g)
    theta = np.array([1.0, 1.0])
    new = graft_step(theta, g_m, g_d)
    np.testing.assert_allclose(new, theta - 0.25 * g, rtol=1e-15)


def test_iterative_graft_draws_slices_uniformly():
    k = 40
    grads = [np.full(2, float(i)) for i in range(k)]
    mean = np.zeros(2)
    rng = np.random.default_rng(7)
    draws = 10_000
    counts = np.zeros(k)
    for _ in range(draws):
        g_m, _ = iterative_graft_gradients(grads, mean, lr=1.0, rng=rng)
        counts[int(g_m[0])] += 1
    p = 1.0 / k
    se = np.sqrt(p * (1 - p) / draws)
    assert np.max(np.abs(counts / draws - p)) <= 3.0 * se


# ---------------------------------------------------------------------------
# external grafting schedules
# ---------------------------------------------------------------------------

def test_external_magnitude_exact_and_interpolated():
    sched = NormSchedule(np.array([10, 12]), np.array([2.0, 4.0]))
    assert external_graft_magnitude(sched, 10, lr=1.0) == 2.0
    assert external_graft_magnitude(sched, 11, lr=1.0) == pytest.approx(3.0)
    assert external_graft_magnitude(sched, 11, lr=0.5) == pytest.approx(1.5)


def test_external_magnitude_holds_last_value(caplog):
    sched = NormSchedule(np.array([0, 5]), np.array([1.0, 3.0]))
    with caplog.at_level("WARNING"):
        assert external_graft_magnitude(sched, 99, lr=1.0) == 3.0
    assert any("holding last" in r.message for r in caplog.records)


def test_empty_schedule_is_rejected():
    with pytest.raises(ValueError):
        NormSchedule(np.array([], dtype=int), np.array([]))


def test_schedule_requires_increasing_steps():
    with pytest.raises(ValueError):
        NormSchedule(np.array([3, 3]), np.array([1.0, 2.0]))


def test_schedule_csv_round_trip(tmp_path):
    sched = NormSchedule(np.arange(100), np.random.default_rng(0).random(100))
    path = tmp_path / "sched.csv"
    sched.save(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "step,grad_norm"
    assert len(lines) == 101
    back = NormSchedule.load(path)
    np.testing.assert_array_equal(back.steps, sched.steps)
    np.testing.assert_array_equal(back.norms, sched.norms)  # 17 digits: exact


def test_loading_headerless_or_empty_schedule_fails(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("step,grad_norm\n")
    with pytest.raises(ValueError, match="no data rows"):
        NormSchedule.load(p)
    p.write_text("nope\n1,2\n")
    with pytest.raises(ValueError, match="header"):
        NormSchedule.load(p)


# ---------------------------------------------------------------------------
# ngd
# ---------------------------------------------------------------------------

def test_ngd_step_norm_is_lr():
    rng = np.random.default_rng(1)
    for _ in range(50):
        theta = rng.standard_normal(10)
        g = rng.standard_normal(10)
        new = ngd_step(theta, g, lr=0.3)
        assert abs(np.linalg.norm(new - theta) - 0.3) <= 1e-12 * 1.3


def test_ngd_is_scale_invariant_in_the_gradient():
    theta = np.ones(4)
    g = np.array([1.0, -2.0, 0.5, 0.25])
    a = ngd_step(theta, g, lr=0.2)
    b = ngd_step(theta, 10.0 * g, lr=0.2)
    np.testing.assert_allclose(a, b, rtol=1e-15)


def test_ngd_zero_lr_freezes():
    theta = np.ones(3)
    new = ngd_step(theta, np.array([1.0, 0.0, 0.0]), lr=0.0)
    np.testing.assert_array_equal(new, theta)


def test_ngd_zero_gradient_skips(caplog):
    theta = np.ones(3)
    with caplog.at_level("WARNING"):
        new = ngd_step(theta, np.zeros(3), lr=0.5)
    np.testing.assert_array_equal(new, theta)


# ---------------------------------------------------------------------------
# anti-pgd
# ---------------------------------------------------------------------------

def test_zero_variance_is_plain_sgd():
    theta = np.array([1.0, 2.0])
    g = np.array([0.5, -0.5])
    state = AntiPgdState.init(2, sigma_sq=0.0)
    new, state = anti_pgd_step(theta, g, state, lr=0.1, step=0,
                               rng=np.random.default_rng(0))
    np.testing.assert_array_equal(new, theta - 0.1 * g)
    np.testing.assert_array_equal(state.xi, np.zeros(2))


def test_shutoff_at_zero_is_bit_identical_to_sgd():
    rng = np.random.default_rng(2)
    theta = rng.standard_normal(5)
    state = AntiPgdState.init(5, sigma_sq=0.5, shutoff_step=0)
    cfg = UpdateConfig(rule="sgd", lr=0.2)
    ref = theta.copy()
    for step in range(20):
        g = np.sin(np.arange(5) + step)  # shared deterministic gradient stream
        theta, state = anti_pgd_step(theta, g, state, lr=0.2, step=step,
                                     rng=np.random.default_rng(0))
        ref, _ = sgd_step(ref, g, cfg)
    assert theta.tobytes() == ref.tobytes()


def test_perturbations_telescope():
    rng = np.random.default_rng(3)
    state = AntiPgdState.init(4, sigma_sq=1.0)
    theta = np.zeros(4)
    total = np.zeros(4)
    for step in range(100):
        new, state = anti_pgd_step(theta, np.zeros(4), state, lr=1.0, step=step,
                                   rng=rng)
        total += new - theta
        theta = new
    np.testing.assert_allclose(total, state.xi, atol=1e-12)


def test_consecutive_perturbations_anticorrelate_at_minus_half():
    """Var(delta) = 2 sigma^2 and Cov(delta_k, delta_{k+1}) = -sigma^2, so the
    lag-1 correlation over a long run must sit at -0.5."""
    rng = np.random.default_rng(4)
    state = AntiPgdState.init(1, sigma_sq=1.0)
    draws = 100_000
    deltas = np.empty(draws)
    theta = np.zeros(1)
    for step in range(draws):
        new, state = anti_pgd_step(theta, np.zeros(1), state, lr=1.0, step=step,
                                   rng=rng)
        deltas[step] = (new - theta)[0]
        theta = new
    corr = np.corrcoef(deltas[:-1], deltas[1:])[0, 1]
    assert abs(corr + 0.5) <= 0.02


def test_shutoff_stops_the_noise():
    rng = np.random.default_rng(5)
    state = AntiPgdState.init(3, sigma_sq=1.0, shutoff_step=10)
    theta = np.zeros(3)
    for step in range(10):
        theta, state = anti_pgd_step(theta, np.zeros(3), state, lr=1.0, step=step, rng=rng)
    after_shutoff = theta.copy()
    for step in range(10, 20):
        theta, state = anti_pgd_step(theta, np.zeros(3), state, lr=1.0, step=step, rng=rng)
    np.testing.assert_array_equal(theta, after_shutoff)
