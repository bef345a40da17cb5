"""Config parsing, validation errors with line numbers, round-trips, grids."""

import pytest

from batchgap.config import (
    ConfigError,
    parse_config,
    parse_grid,
    serialize_config,
    serialize_grid,
)

MINIMAL = """
[dataset]
kind = synthetic
size = 512

[update]
rule = sgd
"""


def test_minimal_config_gets_shipped_defaults():
    cfg = parse_config(MINIMAL)
    assert cfg.update.lr == 0.1
    assert cfg.batch_size == 32
    assert cfg.micro_batch_size == 32
    assert cfg.steps == 5000
    assert cfg.regularizer is None
    assert cfg.dataset.size == 512


def test_regularizer_defaults():
    cfg = parse_config(MINIMAL + "\n[regularizer]\nkind = gn\n")
    assert cfg.regularizer.kind == "gn"
    assert cfg.regularizer.strength == 0.01
    assert cfg.regularizer.micro_batch_size == cfg.micro_batch_size
    assert cfg.regularizer.grad_mode.kind == "double_backprop"


def test_divisibility_violation_is_rejected_with_line():
    text = """
[dataset]
kind = synthetic

[training]
batch_size = 5120
micro_batch_size = 100
"""
    with pytest.raises(ConfigError, match=r"line 7.*does not divide"):
        parse_config(text)


def test_unknown_key_names_line():
    text = "[training]\nbatch_size = 32\nbogus_knob = 7\n"
    with pytest.raises(ConfigError, match=r"line 3: unknown key 'bogus_knob'"):
        parse_config(text)


def test_unknown_section_rejected():
    with pytest.raises(ConfigError, match=r"unknown section \[extras\]"):
        parse_config("[extras]\nfoo = 1\n")


def test_type_mismatch_names_line():
    with pytest.raises(ConfigError, match=r"line 2: bad value for 'batch_size'"):
        parse_config("[training]\nbatch_size = many\n")


def test_keys_outside_sections_rejected():
    with pytest.raises(ConfigError, match=r"line 1"):
        parse_config("batch_size = 32\n")


def test_conflicting_micro_batch_sizes_rejected():
    text = """
[training]
batch_size = 64
micro_batch_size = 32

[regularizer]
kind = gn
micro_batch_size = 16
"""
    with pytest.raises(ConfigError, match="conflicting micro_batch_size"):
        parse_config(text)


def test_regularizer_micro_batch_governs_partition():
    text = """
[training]
batch_size = 64

[regularizer]
kind = ft
micro_batch_size = 16
"""
    cfg = parse_config(text)
    assert cfg.micro_batch_size == 16
    assert cfg.regularizer.micro_batch_size == 16


def test_external_graft_requires_schedule():
    with pytest.raises(ConfigError, match="norm_schedule"):
        parse_config("[update]\nrule = graft_external\n")


def test_penalty_requires_sgd_rule():
    text = "[regularizer]\nkind = gn\n\n[update]\nrule = ngd\n"
    with pytest.raises(ConfigError, match="sgd only"):
        parse_config(text)


def test_round_trip_plain_and_penalized():
    for extra in ("", "\n[regularizer]\nkind = uj\nstrength = 0.001\n"):
        cfg = parse_config(MINIMAL + extra)
        text = serialize_config(cfg)
        assert parse_config(text) == cfg


def test_round_trip_exotic_update_rules():
    text = """
[dataset]
kind = synthetic

[update]
rule = anti_pgd
lr = 0.05
sigma_sq = 0.001
shutoff_step = 3000
"""
    cfg = parse_config(text)
    assert parse_config(serialize_config(cfg)) == cfg


def test_finite_difference_mode_round_trip():
    text = MINIMAL + "\n[regularizer]\nkind = gn\ngrad_mode = finite_difference\nfd_eps = 0.001\n"
    cfg = parse_config(text)
    assert cfg.regularizer.grad_mode.kind == "finite_difference"
    assert cfg.regularizer.grad_mode.eps == 0.001
    assert parse_config(serialize_config(cfg)) == cfg


# ---------------------------------------------------------------------------
# grids
# ---------------------------------------------------------------------------

GRID = """
[grid]
variants = sb_sgd, lb_sgd, lb_gn
lr = 0.05, 0.1
repeats = 2
sb_batch_size = 16
lb_batch_size = 64

[dataset]
kind = synthetic
size = 256

[training]
batch_size = 16
micro_batch_size = 16
steps = 10
"""


def test_grid_parse_and_cell_count():
    grid = parse_grid(GRID)
    assert grid.variants == ("sb_sgd", "lb_sgd", "lb_gn")
    assert grid.axes["lr"] == (0.05, 0.1)
    assert grid.cell_count() == 3 * 2 * 2


def test_grid_round_trip():
    grid = parse_grid(GRID)
    assert parse_grid(serialize_grid(grid)) == grid


def test_grid_requires_variants_and_limits_cells():
    with pytest.raises(ConfigError, match="variants"):
        parse_grid("[grid]\nrepeats = 2\n")
    too_big = GRID.replace("repeats = 2", "repeats = 2\nmax_cells = 5")
    with pytest.raises(ConfigError, match="above the limit"):
        parse_grid(too_big)


def test_config_file_is_not_a_grid_and_vice_versa():
    with pytest.raises(ConfigError, match="use parse_grid"):
        parse_config(GRID)
    with pytest.raises(ConfigError, match=r"\[grid\] section"):
        parse_grid(MINIMAL)


def test_presets_all_parse_and_round_trip():
    from batchgap.harness import preset_experiments

    presets = preset_experiments(steps=50, repeats=2)
    expected = {"regularizer-comparison", "microbatch-ablation", "sample-penalty-sweep",
                "grafting-comparison", "anti-pgd-grid", "desk-directional"}
    assert expected <= set(presets)
    for name, grid in presets.items():
        text = serialize_grid(grid)
        assert parse_grid(text) == grid, name
