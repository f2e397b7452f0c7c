import csv
import itertools
import json
import math

import numpy as np
import pytest
from scipy.integrate import trapezoid

from checkpoint import save_checkpoint
from divergence import (REPORT_COLUMNS, VARIANCE_FLOOR, DivergenceGroup, DivergenceProfile, DivergenceRow,
                        GaussianSummary, KlMode, emit_divergence_report, fit_gaussian, kl_divergence,
                        layer_divergence_profile, load_divergence_report, parse_group_filter, summarize_profile)
from errors import ComparisonError, ConfigError, EmptyInputError, NumericError, OutputError
from mininet import HEAD_PREFIX, ModelConfig, build_model, clone_model

GRID = list(itertools.product([-2.0, -1.0, 0.0, 1.0, 2.0], [-2.0, -1.0, 0.0, 1.0, 2.0], [0.25, 1.0, 4.0], [1.0]))


def _gauss(mu, sigma2):
    return GaussianSummary(mu, sigma2, 100, False)


def _numeric_kl(mu_a, mu_b, var_a, var_b):
    x = np.arange(-40.0, 40.0 + 1e-3, 1e-3)
    log_a = -0.5 * np.log(2 * np.pi * var_a) - (x - mu_a) ** 2 / (2 * var_a)
    log_b = -0.5 * np.log(2 * np.pi * var_b) - (x - mu_b) ** 2 / (2 * var_b)
    return float(trapezoid(np.exp(log_a) * (log_a - log_b), x))


# ==================== GAUSSIAN / KL ====================

def test_fit_gaussian_uses_population_variance():
    summary = fit_gaussian(np.array([1.0, 2.0, 3.0, 4.0], dtype=np.float32))
    assert summary.mu == pytest.approx(2.5)
    assert summary.sigma2 == pytest.approx(1.25)
    assert summary.n == 4
    assert not summary.degenerate


def test_fit_gaussian_floors_constant_tensor():
    summary = fit_gaussian(np.full((3, 3), 0.7, dtype=np.float32))
    assert summary.degenerate
    assert summary.sigma2 == VARIANCE_FLOOR


def test_fit_gaussian_rejects_empty():
    with pytest.raises(EmptyInputError):
        fit_gaussian(np.zeros(0))


def test_kl_grid_has_75_points():
    assert len(GRID) == 75


@pytest.mark.parametrize("mu_a,mu_b,var_a,var_b", GRID)
def test_kl_matches_numerical_integration(mu_a, mu_b, var_a, var_b):
    a, b = _gauss(mu_a, var_a), _gauss(mu_b, var_b)
    standard = kl_divergence(a, b, KlMode.STANDARD)
    assert standard == pytest.approx(_numeric_kl(mu_a, mu_b, var_a, var_b), abs=1e-6)
    assert kl_divergence(a, b, KlMode.PAPER_VERBATIM) == standard + 0.5


def test_kl_identity():
    a = _gauss(0.3, 2.0)
    assert kl_divergence(a, a) == 0.0
    assert kl_divergence(a, a, KlMode.PAPER_VERBATIM) == 0.5
    assert kl_divergence(a, a, "paper") == 0.5


def test_kl_is_asymmetric():
    a, b = _gauss(0.0, 1.0), _gauss(1.0, 4.0)
    assert kl_divergence(a, b) != pytest.approx(kl_divergence(b, a))


@pytest.mark.parametrize("a,b", [
    (_gauss(0.0, 0.0), _gauss(0.0, 1.0)),
    (_gauss(0.0, 1.0), _gauss(0.0, -1.0)),
    (_gauss(math.nan, 1.0), _gauss(0.0, 1.0)),
    (_gauss(0.0, 1.0), _gauss(0.0, math.inf)),
])
def test_kl_rejects_bad_parameters(a, b):
    with pytest.raises(NumericError):
        kl_divergence(a, b)


# ==================== PROFILES ====================

@pytest.fixture
def pair(tmp_path, tiny_model):
    """Исходный чекпоинт и копия с другой FC головой"""
    a = str(tmp_path / "a.ftckpt")
    b = str(tmp_path / "b.ftckpt")
    save_checkpoint(tiny_model, a)
    other = clone_model(tiny_model)
    other.params[f"{HEAD_PREFIX}.weight"] *= 2.0
    other.params[f"{HEAD_PREFIX}.weight"] += 0.3
    save_checkpoint(other, b)
    return a, b


def test_same_checkpoint_gives_zero_rows(pair):
    a, _ = pair
    profile = layer_divergence_profile(a, a)
    # на блок: conv.weight, bn.gamma, bn.beta; плюс fc.weight
    assert len(profile.rows) == 3 * 2 + 1
    assert all(row.kl == 0.0 for row in profile.rows)
    assert [row.group for row in profile.rows[:3]] == [DivergenceGroup.CNN, DivergenceGroup.BN_WEIGHT,
                                                        DivergenceGroup.BN_BIAS]
    assert profile.rows[-1].stage == 3


def test_same_checkpoint_verbatim_mode_gives_half(pair):
    a, _ = pair
    profile = layer_divergence_profile(a, a, mode=KlMode.PAPER_VERBATIM)
    assert all(row.kl == 0.5 for row in profile.rows)


def test_only_changed_layers_diverge(pair):
    profile = layer_divergence_profile(*pair)
    for row in profile.rows:
        if row.group == DivergenceGroup.FC:
            assert row.kl > 0.0
        else:
            assert row.kl == 0.0


def test_group_filter(pair):
    a, b = pair
    profile = layer_divergence_profile(a, b, parse_group_filter("bn-bias"))
    assert [row.layer_name for row in profile.rows] == ["s1.b0.bn.beta", "s2.b0.bn.beta"]
    both = layer_divergence_profile(a, b, parse_group_filter("cnn,fc"))
    assert {row.group for row in both.rows} == {DivergenceGroup.CNN, DivergenceGroup.FC}


def test_parse_group_filter_rejects_unknown():
    with pytest.raises(ConfigError):
        parse_group_filter("bn,running")


def test_include_bias_adds_degenerate_bias_rows(pair):
    a, b = pair
    profile = layer_divergence_profile(a, b, include_bias=True)
    bias_rows = [row for row in profile.rows if row.layer_name.endswith(".conv.bias")]
    assert len(bias_rows) == 2
    assert all(row.degenerate and row.kl == 0.0 for row in bias_rows)


def test_running_stats_are_not_profiled(pair):
    a, b = pair
    profile = layer_divergence_profile(a, b, include_bias=True)
    assert not any("running" in row.layer_name for row in profile.rows)


def test_different_architectures_are_rejected(tmp_path, pair):
    deeper = str(tmp_path / "deeper.ftckpt")
    save_checkpoint(build_model(ModelConfig(stages=3, base_channels=4, input_size=16)), deeper)
    with pytest.raises(ComparisonError) as info:
        layer_divergence_profile(pair[0], deeper)
    assert "s3.b0.conv.weight" in info.value.names


# ==================== REPORTS ====================

def test_csv_report(tmp_path, pair):
    profile = layer_divergence_profile(*pair)
    path = str(tmp_path / "report.csv")
    emit_divergence_report(profile, path, "csv")
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    assert list(rows[0]) == REPORT_COLUMNS
    assert len(rows) == len(profile.rows)
    assert rows[0]["degenerate"] in ("true", "false")
    assert float(rows[-1]["kl"]) == profile.rows[-1].kl


def test_json_report_round_trip(tmp_path, pair):
    profile = layer_divergence_profile(*pair, mode=KlMode.PAPER_VERBATIM)
    path = str(tmp_path / "report.json")
    emit_divergence_report(profile, path, "json")
    with open(path) as f:
        assert json.load(f)["metadata"]["mode"] == "paper"
    loaded = load_divergence_report(path)
    assert loaded.rows == profile.rows


def test_report_into_missing_directory(tmp_path, pair):
    profile = layer_divergence_profile(*pair)
    with pytest.raises(OutputError):
        emit_divergence_report(profile, str(tmp_path / "absent" / "r.csv"))


def test_report_rejects_unknown_format(tmp_path, pair):
    with pytest.raises(ConfigError):
        emit_divergence_report(layer_divergence_profile(*pair), str(tmp_path / "r.xml"), "xml")


# ==================== SUMMARY ====================

def _row(name, stage, group, kl):
    return DivergenceRow(name, stage, group, kl, KlMode.STANDARD, False)


def test_summarize_profile():
    profile = DivergenceProfile([
        _row("s1.b0.conv.weight", 1, DivergenceGroup.CNN, 0.01),
        _row("s1.b0.bn.gamma", 1, DivergenceGroup.BN_WEIGHT, 0.2),
        _row("s1.b0.bn.beta", 1, DivergenceGroup.BN_BIAS, 0.1),
        _row("s2.b0.conv.weight", 2, DivergenceGroup.CNN, 0.02),
        _row("s2.b0.bn.gamma", 2, DivergenceGroup.BN_WEIGHT, 0.3),
        _row("s2.b0.bn.beta", 2, DivergenceGroup.BN_BIAS, 0.9),
        _row("s3.b0.conv.weight", 3, DivergenceGroup.CNN, 0.05),
        _row("head.fc.weight", 4, DivergenceGroup.FC, 1.0),
    ])
    summary = summarize_profile(profile)
    assert summary.cnn_depth_spearman == pytest.approx(1.0)
    assert summary.bn_exceeds_cnn is True
    assert summary.last_bn_bias_largest is True
    assert summary.mean_kl["FC"] == 1.0
    assert summary.mean_kl["CNN"] == pytest.approx(0.08 / 3)


def test_summarize_flat_profile_has_no_correlation(pair):
    summary = summarize_profile(layer_divergence_profile(pair[0], pair[0]))
    assert summary.cnn_depth_spearman is None
    assert summary.bn_exceeds_cnn is False
