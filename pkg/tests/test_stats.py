import math

import numpy as np
import pytest

from heedlab.exceptions import BootstrapFailure, RankDeficient, StatisticsError
from heedlab.stats import (
    bootstrap_ci,
    bootstrap_distribution,
    decile_summary,
    mean_per_image_spearman,
    regression_bootstrap,
    semi_partial_r2,
    spearman,
)

NAMES = ("density", "token_type", "layer_depth", "teacher_attention")


#
# Deciles
#


def test_deciles_of_constant_values():
    table = decile_summary(np.arange(40.0), np.full(40, 3.0))
    assert table.ratio == 1.0
    assert table.means == (3.0,) * 10


def test_deciles_follow_score_rank():
    rng = np.random.default_rng(0)
    scores = rng.permutation(100).astype(float)
    table = decile_summary(scores, scores)
    expected = tuple(float(np.mean(np.arange(10 * g, 10 * g + 10))) for g in range(10))
    assert table.means == pytest.approx(expected)
    assert table.ratio == pytest.approx(94.5 / 4.5)


def test_deciles_uneven_sizes():
    table = decile_summary(np.arange(23.0), np.ones(23))
    assert table.counts == (3, 3, 3, 2, 2, 2, 2, 2, 2, 2)
    assert sum(table.counts) == 23


def test_deciles_ties_are_stable():
    scores = np.zeros(20)
    values = np.arange(20.0)
    assert decile_summary(scores, values).means[0] == 0.5


def test_deciles_zero_bottom():
    values = np.r_[np.zeros(10), np.ones(90)]
    assert decile_summary(np.arange(100.0), values).ratio == math.inf


def test_deciles_need_ten_tokens():
    with pytest.raises(StatisticsError):
        decile_summary(np.arange(9.0), np.arange(9.0))
    with pytest.raises(StatisticsError):
        decile_summary(np.arange(10.0), np.arange(11.0))


def test_deciles_ignore_increasing_transforms():
    rng = np.random.default_rng(6)
    # one decimal so some scores tie
    scores = np.round(rng.standard_normal(203), 1)
    values = rng.exponential(size=203)
    table = decile_summary(scores, values)
    for transform in (np.exp, lambda s: s**3 + s, lambda s: 4.0 * s - 7.0):
        moved = decile_summary(transform(scores), values)
        assert moved.counts == table.counts
        assert moved.means == table.means
        assert moved.ratio == table.ratio


#
# Regression

#


def normal_equations_r2(X: np.ndarray, y: np.ndarray) -> float:
    Z = np.c_[np.ones(len(y)), (X - X.mean(axis=0)) / X.std(axis=0)]
    beta = np.linalg.solve(Z.T @ Z, Z.T @ y)
    residual = y - Z @ beta
    return 1.0 - float(residual @ residual) / float(((y - y.mean()) ** 2).sum())


def test_semi_partial_r2_matches_normal_equations():
    rng = np.random.default_rng(1)
    X = rng.standard_normal((200, 4))
    y = 2.0 * X[:, 0] + 0.5 * X[:, 2] + rng.standard_normal(200)
    report = semi_partial_r2(X, y, names=NAMES)

    joint = normal_equations_r2(X, y)
    assert report.joint_r2 == pytest.approx(joint, abs=1e-8)
    for j, name in enumerate(NAMES):
        without = normal_equations_r2(np.delete(X, j, axis=1), y)
        assert report.semi_partial_r2[name] == pytest.approx(joint - without, abs=1e-8)
    assert max(report.semi_partial_r2, key=report.semi_partial_r2.get) == "density"


def test_semi_partial_r2_null_model():
    rng = np.random.default_rng(2)
    report = semi_partial_r2(rng.standard_normal((5000, 4)), rng.standard_normal(5000), names=NAMES)
    assert report.joint_r2 < 0.02
    for value in report.semi_partial_r2.values():
        assert 0.0 <= value <= report.joint_r2


def test_semi_partial_r2_collinear_predictors():
    rng = np.random.default_rng(3)
    X = rng.standard_normal((50, 4))
    X[:, 3] = 2.0 * X[:, 0] - X[:, 1]
    with pytest.raises(RankDeficient) as excinfo:
        semi_partial_r2(X, rng.standard_normal(50), names=NAMES)
    message = str(excinfo.value)
    assert "density" in message and "teacher_attention" in message
    assert "layer_depth" not in message


def test_semi_partial_r2_constant_predictor():
    X = np.random.default_rng(4).standard_normal((20, 4))
    X[:, 1] = 1.0
    with pytest.raises(RankDeficient, match="token_type"):
        semi_partial_r2(X, np.arange(20.0), names=NAMES)


def test_semi_partial_r2_needs_rows():
    with pytest.raises(StatisticsError):
        semi_partial_r2(np.eye(5, 4), np.arange(5.0), names=NAMES)
    with pytest.raises(StatisticsError):
        semi_partial_r2(np.random.default_rng(0).standard_normal((10, 4)), np.ones(10), names=NAMES)


#
# Spearman
#


def test_spearman_monotone():
    x = np.array([0.3, 1.0, 2.5, 7.0])
    assert spearman(x, x**3) == pytest.approx(1.0)
    assert spearman(x, -x) == pytest.approx(-1.0)


def test_spearman_average_ties():
    # centered ranks: x -1.5 -1.5 0 1 2, y -2 -1 0 1 2
    value = spearman([1, 1, 2, 3, 4], [1, 2, 3, 4, 5])
    assert value == pytest.approx(9.5 / math.sqrt(9.5 * 10.0))


def test_spearman_ignores_increasing_transforms():
    rng = np.random.default_rng(7)
    x = np.round(rng.standard_normal(60), 1)
    y = x + rng.standard_normal(60)
    value = spearman(x, y)
    for transform in (np.exp, lambda s: s**3 + s, np.arctan):
        assert spearman(transform(x), y) == pytest.approx(value, abs=1e-12)
        assert spearman(x, transform(y)) == pytest.approx(value, abs=1e-12)
        assert spearman(transform(x), transform(y)) == pytest.approx(value, abs=1e-12)


def test_spearman_undefined_on_constant_input():

    assert spearman([1.0, 1.0, 1.0], [1.0, 2.0, 3.0]) is None


def test_mean_per_image_spearman():
    x = np.arange(12.0)
    groups = [(x, x), (x, -x), (np.ones(12), x)]
    summary = mean_per_image_spearman(groups)
    assert summary.n_images == 3
    assert summary.n_defined == 2
    assert summary.mean == pytest.approx(0.0)
    # top quartile by x: 3 tokens
    assert summary.tail_mean == pytest.approx(0.0)
    assert summary.n_tail_defined == 2


#
# Bootstrap
#


def test_bootstrap_constant_statistic():
    lower, upper = bootstrap_ci(list(range(20)), lambda picked: 1.5, n_resamples=100)
    assert lower == upper == 1.5


def test_bootstrap_covers_the_mean():
    rng = np.random.default_rng(5)
    covered = 0
    for trial in range(100):
        data = list(rng.standard_normal(50) + 1.0)
        lower, upper = bootstrap_ci(data, lambda picked: float(np.mean(picked)), n_resamples=200, seed=trial)
        covered += lower <= 1.0 <= upper
    assert covered >= 85


def test_bootstrap_narrows_with_more_images():
    rng = np.random.default_rng(8)
    images = [rng.standard_normal(int(rng.integers(5, 15))) + 1.0 for _ in range(200)]

    def pooled_mean(picked):
        return float(np.concatenate(picked).mean())

    small = bootstrap_ci(images[:50], pooled_mean, n_resamples=500)
    large = bootstrap_ci(images, pooled_mean, n_resamples=500)
    # width scales like 1/sqrt(images): about half
    assert large[1] - large[0] < 0.75 * (small[1] - small[0])


def test_bootstrap_is_independent_of_workers():

    data = list(np.random.default_rng(6).standard_normal(30))

    def statistic(picked):
        return float(np.median(picked))

    serial = bootstrap_distribution(data, statistic, n_resamples=150, seed=9, workers=1)
    threaded = bootstrap_distribution(data, statistic, n_resamples=150, seed=9, workers=4)
    np.testing.assert_array_equal(serial, threaded)


def test_bootstrap_failure_names_the_resample():
    calls = []

    def statistic(picked):
        calls.append(1)
        if len(calls) == 4:
            raise ValueError("boom")
        return 0.0

    with pytest.raises(BootstrapFailure) as excinfo:
        bootstrap_distribution([1, 2, 3], statistic, n_resamples=100, workers=1)
    assert excinfo.value.index == 3
    assert isinstance(excinfo.value.cause, ValueError)


def test_bootstrap_guards():
    with pytest.raises(StatisticsError):
        bootstrap_distribution([1.0], lambda picked: 0.0, n_resamples=100)
    with pytest.raises(StatisticsError):
        bootstrap_distribution([1.0, 2.0], lambda picked: 0.0, n_resamples=99)
    with pytest.raises(StatisticsError):
        bootstrap_ci([1.0, 2.0], lambda picked: 0.0, n_resamples=100, alpha=1.0)


def test_regression_bootstrap_on_density_driven_data():
    rng = np.random.default_rng(7)
    groups = []
    for _ in range(30):
        X = rng.standard_normal((20, 4))
        y = 3.0 * X[:, 0] + 0.3 * X[:, 1] + 0.5 * rng.standard_normal(20)
        groups.append((X, y))

    report = regression_bootstrap(groups, names=NAMES, n_resamples=100, seed=1)
    assert report.n_rows == 600
    assert report.n_resamples == 100
    lower, upper = report.bootstrap_ci["density"]
    assert lower <= report.semi_partial_r2["density"] <= upper
    assert set(report.bootstrap_ci) == {"joint", *NAMES}
    assert report.dominance_frequency == 1.0
    assert report.to_dict()["bootstrap_ci"]["joint"][0] <= report.joint_r2
