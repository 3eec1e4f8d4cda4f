"""
Density-weighted residual alignment laboratory.

Statistics of the diagnostic protocol: decile tables, semi-partial R² from
OLS fits, image-level percentile bootstrap and Spearman rank correlations.
Everything here is a pure function of immutable arrays.
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import statsmodels.api as sm
from scipy.stats import rankdata

from .constants import BOOTSTRAP_ALPHA, BOOTSTRAP_RESAMPLES, PREDICTORS, TAIL_QUANTILE
from .exceptions import BootstrapFailure, RankDeficient, StatisticsError

__all__ = (
    "DecileTable",
    "RegressionReport",
    "SpearmanSummary",
    "bootstrap_ci",
    "bootstrap_distribution",
    "decile_summary",
    "mean_per_image_spearman",
    "regression_bootstrap",
    "semi_partial_r2",
    "spearman",
)

log = logging.getLogger(__name__)

N_DECILES = 10
MIN_REGRESSION_ROWS = 6
MIN_RESAMPLES = 100


#
# Deciles
#


@dataclass(frozen=True)
class DecileTable:
    """Group means of a measurement, lowest scores first."""

    means: Tuple[float, ...]
    counts: Tuple[int, ...]
    ratio: float

    @property
    def bottom(self) -> float:
        return self.means[0]

    @property
    def top(self) -> float:
        return self.means[-1]

    def to_dict(self) -> Dict[str, Any]:
        return {"means": list(self.means), "counts": list(self.counts), "ratio": self.ratio}


def decile_summary(scores: Sequence[float], values: Sequence[float], n_groups: int = N_DECILES) -> DecileTable:
    """
    Sort tokens by score (stable, lower index first on ties), split them into
    ``n_groups`` groups whose sizes differ by at most one, the extra tokens
    going to the lowest groups, and average ``values`` per group.

    ratio = mean(top) / mean(bottom); a zero bottom mean gives infinity, or 1
    when the top mean is zero too.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    values = np.asarray(values, dtype=np.float64).ravel()
    if scores.size != values.size:
        raise StatisticsError(f"{scores.size} scores for {values.size} values")
    if scores.size < n_groups:
        raise StatisticsError(f"decile table needs at least {n_groups} tokens, got {scores.size}")

    order = np.argsort(scores, kind="stable")
    base, extra = divmod(scores.size, n_groups)
    sizes = [base + (1 if g < extra else 0) for g in range(n_groups)]

    means, start = [], 0
    for size in sizes:
        means.append(float(values[order[start : start + size]].mean()))
        start += size

    bottom, top = means[0], means[-1]
    if bottom == 0.0:
        ratio = 1.0 if top == 0.0 else math.inf
    else:
        ratio = top / bottom
    return DecileTable(means=tuple(means), counts=tuple(sizes), ratio=ratio)


#
# Regression
#


@dataclass(frozen=True)
class RegressionReport:
    joint_r2: float
    semi_partial_r2: Dict[str, float]
    n_rows: int
    bootstrap_ci: Dict[str, Tuple[float, float]] = field(default_factory=dict)
    n_resamples: int = 0
    dominance_frequency: Optional[float] = None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "joint_r2": self.joint_r2,
            "semi_partial_r2": dict(self.semi_partial_r2),
            "n_rows": self.n_rows,
            "bootstrap_ci": {name: list(ci) for name, ci in self.bootstrap_ci.items()},
            "n_resamples": self.n_resamples,
            "dominance_frequency": self.dominance_frequency,
        }


def _standardize(X: np.ndarray, names: Sequence[str]) -> np.ndarray:
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    flat = [name for name, s in zip(names, std) if s == 0.0]
    if flat:
        raise RankDeficient(f"constant predictor(s) after standardization: {', '.join(flat)}")
    return (X - mean) / std


def _collinear_columns(Z: np.ndarray, names: Sequence[str]) -> List[str]:
    """Predictors taking part in the weakest linear combination of the design."""
    _, _, vt = np.linalg.svd(Z, full_matrices=False)
    direction = np.abs(vt[-1])
    return [name for name, value in zip(names, direction) if value > 1e-6]


def _r2(y: np.ndarray, Z: np.ndarray) -> float:
    design = sm.add_constant(Z, has_constant="add")
    return float(sm.OLS(y, design).fit().rsquared)


def semi_partial_r2(X: np.ndarray, y: np.ndarray, names: Sequence[str] = PREDICTORS) -> RegressionReport:
    """
    Joint R² of the OLS fit with intercept on standardized predictors, and
    per predictor the drop in R² when it is left out.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).ravel()
    if X.ndim != 2 or X.shape[0] != y.size:
        raise StatisticsError(f"design {X.shape} does not match {y.size} targets")
    if X.shape[1] != len(names):
        raise StatisticsError(f"{X.shape[1]} columns for predictors {tuple(names)}")
    n = y.size
    if n < MIN_REGRESSION_ROWS:
        raise StatisticsError(f"regression needs more than 5 rows, got {n}")
    if float(y.std()) == 0.0:
        raise StatisticsError("constant target, R² is undefined")

    Z = _standardize(X, names)
    if np.linalg.matrix_rank(Z) < Z.shape[1]:
        raise RankDeficient(f"collinear predictors: {', '.join(_collinear_columns(Z, names))}")

    joint = _r2(y, Z)
    partial = {}
    for j, name in enumerate(names):
        reduced = np.delete(Z, j, axis=1)
        without = _r2(y, reduced) if reduced.shape[1] else 0.0
        partial[name] = min(max(joint - without, 0.0), joint)
    return RegressionReport(joint_r2=joint, semi_partial_r2=partial, n_rows=n)


#
# Bootstrap
#


Statistic = Callable[[List[Any]], Union[float, np.ndarray]]


def _one_resample(groups: Sequence[Any], statistic: Statistic, seed: int, index: int) -> np.ndarray:
    rng = np.random.default_rng(seed + index)
    picks = rng.integers(len(groups), size=len(groups))
    try:
        return np.asarray(statistic([groups[i] for i in picks]), dtype=np.float64)
    except Exception as exc:
        raise BootstrapFailure(index, exc) from exc


def bootstrap_distribution(
    groups: Sequence[Any],
    statistic: Statistic,
    n_resamples: int = BOOTSTRAP_RESAMPLES,
    seed: int = 0,
    workers: Optional[int] = None,
) -> np.ndarray:
    """
    Statistic over ``n_resamples`` resamples of the groups (images) drawn with
    replacement. Resample i draws from its own generator seeded ``seed + i``,
    so the result does not depend on ``workers``.
    """
    if len(groups) < 2:
        raise StatisticsError(f"bootstrap needs at least 2 images, got {len(groups)}")
    if n_resamples < MIN_RESAMPLES:
        raise StatisticsError(f"bootstrap needs at least {MIN_RESAMPLES} resamples, got {n_resamples}")

    if workers and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda i: _one_resample(groups, statistic, seed, i), range(n_resamples)))
    else:
        results = [_one_resample(groups, statistic, seed, i) for i in range(n_resamples)]
    return np.stack(results)


def percentile_interval(distribution: np.ndarray, alpha: float = BOOTSTRAP_ALPHA) -> Tuple[Any, Any]:
    """Linear-interpolation percentiles at α/2 and 1 - α/2."""
    if not 0.0 < alpha < 1.0:
        raise StatisticsError(f"alpha must be in (0, 1), got {alpha}")
    lower, upper = np.percentile(distribution, [100.0 * alpha / 2.0, 100.0 * (1.0 - alpha / 2.0)], axis=0)
    if np.ndim(lower) == 0:
        return float(lower), float(upper)
    return lower, upper


def bootstrap_ci(
    groups: Sequence[Any],
    statistic: Statistic,
    n_resamples: int = BOOTSTRAP_RESAMPLES,
    alpha: float = BOOTSTRAP_ALPHA,
    seed: int = 0,
    workers: Optional[int] = None,
) -> Tuple[Any, Any]:
    distribution = bootstrap_distribution(groups, statistic, n_resamples=n_resamples, seed=seed, workers=workers)
    return percentile_interval(distribution, alpha)


def regression_bootstrap(
    groups: Sequence[Tuple[np.ndarray, np.ndarray]],
    names: Sequence[str] = PREDICTORS,
    n_resamples: int = BOOTSTRAP_RESAMPLES,
    alpha: float = BOOTSTRAP_ALPHA,
    seed: int = 0,
    workers: Optional[int] = None,
    dominant: str = "density",
) -> RegressionReport:
    """
    Point estimates on the pooled rows plus image-level bootstrap CIs for the
    joint and every semi-partial R², and how often ``dominant`` has the
    largest semi-partial R² across resamples.
    """

    def pooled(picked: Sequence[Tuple[np.ndarray, np.ndarray]]) -> Tuple[np.ndarray, np.ndarray]:
        return np.concatenate([X for X, _ in picked]), np.concatenate([y for _, y in picked])

    def statistic(picked: List[Tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
        report = semi_partial_r2(*pooled(picked), names=names)
        return np.array([report.joint_r2] + [report.semi_partial_r2[name] for name in names])

    point = semi_partial_r2(*pooled(groups), names=names)
    distribution = bootstrap_distribution(groups, statistic, n_resamples=n_resamples, seed=seed, workers=workers)
    lower, upper = percentile_interval(distribution, alpha)

    ci = {"joint": (float(lower[0]), float(upper[0]))}
    for j, name in enumerate(names, start=1):
        ci[name] = (float(lower[j]), float(upper[j]))

    dominance = None
    if dominant in names:
        column = 1 + list(names).index(dominant)
        dominance = float(np.mean(np.argmax(distribution[:, 1:], axis=1) == column - 1))

    log.debug("regression bootstrap: joint %.3f CI %s", point.joint_r2, ci["joint"])
    return RegressionReport(
        joint_r2=point.joint_r2,
        semi_partial_r2=point.semi_partial_r2,
        n_rows=point.n_rows,
        bootstrap_ci=ci,
        n_resamples=n_resamples,
        dominance_frequency=dominance,
    )


#
# Rank correlation
#


def spearman(x: Sequence[float], y: Sequence[float]) -> Optional[float]:
    """Pearson correlation of average ranks; None when either side has no rank variance."""
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.size != y.size:
        raise StatisticsError(f"spearman: {x.size} vs {y.size} values")
    if x.size < 2:
        raise StatisticsError("spearman needs at least 2 values")

    rx = rankdata(x, method="average")
    ry = rankdata(y, method="average")
    rx -= rx.mean()
    ry -= ry.mean()
    denominator = math.sqrt(float((rx**2).sum()) * float((ry**2).sum()))
    if denominator == 0.0:
        return None
    return float((rx * ry).sum()) / denominator


@dataclass(frozen=True)
class SpearmanSummary:
    mean: Optional[float]
    tail_mean: Optional[float]
    p5: Optional[float]
    p95: Optional[float]
    n_images: int
    n_defined: int
    n_tail_defined: int

    def to_dict(self) -> Dict[str, Any]:
        return {
            "mean": self.mean,
            "tail_mean": self.tail_mean,
            "p5": self.p5,
            "p95": self.p95,
            "n_images": self.n_images,
            "n_defined": self.n_defined,
            "n_tail_defined": self.n_tail_defined,
        }


def _tail(x: np.ndarray, tail_quantile: float) -> np.ndarray:
    """Indices of the top (1 - q) share of tokens by x, lower index first on ties."""
    count = max(2, math.ceil(round((1.0 - tail_quantile) * x.size, 9)))
    return np.lexsort((np.arange(x.size), -x))[:count]


def mean_per_image_spearman(
    groups: Sequence[Tuple[Sequence[float], Sequence[float]]], tail_quantile: float = TAIL_QUANTILE
) -> SpearmanSummary:
    """
    Mean over images of spearman(x, y), and of the same correlation restricted
    to the image's top-quartile tokens by x. Undefined correlations are left
    out of the means and counted.
    """
    overall, tail = [], []
    for x, y in groups:
        x = np.asarray(x, dtype=np.float64).ravel()
        y = np.asarray(y, dtype=np.float64).ravel()
        value = spearman(x, y)
        if value is not None:
            overall.append(value)
        picks = _tail(x, tail_quantile)
        tail_value = spearman(x[picks], y[picks]) if picks.size >= 2 else None
        if tail_value is not None:
            tail.append(tail_value)

    if len(overall) < len(groups):
        log.info("spearman undefined for %d of %d images", len(groups) - len(overall), len(groups))
    p5, p95 = (float(v) for v in np.percentile(overall, [5.0, 95.0])) if overall else (None, None)
    return SpearmanSummary(
        mean=float(np.mean(overall)) if overall else None,
        tail_mean=float(np.mean(tail)) if tail else None,
        p5=p5,
        p95=p95,
        n_images=len(groups),
        n_defined=len(overall),
        n_tail_defined=len(tail),
    )
