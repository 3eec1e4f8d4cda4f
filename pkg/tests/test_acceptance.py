"""
Desk-scale directional checks on the default toy configuration. They train
real teachers and students for three seeds; run them with ``--runslow``.
"""
import dataclasses

import pytest

from heedlab.config import ControlParams, ExperimentConfig
from heedlab.harness import run_control, run_experiment
from heedlab.report import read_report

pytestmark = pytest.mark.slow

SEEDS = (0, 1, 2)


@pytest.fixture(scope="module")
def ladder(tmp_path_factory):
    config = ExperimentConfig(conditions=("C3", "C4"), seeds=SEEDS, output=str(tmp_path_factory.mktemp("ladder")))
    return config, run_experiment(config)


def test_teachers_are_competent(ladder):
    _, aggregate = ladder
    for seed in SEEDS:
        assert aggregate["teacher_accuracy"][str(seed)]["all"] >= 95.0


def test_drift_concentrates_on_dense_positions(ladder):
    config, aggregate = ladder
    assert aggregate["missing"] == []
    for seed in SEEDS:
        report = read_report(config.output_path / "runs" / f"C3-seed{seed}.json")
        assert float(report["diagnostics"]["drift_deciles"]["ratio"]) >= 1.5


def test_density_weighting_helps_the_dense_task(ladder):
    _, aggregate = ladder
    delta = aggregate["deltas"]["C4-C3"]
    assert delta["dense"]["n"] == len(SEEDS)
    assert delta["dense"]["mean"] >= 2.0
    smooth = delta["smooth"]
    assert abs(smooth["mean"]) <= 2.0 * smooth["se"]


def test_density_ranks_like_the_gradient(ladder):
    _, aggregate = ladder
    for seed in SEEDS:
        proxy = aggregate["proxy"][str(seed)]["density_vs_gradient"]
        assert proxy["mean"] > 0.0
        assert proxy["tail_mean"] >= proxy["mean"]


def test_density_targeted_masks_beat_random_masks(ladder):
    config, _ = ladder
    control = dataclasses.replace(
        config, control=ControlParams(k_list=(25,), random_seeds=(0, 1, 2), with_reference=False)
    )
    curve = run_control(control)["curve"]
    paired = curve[0]["paired"]
    assert paired["n"] == len(SEEDS)
    assert paired["mean"] > paired["se"]
