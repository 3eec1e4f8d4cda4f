import dataclasses
from pathlib import Path

import pytest
import yaml

from heedlab.config import ControlParams, DataParams, DensityParams, DiagnosticParams, ExperimentConfig
from heedlab.exceptions import ConfigError
from heedlab.toy.train import StageBudget

from conftest import tiny_experiment


def test_round_trip_through_dict(tmp_path):
    config = tiny_experiment(tmp_path)
    assert ExperimentConfig.from_dict(config.to_dict()) == config


def test_round_trip_through_yaml(tmp_path):
    config = tiny_experiment(tmp_path, cache="densities.cache")
    path = tmp_path / "experiment.yaml"
    config.to_yaml(path)
    assert ExperimentConfig.from_yaml(path) == config


def test_defaults():
    config = ExperimentConfig.from_dict({})
    assert config.conditions == ("C1", "C2", "C3", "C4", "C5")
    assert config.seeds == (0, 1, 2)
    assert config.density == DensityParams(tau=0.5, beta=2.0)
    assert config.control.k_list == (0, 10, 25, 50)
    assert config.budget.fractions == (0.1, 0.3, 0.6)


def test_partial_sections(tmp_path):
    path = tmp_path / "partial.yaml"
    path.write_text(yaml.safe_dump({"density": {"tau": 0.25}, "seeds": [4, 5], "budget": {"total_tokens": 50000}}))
    config = ExperimentConfig.from_yaml(path)
    assert config.density.tau == 0.25
    assert config.density.beta == 2.0
    assert config.seeds == (4, 5)
    assert config.budget == StageBudget(total_tokens=50000)


@pytest.mark.parametrize(
    "data, message",
    [
        ({"colour": "blue"}, "colour"),
        ({"density": {"tau": 0.5, "gamma": 1}}, "gamma"),
        ({"toy": {"layers": 4}}, "layers"),
        ({"conditions": ["C3", "C9"]}, "C9"),
        ({"conditions": ["C3", "C3"]}, "duplicate"),
        ({"density": {"tau": 0.0}}, "tau"),
        ({"budget": {"fractions": [0.5, 0.5, 0.0]}}, "total_tokens"),
        ({"budget": {"total_tokens": 10}}, "one batch"),
        ({"control": {"k_list": [10, 120]}}, "k values"),
        ({"diagnostics": {"n_resamples": 10}}, "n_resamples"),
        ({"data": {"n_diag": 1}}, "2 images"),
        ({"workers": 0}, "workers"),
        ({"toy": "tiny"}, "mapping"),
    ],
)
def test_invalid_configurations(data, message):
    with pytest.raises(ConfigError, match=message):
        ExperimentConfig.from_dict(data)


def test_bad_yaml(tmp_path):
    path = tmp_path / "broken.yaml"
    path.write_text("toy: [unclosed\n")
    with pytest.raises(ConfigError, match="invalid YAML"):
        ExperimentConfig.from_yaml(path)
    with pytest.raises(ConfigError, match="cannot read"):
        ExperimentConfig.from_yaml(tmp_path / "missing.yaml")


def test_config_hash(tmp_path):
    config = tiny_experiment(tmp_path / "a")
    assert config.config_hash() == tiny_experiment(tmp_path / "b").config_hash()
    assert len(config.config_hash()) == 64

    warmer = dataclasses.replace(config, density=DensityParams(tau=0.6))
    assert warmer.config_hash() != config.config_hash()
    fewer = dataclasses.replace(config, seeds=(0,))
    assert fewer.config_hash() != config.config_hash()


def test_per_seed_model(tmp_path):
    config = tiny_experiment(tmp_path)
    assert config.toy_for(3).seed == 3
    assert config.toy_for(3).d_model == config.toy.d_model


def test_section_validation():
    with pytest.raises(ConfigError):
        ControlParams(k_list=(10, 10))
    with pytest.raises(ConfigError):
        ControlParams(random_seeds=())
    with pytest.raises(ConfigError):
        DataParams(n_train=0)
    with pytest.raises(ConfigError):
        DiagnosticParams(alpha=1.5)


@pytest.mark.parametrize("name", ["default.yaml", "smoke.yaml"])
def test_shipped_configurations(name):
    config = ExperimentConfig.from_yaml(Path(__file__).parents[1] / "configs" / name)
    assert ExperimentConfig.from_dict(config.to_dict()) == config


def test_default_file_matches_the_defaults():
    config = ExperimentConfig.from_yaml(Path(__file__).parents[1] / "configs" / "default.yaml")
    assert config == ExperimentConfig()
