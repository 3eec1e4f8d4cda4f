import pytest
import torch

from heedlab.config import DataParams, DiagnosticParams, ExperimentConfig
from heedlab.toy.data import synth_dataset
from heedlab.toy.model import ToyConfig, build_teacher, hybridize
from heedlab.toy.train import StageBudget, TrainParams

# 3x3 images, 3 prompt + 2 answer tokens: 14 positions
TINY = ToyConfig(
    n_layers=4,
    d_model=8,
    n_heads=2,
    vocab=32,
    grid_height=3,
    grid_width=3,
    text_len=3,
    feature_dim=18,
    d_ff=16,
    n_glyphs=2,
    answer_len=2,
)


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run the desk-scale experiments")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip = pytest.mark.skip(reason="desk-scale experiment, use --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture(autouse=True)
def single_thread():
    """Keep float64 reductions in one order so reruns are bit-identical."""
    threads = torch.get_num_threads()
    torch.set_num_threads(1)
    yield
    torch.set_num_threads(threads)


@pytest.fixture
def tiny():
    return TINY


@pytest.fixture
def teacher():
    model = build_teacher(TINY)
    for param in model.parameters():
        param.requires_grad_(False)
    return model.eval()


@pytest.fixture
def student(teacher):
    return hybridize(teacher)


@pytest.fixture
def samples():
    return synth_dataset(TINY, 8, seed=5)


def tiny_experiment(output, **changes) -> ExperimentConfig:
    """A whole experiment small enough for the unit tests; the teacher gate is off."""
    settings = dict(
        toy=TINY,
        budget=StageBudget(total_tokens=560),
        train=TrainParams(
            batch_size=4,
            teacher_max_steps=10,
            teacher_eval_every=5,
            competence_gate=0.0,
            competence_samples=8,
        ),
        data=DataParams(n_train=16, n_eval=8, n_diag=4, teacher_train=32),
        diagnostics=DiagnosticParams(n_resamples=100),
        conditions=("C3", "C4"),
        seeds=(0, 1),
        output=str(output),
    )
    settings.update(changes)
    return ExperimentConfig(**settings)


@pytest.fixture
def experiment(tmp_path):
    return tiny_experiment(tmp_path / "runs")
