import dataclasses

import numpy as np
import pytest
import torch

from heedlab.constants import IGNORE_INDEX
from heedlab.exceptions import FisherError, ShapeMismatch
from heedlab.fisher import (
    SensitivityField,
    grad_weight,
    negative_log_likelihood,
    position_sensitivity,
    proxy_validation,
    quadratic_surrogate,
)
from heedlab.losses import ResidualTrace, heed_loss


def field(g_norms_sq, d: int = 1) -> SensitivityField:
    g = np.asarray(g_norms_sq, dtype=np.float64)
    return SensitivityField(layers=tuple(range(1, g.shape[0] + 1)), g_norms_sq=g, d=d)


@pytest.mark.parametrize(
    "g_norms_sq, expected",
    [
        ([[1.0, 3.0]], [0.5, 1.5]),
        ([[2.0, 2.0, 2.0]], [1.0, 1.0, 1.0]),
        ([[1.0, 0.0], [1.0, 2.0]], [1.0, 1.0]),
        ([[0.0, 0.0, 0.0]], [1.0, 1.0, 1.0]),
    ],
)
def test_grad_weight_examples(g_norms_sq, expected):
    weights = grad_weight(field(g_norms_sq))
    np.testing.assert_allclose(weights.weights, expected, rtol=1e-15)


def test_grad_weight_floors_silent_positions():
    weights = grad_weight(field([[4.0, 0.0, 0.0]]), visual_count=2).weights
    assert np.all(weights > 0.0)
    assert weights.sum() == pytest.approx(3.0)
    assert weights[1] == weights[2]


def test_grad_weight_length_mismatch():
    with pytest.raises(ShapeMismatch):
        grad_weight(field([[1.0, 2.0]]), T=5)


def test_sensitivity_is_mean_squared_gradient():
    assert field([[25.0]], d=2).s[0, 0] == 12.5


def test_quadratic_surrogate():
    f = field([[4.0, 1.0]], d=2)
    assert quadratic_surrogate(np.zeros((2, 2)), f) == 0.0
    assert quadratic_surrogate(np.array([[1.0, 0.0], [0.0, 2.0]]), f) == pytest.approx(2.0)
    with pytest.raises(ShapeMismatch):
        quadratic_surrogate(np.zeros((3, 2)), f)


def test_heed_with_gradient_weights_matches_surrogate():
    """With one alignment layer, density-free HEED under w_grad is 2·Q/Σs."""
    rng = np.random.default_rng(4)
    for _ in range(100):
        T, d = int(rng.integers(1, 12)), int(rng.integers(1, 6))
        f = field(rng.uniform(0.01, 5.0, size=(1, T)), d=d)
        delta = rng.standard_normal((1, T, d))

        student = ResidualTrace((1,), torch.from_numpy(delta))
        teacher = ResidualTrace((1,), torch.zeros(1, T, d, dtype=torch.float64))
        heed = heed_loss(student, teacher, grad_weight(f)).item()
        expected = 2.0 * quadratic_surrogate(delta, f) / f.s.sum()
        assert heed == pytest.approx(expected, rel=1e-10)


def test_position_sensitivity_matches_finite_differences(teacher, samples, tiny):
    sample = samples[0]
    sensitivity = position_sensitivity(teacher, sample)
    layers = tiny.alignment_layers()
    assert sensitivity.layers == layers
    assert sensitivity.grads.shape == (len(layers), tiny.seq_len, tiny.d_model)
    np.testing.assert_allclose(sensitivity.g_norms_sq, (sensitivity.grads**2).sum(axis=-1))

    def nll(layer: int, position: int, k: int, eps: float) -> float:
        offset = torch.zeros(1, tiny.seq_len, tiny.d_model, dtype=torch.float64)
        offset[0, position, k] = eps
        with torch.no_grad():
            value, _ = negative_log_likelihood(teacher, sample, residual_offsets={layer: offset})
        return float(value)

    rng = np.random.default_rng(0)
    analytic, numeric = [], []
    for _ in range(24):
        index = int(rng.integers(len(layers)))
        position = int(rng.integers(tiny.seq_len - 1))
        k = int(rng.integers(tiny.d_model))
        eps = 1e-5
        numeric.append((nll(layers[index], position, k, eps) - nll(layers[index], position, k, -eps)) / (2 * eps))
        analytic.append(sensitivity.grads[index, position, k])

    analytic, numeric = np.array(analytic), np.array(numeric)
    assert np.linalg.norm(analytic - numeric) <= 1e-4 * max(np.linalg.norm(analytic), 1e-12)


def test_first_order_remainder_is_quadratic(teacher, samples, tiny):
    sample = samples[2]
    sensitivity = position_sensitivity(teacher, sample)
    layers = tiny.alignment_layers()
    rng = np.random.default_rng(4)
    direction = rng.standard_normal(sensitivity.grads.shape)
    slope = float((sensitivity.grads * direction).sum())

    def nll(h: float) -> float:
        offsets = {s: torch.from_numpy(h * direction[i])[None] for i, s in enumerate(layers)}
        with torch.no_grad():
            value, _ = negative_log_likelihood(teacher, sample, residual_offsets=offsets)
        return float(value)

    base = nll(0.0)
    errors = [abs(nll(h) - base - h * slope) for h in (2e-2, 1e-2, 5e-3)]
    for coarse, fine in zip(errors, errors[1:]):
        assert 3.5 <= coarse / fine <= 4.5


def test_last_position_has_no_sensitivity(teacher, samples):
    sensitivity = position_sensitivity(teacher, samples[1])
    assert np.all(sensitivity.g_norms_sq[:, -1] == 0.0)
    assert np.all(grad_weight(sensitivity).weights > 0.0)


def test_unsupervised_sample(teacher, samples):
    sample = dataclasses.replace(samples[0], labels=np.full_like(samples[0].labels, IGNORE_INDEX))
    with pytest.raises(FisherError):
        position_sensitivity(teacher, sample)


def test_proxy_validation_report(teacher, samples):
    report = proxy_validation(teacher, samples[:4])
    data = report.to_dict()
    assert set(data) == {"density_vs_gradient", "cross_layer"}
    assert data["density_vs_gradient"]["n_images"] == 4
    assert set(data["cross_layer"]) == {"mean", "min", "max"}
    if report.density_vs_gradient.mean is not None:
        assert -1.0 <= report.density_vs_gradient.mean <= 1.0
