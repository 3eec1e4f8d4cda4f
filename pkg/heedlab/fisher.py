"""
Density-weighted residual alignment laboratory.

Diagonal empirical-Fisher reference for the alignment weight.

The teacher's negative log-likelihood R_x (summed over supervised answer
positions) is differentiated with respect to its own residual stream at the
alignment layers in one backward pass. Per position the sensitivity is
s_{ℓ,p} = ‖g_{ℓ,p}‖²/d, and the gradient reference weight (condition C5) is
the layer-summed ‖g_{ℓ,p}‖² rescaled to Σ_p w(p) = T.
"""
import logging
from dataclasses import dataclass
from itertools import combinations
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from .constants import IGNORE_INDEX, TAIL_QUANTILE
from .density import WeightVector, patch_density
from .exceptions import FisherError, ShapeMismatch
from .stats import SpearmanSummary, mean_per_image_spearman, spearman
from .toy.data import SynthSample, collate
from .toy.model import ToyModel

__all__ = (
    "ProxyReport",
    "SensitivityField",
    "grad_weight",
    "negative_log_likelihood",
    "position_sensitivity",
    "proxy_validation",
    "quadratic_surrogate",
)

log = logging.getLogger(__name__)

# Floor of the layer-summed sensitivity, relative to its maximum
SENSITIVITY_FLOOR = 1e-12


@dataclass(frozen=True)
class SensitivityField:
    """Per (alignment layer, position) sensitivities of one sample."""

    layers: Tuple[int, ...]
    g_norms_sq: np.ndarray
    d: int
    grads: Optional[np.ndarray] = None

    @property
    def s(self) -> np.ndarray:
        return self.g_norms_sq / self.d

    @property
    def T(self) -> int:  # noqa: N802
        return int(self.g_norms_sq.shape[1])


def negative_log_likelihood(
    teacher: ToyModel, sample: SynthSample, residual_offsets: Optional[Dict[int, torch.Tensor]] = None
) -> Tuple[torch.Tensor, List[torch.Tensor]]:
    """R_x and the residual snapshots at the alignment layers, still attached to the graph."""
    batch = collate([sample])
    if not bool((batch.labels != IGNORE_INDEX).any()):
        raise FisherError(f"sample {sample.sample_id} has no supervised position")
    out = teacher(batch.features, batch.tokens, residual_offsets=residual_offsets)
    nll = F.cross_entropy(out.logits[0], batch.labels[0], ignore_index=IGNORE_INDEX, reduction="sum")
    return nll, [out.hiddens[s] for s in teacher.config.alignment_layers()]


def position_sensitivity(teacher: ToyModel, sample: SynthSample) -> SensitivityField:
    """
    g_{ℓ,p} = ∂R_x/∂r_{ℓ,p}. Later layers read the upstream residuals, so the
    gradient at an intermediate snapshot is exactly this partial derivative.

    It is taken through a zero offset on every snapshot, which also works for
    a teacher whose parameters are all frozen.
    """
    layers = teacher.config.alignment_layers()
    T = sample.grid.n_patches + sample.text_count
    with torch.enable_grad():
        offsets = {
            s: torch.zeros(1, T, teacher.config.d_model, dtype=torch.float64, requires_grad=True) for s in layers
        }
        nll, _ = negative_log_likelihood(teacher, sample, residual_offsets=offsets)
        grads = torch.autograd.grad(nll, [offsets[s] for s in layers])
    stacked = torch.stack([g[0] for g in grads]).detach().cpu().numpy()
    return SensitivityField(
        layers=layers,
        g_norms_sq=(stacked**2).sum(axis=-1),
        d=int(stacked.shape[-1]),
        grads=stacked,
    )


def grad_weight(field: SensitivityField, T: Optional[int] = None, visual_count: Optional[int] = None) -> WeightVector:
    """
    w_grad(p) ∝ Σ_ℓ ‖g_{ℓ,p}‖², rescaled to Σ_p w(p) = T.

    All-zero sensitivities give uniform weights. Positions without downstream
    influence are floored at 1e-12 of the largest sensitivity so every weight
    stays positive.
    """
    T = field.T if T is None else T
    if T != field.T:
        raise ShapeMismatch(f"field covers {field.T} positions, asked for T={T}")
    summed = field.g_norms_sq.sum(axis=0)
    peak = float(summed.max())
    if peak <= 0.0:
        weights = np.ones(T, dtype=np.float64)
    else:
        summed = np.maximum(summed, SENSITIVITY_FLOOR * peak)
        weights = summed * (T / summed.sum())
    visual_count = T if visual_count is None else visual_count
    return WeightVector(weights=weights, visual_count=visual_count, text_count=T - visual_count)


def quadratic_surrogate(delta_r: np.ndarray, field: SensitivityField) -> float:
    """Q_x(Δr) = ½ Σ_{ℓ,p} s_{ℓ,p}·‖Δr_{ℓ,p}‖²."""
    delta_r = np.asarray(delta_r, dtype=np.float64)
    if delta_r.ndim == 2:
        delta_r = delta_r[None]
    if delta_r.shape[:2] != field.g_norms_sq.shape or delta_r.shape[2] != field.d:
        raise ShapeMismatch(f"Δr {delta_r.shape} vs field {field.g_norms_sq.shape} x d={field.d}")
    return 0.5 * float((field.s * (delta_r**2).sum(axis=-1)).sum())


@dataclass(frozen=True)
class ProxyReport:
    """How well density ranks positions like the layer-summed gradient sensitivity."""

    density_vs_gradient: SpearmanSummary
    cross_layer_mean: Optional[float]
    cross_layer_min: Optional[float]
    cross_layer_max: Optional[float]

    def to_dict(self) -> dict:
        return {
            "density_vs_gradient": self.density_vs_gradient.to_dict(),
            "cross_layer": {"mean": self.cross_layer_mean, "min": self.cross_layer_min, "max": self.cross_layer_max},
        }


def cross_layer_spearman(fields: Sequence[SensitivityField]) -> List[float]:
    """Per layer pair, the mean over images of the Spearman correlation of s_{ℓ,p} across positions."""
    if not fields or len(fields[0].layers) < 2:
        return []
    pairs = list(combinations(range(len(fields[0].layers)), 2))
    means = []
    for a, b in pairs:
        values = [spearman(f.s[a], f.s[b]) for f in fields]
        defined = [v for v in values if v is not None]
        if defined:
            means.append(float(np.mean(defined)))
    return means


def proxy_validation(
    teacher: ToyModel, samples: Sequence[SynthSample], fields: Optional[Sequence[SensitivityField]] = None
) -> ProxyReport:
    """
    Per-image Spearman between ρ(p) and Σ_ℓ‖g_{ℓ,p}‖² over the visual
    positions (overall and top-quartile tail), and the cross-layer stability
    of the sensitivities.
    """
    if fields is None:
        fields = [position_sensitivity(teacher, sample) for sample in samples]
    n_visual = teacher.config.n_visual

    groups = []
    for sample, field in zip(samples, fields):
        rho = patch_density(sample.grid).flat_rho()
        groups.append((rho, field.g_norms_sq.sum(axis=0)[:n_visual]))

    summary = mean_per_image_spearman(groups, tail_quantile=TAIL_QUANTILE)
    cross = cross_layer_spearman([SensitivityField(f.layers, f.g_norms_sq[:, :n_visual], f.d) for f in fields])
    log.info(
        "proxy: density vs gradient %s (tail %s), cross-layer %s",
        summary.mean,
        summary.tail_mean,
        float(np.mean(cross)) if cross else None,
    )
    return ProxyReport(
        density_vs_gradient=summary,
        cross_layer_mean=float(np.mean(cross)) if cross else None,
        cross_layer_min=float(np.min(cross)) if cross else None,
        cross_layer_max=float(np.max(cross)) if cross else None,
    )
