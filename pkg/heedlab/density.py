"""
Density-weighted residual alignment laboratory.

Training-free density signal: a patch is dense when its feature differs from
the features of its 3x3 neighbourhood. Densities are min-max normalized per
image and turned into per-position alignment weights that sum to the
sequence length.
"""
import logging
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .constants import BETA, TAU
from .exceptions import DensityError

__all__ = (
    "DensityMap",
    "PatchGrid",
    "WeightVector",
    "density_weights",
    "joint_rho_tilde",
    "normalize_density",
    "patch_density",
    "sequence_weights",
    "uniform_weights",
)

log = logging.getLogger(__name__)

# The 8 neighbours of a patch, center excluded
NEIGHBOURS = tuple((di, dj) for di in (-1, 0, 1) for dj in (-1, 0, 1) if (di, dj) != (0, 0))


@dataclass(frozen=True)
class PatchGrid:
    """Per-patch features of one image, shape (height, width, D)."""

    features: np.ndarray

    def __post_init__(self) -> None:
        features = np.asarray(self.features, dtype=np.float64)
        if features.ndim != 3:
            raise DensityError(f"patch features must be (height, width, D), got shape {features.shape}")
        if features.shape[0] < 1 or features.shape[1] < 1:
            raise DensityError("empty patch grid")
        if features.shape[2] < 1:
            raise DensityError("patch features need at least one dimension")
        if not np.all(np.isfinite(features)):
            raise DensityError("patch features must be finite")
        object.__setattr__(self, "features", features)

    @property
    def height(self) -> int:
        return int(self.features.shape[0])

    @property
    def width(self) -> int:
        return int(self.features.shape[1])

    @property
    def n_patches(self) -> int:
        return self.height * self.width


@dataclass(frozen=True)
class DensityMap:
    """
    Densities of one image in raster order.

    ``rho`` keeps the grid shape when it comes from a PatchGrid; maps decoded
    from a cache are flat.
    """

    rho: np.ndarray
    rho_tilde: Optional[np.ndarray] = None
    degenerate_flag: bool = False

    @property
    def visual_count(self) -> int:
        return int(np.asarray(self.rho).size)

    def flat_rho(self) -> np.ndarray:
        return np.asarray(self.rho, dtype=np.float64).ravel()

    def flat_rho_tilde(self) -> np.ndarray:
        if self.rho_tilde is None:
            raise DensityError("density map is not normalized yet")
        return np.asarray(self.rho_tilde, dtype=np.float64).ravel()


@dataclass(frozen=True)
class WeightVector:
    """Per-position alignment weights, visual positions first, then text."""

    weights: np.ndarray
    visual_count: int
    text_count: int
    tau: float = TAU
    beta: float = BETA
    extra: dict = field(default_factory=dict, compare=False)

    @property
    def T(self) -> int:  # noqa: N802
        return int(self.weights.size)


def patch_density(grid: PatchGrid) -> DensityMap:
    """
    ρ(p) = 1 - mean cosine similarity between v_p and its 8 neighbours.

    Borders use reflected padding, so a 1x1 grid is its own neighbourhood.
    """
    features = grid.features
    norms = np.linalg.norm(features, axis=-1)
    if np.any(norms == 0.0):
        bad = np.argwhere(norms == 0.0)[0]
        raise DensityError(f"undefined cosine: zero-norm feature at patch {tuple(int(i) for i in bad)}")

    unit = features / norms[..., None]
    padded = np.pad(unit, ((1, 1), (1, 1), (0, 0)), mode="reflect")
    height, width = grid.height, grid.width

    cosines = np.zeros((height, width), dtype=np.float64)
    for di, dj in NEIGHBOURS:
        shifted = padded[1 + di : 1 + di + height, 1 + dj : 1 + dj + width]
        cosines += np.einsum("hwd,hwd->hw", unit, shifted)

    rho = np.clip(1.0 - cosines / len(NEIGHBOURS), 0.0, 2.0)
    return DensityMap(rho=rho)


def normalize_density(density: DensityMap) -> DensityMap:
    """Per-image min-max normalization; a constant map is degenerate and maps to 0."""
    rho = np.asarray(density.rho, dtype=np.float64)
    low, high = float(rho.min()), float(rho.max())
    if high == low:
        return replace(density, rho_tilde=np.zeros_like(rho), degenerate_flag=True)
    return replace(density, rho_tilde=(rho - low) / (high - low), degenerate_flag=False)


def joint_rho_tilde(density: DensityMap, text_count: int, beta: float = BETA) -> np.ndarray:
    """
    Normalized densities of the whole sequence, visual positions then text.

    Text positions get ρ_text = β·mean(visual ρ) and share the per-image
    min-max normalization with the visual ones.
    """
    if density.rho_tilde is None:
        density = normalize_density(density)
    visual = density.flat_rho()
    if density.degenerate_flag:
        return np.zeros(visual.size + text_count, dtype=np.float64)
    joint = np.concatenate([visual, np.full(text_count, beta * float(visual.mean()))])
    low, high = float(joint.min()), float(joint.max())
    return (joint - low) / (high - low)


def sequence_weights(density: DensityMap, text_count: int, tau: float = TAU, beta: float = BETA) -> WeightVector:
    """
    Alignment weights w(p) ∝ exp(ρ̃(p)/τ) with Σ_p w(p) = T.

    Text positions get ρ_text = β·mean(visual ρ) before the joint per-image
    min-max normalization. A degenerate image gives uniform weights.
    """
    if tau <= 0:
        raise DensityError(f"temperature must be positive, got {tau}")
    if beta <= 0:
        raise DensityError(f"text boost must be positive, got {beta}")
    if text_count < 0:
        raise DensityError(f"text count must be non-negative, got {text_count}")

    rho_tilde = joint_rho_tilde(density, text_count, beta=beta)
    total = rho_tilde.size

    # Shifting by the clip ceiling keeps exp() bounded by 1
    ceiling = 1.0 / tau
    scores = np.exp(np.minimum(rho_tilde / tau, ceiling) - ceiling)
    weights = scores * (total / scores.sum())
    if not np.all(weights > 0.0):
        raise DensityError(f"temperature {tau} underflows the alignment weights")

    return WeightVector(
        weights=weights,
        visual_count=total - text_count,
        text_count=text_count,
        tau=tau,
        beta=beta,
    )


def density_weights(grid: PatchGrid, text_count: int, tau: float = TAU, beta: float = BETA) -> WeightVector:
    """The whole one-time pipeline for one sample: density, normalization, weights."""
    density = normalize_density(patch_density(grid))
    weights = sequence_weights(density, text_count, tau=tau, beta=beta)
    log.debug("density weights: T=%d, max/min=%.3f", weights.T, weights.weights.max() / weights.weights.min())
    return weights


def uniform_weights(visual_count: int, text_count: int) -> WeightVector:
    return WeightVector(
        weights=np.ones(visual_count + text_count, dtype=np.float64),
        visual_count=visual_count,
        text_count=text_count,
    )
