"""
Density-weighted residual alignment laboratory.

Where does a hybrid student drift away from its teacher, and which tokens
does the teacher actually need?

- residual drift δ_{ℓ,p} = ‖r_student - r_teacher‖₂ at every alignment layer;
- masking importance a_p, the drop of the teacher's answer log-probability
  when position p is hidden from every attention map;
- density decile tables of both, the semi-partial R² decomposition of drift
  with image-level bootstrap CIs, and per-image Spearman correlations.

Token tables are exchanged as tab-separated text with one header line.
"""
import csv
import logging
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from .constants import BETA, BOOTSTRAP_ALPHA, BOOTSTRAP_RESAMPLES, PREDICTORS
from .density import joint_rho_tilde
from .exceptions import DiagnosticsError, ShapeMismatch
from .losses import ResidualTrace
from .stats import (
    DecileTable,
    RegressionReport,
    SpearmanSummary,
    decile_summary,
    mean_per_image_spearman,
    regression_bootstrap,
)
from .toy.data import SynthSample, collate, visual_density
from .toy.model import ToyModel, answer_log_prob, forward_with_residuals

__all__ = (
    "DiagnosticReport",
    "TokenRecord",
    "build_token_records",
    "mask_importance",
    "mask_importance_map",
    "read_token_table",
    "residual_drift",
    "run_diagnostics",
    "teacher_attention",
    "write_token_table",
)

log = logging.getLogger(__name__)

# Masked re-forwards per teacher call
MASK_CHUNK = 64


@dataclass(frozen=True)
class TokenRecord:
    """One (alignment layer, position) of one diagnostic image."""

    image_id: int
    layer: int
    position: int
    density: float
    token_type: int
    layer_depth: float
    teacher_attention: float
    drift: float
    mask_importance: Optional[float] = None

    def predictors(self) -> Tuple[float, ...]:
        return tuple(float(getattr(self, name)) for name in PREDICTORS)


#
# Token tables
#

COLUMNS = tuple(f.name for f in fields(TokenRecord))
# Missing optional values are written as this marker
NA = "NA"


def write_token_table(records: Iterable[TokenRecord], path: Union[str, Path]) -> None:
    """
    Columns, in order: image_id, layer, position, density, token_type,
    layer_depth, teacher_attention, drift, mask_importance (NA when unknown).
    """
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, delimiter="\t", lineterminator="\n")
        writer.writerow(COLUMNS)
        for record in records:
            row = asdict(record)
            writer.writerow([NA if row[name] is None else repr(row[name]) for name in COLUMNS])


def read_token_table(path: Union[str, Path]) -> List[TokenRecord]:
    with open(path, newline="", encoding="utf-8") as handle:
        reader = csv.reader(handle, delimiter="\t")
        header = tuple(next(reader, ()))
        if header != COLUMNS:
            raise DiagnosticsError(f"{path}: unexpected token table header {header}")
        records = []
        for line, row in enumerate(reader, start=2):
            if len(row) != len(COLUMNS):
                raise DiagnosticsError(f"{path}:{line}: {len(row)} fields, expected {len(COLUMNS)}")
            values = dict(zip(COLUMNS, row))
            records.append(
                TokenRecord(
                    image_id=int(values["image_id"]),
                    layer=int(values["layer"]),
                    position=int(values["position"]),
                    density=float(values["density"]),
                    token_type=int(values["token_type"]),
                    layer_depth=float(values["layer_depth"]),
                    teacher_attention=float(values["teacher_attention"]),
                    drift=float(values["drift"]),
                    mask_importance=None if values["mask_importance"] == NA else float(values["mask_importance"]),
                )
            )
    return records


#
# Measurements
#


def residual_drift(student: ResidualTrace, teacher: ResidualTrace) -> np.ndarray:
    """δ of shape (batch, layers, T)."""
    if student.residuals.shape != teacher.residuals.shape:
        raise ShapeMismatch(
            f"residuals: student {tuple(student.residuals.shape)} vs teacher {tuple(teacher.residuals.shape)}"
        )
    diff = (student.residuals - teacher.residuals).detach()
    return torch.linalg.vector_norm(diff, dim=-1).cpu().numpy()


@torch.no_grad()
def mask_importance(teacher: ToyModel, sample: SynthSample, masked_positions: Sequence[int]) -> float:
    """a = answer score unmasked - answer score with ``masked_positions`` hidden from attention."""
    T = sample.grid.n_patches + sample.text_count
    masked = sorted(set(int(p) for p in masked_positions))
    if any(not 0 <= p < T for p in masked):
        raise DiagnosticsError(f"masked positions must be in [0, {T}), got {masked}")
    if len(masked) == T:
        raise DiagnosticsError("cannot mask every position")
    if not masked:
        return 0.0

    batch = collate([sample, sample])
    key_mask = torch.ones(2, T, dtype=torch.bool)
    key_mask[1, masked] = False
    scores = answer_log_prob(teacher, batch, key_mask=key_mask)
    return float(scores[0] - scores[1])


@torch.no_grad()
def mask_importance_map(
    teacher: ToyModel, sample: SynthSample, positions: Optional[Sequence[int]] = None
) -> np.ndarray:
    """Single-position mask importance for every position in ``positions`` (default: the visual ones)."""
    positions = list(range(sample.grid.n_patches)) if positions is None else [int(p) for p in positions]
    T = sample.grid.n_patches + sample.text_count
    if T == 1 and positions:
        raise DiagnosticsError("cannot mask every position")

    base = float(answer_log_prob(teacher, collate([sample]))[0])
    drops = np.zeros(len(positions), dtype=np.float64)
    for start in range(0, len(positions), MASK_CHUNK):
        chunk = positions[start : start + MASK_CHUNK]
        batch = collate([sample] * len(chunk))
        key_mask = torch.ones(len(chunk), T, dtype=torch.bool)
        key_mask[torch.arange(len(chunk)), torch.tensor(chunk)] = False
        drops[start : start + len(chunk)] = base - answer_log_prob(teacher, batch, key_mask=key_mask).numpy()
    return drops


def teacher_attention(attention: Sequence[Optional[torch.Tensor]]) -> np.ndarray:
    """
    Mean attention mass received by each position, averaged over heads, over
    all T query positions and over the attention layers. Shape (batch, T).
    """
    maps = [probs for probs in attention if probs is not None]
    if not maps:
        raise DiagnosticsError("no attention layer to read from")
    received = torch.stack([probs.mean(dim=(1, 2)) for probs in maps]).mean(dim=0)
    return received.detach().cpu().numpy()


#
# Token records
#


@torch.no_grad()
def build_token_records(
    teacher: ToyModel,
    student: ToyModel,
    samples: Sequence[SynthSample],
    with_mask: bool = True,
    beta: float = BETA,
    batch_size: int = 32,
) -> List[TokenRecord]:
    """One record per (image, alignment layer, position) of the diagnostic slice."""
    config = teacher.config
    layers = config.alignment_layers()
    depth_scale = max(config.n_layers - 1, 1)
    records = []

    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        batch = collate(chunk)
        teacher_out = teacher(batch.features, batch.tokens)
        teacher_trace = ResidualTrace(
            layers=layers, residuals=torch.stack([teacher_out.hiddens[s] for s in layers], dim=1)
        )
        drift = residual_drift(forward_with_residuals(student, batch), teacher_trace)
        attention = teacher_attention(teacher_out.attention)

        for b, sample in enumerate(chunk):
            density = joint_rho_tilde(visual_density(sample), sample.text_count, beta=beta)
            n_visual = sample.grid.n_patches
            masking = mask_importance_map(teacher, sample) if with_mask else None
            for index, s in enumerate(layers):
                for p in range(density.size):
                    records.append(
                        TokenRecord(
                            image_id=sample.sample_id,
                            layer=s,
                            position=p,
                            density=float(density[p]),
                            token_type=int(p < n_visual),
                            layer_depth=(s - 1) / depth_scale,
                            teacher_attention=float(attention[b, p]),
                            drift=float(drift[b, index, p]),
                            mask_importance=float(masking[p]) if masking is not None and p < n_visual else None,
                        )
                    )
    log.debug("built %d token records over %d images", len(records), len(samples))
    return records


def group_by_image(records: Iterable[TokenRecord]) -> Dict[int, List[TokenRecord]]:
    groups: Dict[int, List[TokenRecord]] = {}
    for record in records:
        groups.setdefault(record.image_id, []).append(record)
    return groups


def visual_position_table(records: Iterable[TokenRecord]) -> Dict[str, np.ndarray]:
    """
    Visual positions with their drift averaged over the alignment layers:
    columns image_id, position, density, drift, mask_importance.
    """
    drift: Dict[Tuple[int, int], List[float]] = {}
    meta: Dict[Tuple[int, int], TokenRecord] = {}
    for record in records:
        if not record.token_type:
            continue
        key = (record.image_id, record.position)
        drift.setdefault(key, []).append(record.drift)
        meta.setdefault(key, record)
    keys = sorted(drift)
    return {
        "image_id": np.array([k[0] for k in keys], dtype=np.int64),
        "position": np.array([k[1] for k in keys], dtype=np.int64),
        "density": np.array([meta[k].density for k in keys]),
        "drift": np.array([float(np.mean(drift[k])) for k in keys]),
        "mask_importance": np.array(
            [np.nan if meta[k].mask_importance is None else meta[k].mask_importance for k in keys]
        ),
    }


#
# Report
#


@dataclass(frozen=True)
class DiagnosticReport:
    n_images: int
    n_records: int
    drift_deciles: DecileTable
    mask_deciles: Optional[DecileTable]
    regression: RegressionReport
    drift_spearman: SpearmanSummary
    mask_spearman: Optional[SpearmanSummary]

    def to_dict(self) -> dict:
        return {
            "n_images": self.n_images,
            "n_records": self.n_records,
            "drift_deciles": self.drift_deciles.to_dict(),
            "mask_deciles": self.mask_deciles.to_dict() if self.mask_deciles else None,
            "regression": self.regression.to_dict(),
            "drift_spearman": self.drift_spearman.to_dict(),
            "mask_spearman": self.mask_spearman.to_dict() if self.mask_spearman else None,
        }


def run_diagnostics(
    records: Sequence[TokenRecord],
    n_resamples: int = BOOTSTRAP_RESAMPLES,
    alpha: float = BOOTSTRAP_ALPHA,
    seed: int = 0,
    workers: Optional[int] = None,
) -> DiagnosticReport:
    """The whole measurement protocol over a token table."""
    if not records:
        raise DiagnosticsError("empty token table")
    images = group_by_image(records)

    table = visual_position_table(records)
    drift_deciles = decile_summary(table["density"], table["drift"])

    has_mask = not np.any(np.isnan(table["mask_importance"]))
    mask_deciles = decile_summary(table["density"], table["mask_importance"]) if has_mask else None

    per_image = []
    for image_id in sorted(images):
        rows = images[image_id]
        X = np.array([record.predictors() for record in rows])
        y = np.array([record.drift for record in rows])
        per_image.append((X, y))
    regression = regression_bootstrap(per_image, n_resamples=n_resamples, alpha=alpha, seed=seed, workers=workers)

    def per_image_pairs(column: str) -> List[Tuple[np.ndarray, np.ndarray]]:
        pairs = []
        for image_id in np.unique(table["image_id"]):
            rows = table["image_id"] == image_id
            pairs.append((table["density"][rows], table[column][rows]))
        return pairs

    drift_spearman = mean_per_image_spearman(per_image_pairs("drift"))
    mask_spearman = mean_per_image_spearman(per_image_pairs("mask_importance")) if has_mask else None

    log.info(
        "diagnostics: drift top/bottom %.2f, density semi-partial R² %.3f (joint %.3f)",
        drift_deciles.ratio,
        regression.semi_partial_r2.get("density", float("nan")),
        regression.joint_r2,
    )
    return DiagnosticReport(
        n_images=len(images),
        n_records=len(records),
        drift_deciles=drift_deciles,
        mask_deciles=mask_deciles,
        regression=regression,
        drift_spearman=drift_spearman,
        mask_spearman=mask_spearman,
    )
