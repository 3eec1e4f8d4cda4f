"""
Density-weighted residual alignment laboratory.

Alignment and distillation losses of the C1-C5 ladder.

Every loss returns its value as a torch scalar that stays differentiable with
respect to the student tensors, together with the closed-form gradient with
respect to the student argument. Teacher tensors are always detached. Tensors
may carry a leading batch axis; losses are averaged over it.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F

from .constants import CONTROL_BOOST, IGNORE_INDEX, LAMBDA_CE, LAMBDA_KL
from .density import DensityMap, WeightVector
from .exceptions import EmptyLossSupport, InvalidSelection, InvalidWeights, LossError, ShapeMismatch

__all__ = (
    "LossValue",
    "ResidualTrace",
    "heed_loss",
    "hsa_loss",
    "kd_loss",
    "rsa_loss",
    "topk_mask_weights",
)

log = logging.getLogger(__name__)

Weights = Union[WeightVector, np.ndarray, torch.Tensor, Sequence[float], Sequence[WeightVector]]


@dataclass
class ResidualTrace:
    """
    Residual-stream snapshots at the alignment layers.

    ``residuals`` is (batch, layers, T, d); ``logits`` is (batch, T, vocab) and
    ``block_outputs`` holds the sequence-mixing block outputs at the same
    layers, used by the per-layer output matching of C2.
    """

    layers: Tuple[int, ...]
    residuals: torch.Tensor
    logits: Optional[torch.Tensor] = None
    block_outputs: Optional[torch.Tensor] = None
    attention: Optional[torch.Tensor] = None

    def __post_init__(self) -> None:
        if self.residuals.dim() == 3:
            self.residuals = self.residuals.unsqueeze(0)
            if self.logits is not None and self.logits.dim() == 2:
                self.logits = self.logits.unsqueeze(0)
            if self.block_outputs is not None and self.block_outputs.dim() == 3:
                self.block_outputs = self.block_outputs.unsqueeze(0)
        if self.residuals.dim() != 4:
            raise ShapeMismatch(f"residuals must be (batch, layers, T, d), got {tuple(self.residuals.shape)}")
        if self.residuals.shape[1] != len(self.layers):
            raise ShapeMismatch(f"{self.residuals.shape[1]} snapshots for layers {self.layers}")

    @property
    def T(self) -> int:  # noqa: N802
        return int(self.residuals.shape[2])

    @property
    def d(self) -> int:
        return int(self.residuals.shape[3])


@dataclass
class LossValue:
    value: torch.Tensor
    grad: Optional[torch.Tensor] = None
    parts: Dict[str, float] = field(default_factory=dict)

    def item(self) -> float:
        return float(self.value.detach())


def _batched(tensor: torch.Tensor, dims: int) -> torch.Tensor:
    return tensor.unsqueeze(0) if tensor.dim() == dims - 1 else tensor


def _check_pair(student: torch.Tensor, teacher: torch.Tensor, what: str) -> None:
    if student.shape != teacher.shape:
        raise ShapeMismatch(f"{what}: student {tuple(student.shape)} vs teacher {tuple(teacher.shape)}")


def _weight_tensor(weights: Weights, batch: int, T: int, like: torch.Tensor) -> torch.Tensor:
    if isinstance(weights, WeightVector):
        weights = weights.weights
    elif isinstance(weights, (list, tuple)) and weights and isinstance(weights[0], WeightVector):
        weights = np.stack([vector.weights for vector in weights])
    w = torch.as_tensor(np.asarray(weights) if not torch.is_tensor(weights) else weights)
    w = w.to(dtype=like.dtype, device=like.device)
    if w.dim() == 1:
        w = w.unsqueeze(0).expand(batch, -1)
    if tuple(w.shape) != (batch, T):
        raise ShapeMismatch(f"weights {tuple(w.shape)} do not match (batch={batch}, T={T})")
    if not bool(torch.all(torch.isfinite(w))) or not bool(torch.all(w > 0)):
        raise InvalidWeights("alignment weights must be finite and positive")
    return w


def _weighted_mse(student: torch.Tensor, teacher: torch.Tensor, weights: Optional[torch.Tensor]) -> LossValue:
    """(1/(|S*|·T)) Σ_ℓ Σ_p w(p)·‖Δ‖², averaged over the batch."""
    diff = student - teacher.detach()
    batch, n_layers, T, _ = diff.shape
    per_position = diff.pow(2).sum(dim=-1)
    scale = diff.detach().new_full((batch, 1, T, 1), 1.0)
    if weights is not None:
        per_position = per_position * weights[:, None, :]
        scale = weights.detach()[:, None, :, None]
    value = per_position.mean(dim=(1, 2)).mean()
    grad = 2.0 * scale * diff.detach() / (batch * n_layers * T)
    return LossValue(value=value, grad=grad)


def rsa_loss(student: ResidualTrace, teacher: ResidualTrace) -> LossValue:
    """Uniform residual-stream alignment: every position gets the same weight."""
    _check_pair(student.residuals, teacher.residuals, "residuals")
    return _weighted_mse(student.residuals, teacher.residuals, None)


def heed_loss(student: ResidualTrace, teacher: ResidualTrace, w: Weights) -> LossValue:
    """Density-weighted residual alignment; the same w(p) reweights every alignment layer."""
    _check_pair(student.residuals, teacher.residuals, "residuals")
    batch, _, T, _ = student.residuals.shape
    weights = _weight_tensor(w, batch, T, student.residuals)
    return _weighted_mse(student.residuals, teacher.residuals, weights)


def hsa_loss(student_block_outputs: torch.Tensor, teacher_block_outputs: torch.Tensor) -> LossValue:
    """
    Per-layer block-output matching: student mixer outputs against teacher
    attention outputs at the replaced layers, normalized like rsa_loss.
    """
    student = _batched(student_block_outputs, 4)
    teacher = _batched(teacher_block_outputs, 4)
    _check_pair(student, teacher, "block outputs")
    if student.dim() != 4:
        raise ShapeMismatch(f"block outputs must be (batch, layers, T, d), got {tuple(student.shape)}")
    return _weighted_mse(student, teacher, None)


def kd_loss(
    student_logits: torch.Tensor,
    teacher_logits: torch.Tensor,
    labels: torch.Tensor,
    lambda_kl: float = LAMBDA_KL,
    lambda_ce: float = LAMBDA_CE,
) -> LossValue:
    """
    λ_KL·KL(teacher ‖ student) + λ_CE·CE(student, labels).

    Both terms average over the supervised positions only; positions marked
    with IGNORE_INDEX contribute neither value nor gradient.
    """
    student = _batched(student_logits, 3)
    teacher = _batched(teacher_logits, 3).detach()
    labels = _batched(torch.as_tensor(labels, device=student.device), 2).long()
    _check_pair(student, teacher, "logits")
    if tuple(labels.shape) != tuple(student.shape[:2]):
        raise ShapeMismatch(f"labels {tuple(labels.shape)} vs logits {tuple(student.shape)}")

    vocab = student.shape[-1]
    support = labels != IGNORE_INDEX
    n_support = int(support.sum())
    if not n_support:
        raise EmptyLossSupport("empty loss support: every position is ignore-marked")
    if bool(torch.any((labels[support] < 0) | (labels[support] >= vocab))):
        raise LossError(f"labels must be token ids in [0, {vocab}) or {IGNORE_INDEX}")

    log_q = F.log_softmax(student, dim=-1)
    log_p = F.log_softmax(teacher, dim=-1)
    p = log_p.exp()

    kl_per_position = (p * (log_p - log_q)).sum(dim=-1)
    kl = kl_per_position[support].mean()

    safe_labels = labels.masked_fill(~support, 0)
    nll = -log_q.gather(-1, safe_labels.unsqueeze(-1)).squeeze(-1)
    ce = nll[support].mean()

    value = lambda_kl * kl + lambda_ce * ce

    q = log_q.detach().exp()
    onehot = F.one_hot(safe_labels, vocab).to(q.dtype)
    grad = lambda_kl * (q - p) + lambda_ce * (q - onehot)
    grad = grad * support.unsqueeze(-1).to(q.dtype) / n_support

    return LossValue(value=value, grad=grad, parts={"kl": float(kl.detach()), "ce": float(ce.detach())})


def topk_mask_weights(
    density: DensityMap,
    k_percent: float,
    boost: float = CONTROL_BOOST,
    mode: str = "density",
    seed: Optional[Union[int, Sequence[int]]] = None,
    text_count: int = 0,
) -> WeightVector:
    """
    Binary-mask weights: ⌈k%·T⌉ visual positions get ``boost``, the rest 1.

    ``density`` mode picks the highest ρ (lower index first on ties),
    ``random`` mode draws the same number of positions from ``seed``. Text
    positions appended after the visual ones keep weight 1. There is no
    renormalization.
    """
    if not 0 <= k_percent <= 100:
        raise InvalidSelection(f"k_percent must be in [0, 100], got {k_percent}")
    if boost <= 0:
        raise InvalidSelection(f"boost must be positive, got {boost}")

    rho = density.flat_rho()
    n_visual = rho.size
    # round() guards against 0.1 * 30 = 3.0000000000000004
    count = math.ceil(round(k_percent * n_visual / 100.0, 9))

    if mode == "density":
        order = np.lexsort((np.arange(n_visual), -rho))
        selected = order[:count]
    elif mode == "random":
        if seed is None:
            raise InvalidSelection("random mode needs a seed")
        selected = np.random.default_rng(seed).choice(n_visual, size=count, replace=False)
    else:
        raise InvalidSelection(f"unknown selection mode {mode!r}")

    weights = np.ones(n_visual + text_count, dtype=np.float64)
    weights[selected] = boost
    return WeightVector(
        weights=weights,
        visual_count=n_visual,
        text_count=text_count,
        extra={"mode": mode, "k_percent": k_percent, "selected": np.sort(selected)},
    )
