"""
Density-weighted residual alignment laboratory.

Training: the teacher (plain next-token CE until it passes the competence
gate) and the three-stage distillation of a hybrid student.

    Stage 1  warm-up      alignment loss, only W_G, W_gamma, A and W_conv train
    Stage 2  full block   alignment loss, every mixer parameter trains
    Stage 3  end-to-end   logit KD + CE, every mixer parameter trains

The condition picks the Stage 1/2 alignment loss; Stage 3 is the same for
all of them, and C1 spends the whole budget on it.
"""
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch.optim import AdamW
from torch.optim.lr_scheduler import LambdaLR

from ..cache import CacheFile
from ..constants import (
    ADAM_BETAS,
    ADAM_EPS,
    BETA,
    COMPETENCE_GATE,
    COMPETENCE_SAMPLES,
    CONDITIONS,
    COSINE_FLOOR,
    IGNORE_INDEX,
    LAMBDA_CE,
    LAMBDA_KL,
    PEAK_LR,
    STAGE_FRACTIONS,
    TAU,
    TEACHER_EVAL_EVERY,
    TEACHER_LR,
    TEACHER_MAX_STEPS,
    WARMUP_FRACTION,
    WEIGHT_DECAY,
)
from ..density import WeightVector, density_weights, sequence_weights
from ..exceptions import CompetenceError, DistillError
from ..fisher import grad_weight, position_sensitivity
from ..losses import LossValue, ResidualTrace, heed_loss, hsa_loss, kd_loss, rsa_loss
from ..utils import metrics, sizeof_fmt
from .data import TASKS, Batch, SynthSample, batches, collate, synth_dataset
from .model import ToyConfig, ToyModel, build_teacher, exact_match, forward_with_residuals, parameter_digest

__all__ = (
    "DistillResult",
    "StageBudget",
    "StepLog",
    "TrainParams",
    "accuracy",
    "distill",
    "make_optimizer",
    "resolve_weights",
    "train_teacher",
    "warmup_cosine",
)

log = logging.getLogger(__name__)

WeightFn = Callable[[SynthSample], WeightVector]


@dataclass(frozen=True)
class StageBudget:
    total_tokens: int
    fractions: Tuple[float, float, float] = STAGE_FRACTIONS

    def __post_init__(self) -> None:
        object.__setattr__(self, "fractions", tuple(float(f) for f in self.fractions))
        if self.total_tokens < 1:
            raise DistillError(f"token budget must be positive, got {self.total_tokens}")
        if len(self.fractions) != 3 or any(f < 0 for f in self.fractions):
            raise DistillError(f"three non-negative stage fractions expected, got {self.fractions}")
        if abs(sum(self.fractions) - 1.0) > 1e-9:
            raise DistillError(f"stage fractions must sum to 1, got {sum(self.fractions)}")

    def stage_steps(self, tokens_per_batch: int, condition: str = "C4") -> Tuple[int, int, int]:
        """Whole batches per stage, floored; C1 puts the entire budget into stage 3."""
        if condition == "C1":
            return 0, 0, self.total_tokens // tokens_per_batch
        return tuple(int(self.total_tokens * fraction) // tokens_per_batch for fraction in self.fractions)

    def to_dict(self) -> dict:
        return {"total_tokens": self.total_tokens, "fractions": list(self.fractions)}

    @classmethod
    def from_dict(cls, data: dict) -> "StageBudget":
        return cls(total_tokens=int(data["total_tokens"]), fractions=tuple(data.get("fractions", STAGE_FRACTIONS)))


@dataclass(frozen=True)
class TrainParams:
    batch_size: int = 16
    peak_lr: float = PEAK_LR
    betas: Tuple[float, float] = ADAM_BETAS
    eps: float = ADAM_EPS
    weight_decay: float = WEIGHT_DECAY
    warmup_fraction: float = WARMUP_FRACTION
    cosine_floor: float = COSINE_FLOOR
    lambda_kl: float = LAMBDA_KL
    lambda_ce: float = LAMBDA_CE
    teacher_lr: float = TEACHER_LR
    teacher_max_steps: int = TEACHER_MAX_STEPS
    teacher_eval_every: int = TEACHER_EVAL_EVERY
    competence_gate: float = COMPETENCE_GATE
    competence_samples: int = COMPETENCE_SAMPLES

    def __post_init__(self) -> None:
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))

    def to_dict(self) -> dict:
        data = asdict(self)
        data["betas"] = list(self.betas)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "TrainParams":
        return cls(**data)


@dataclass(frozen=True)
class StepLog:
    stage: int
    step: int
    loss: float
    tokens: int
    parts: Dict[str, float] = field(default_factory=dict)


@dataclass
class DistillResult:
    student: ToyModel
    logs: List[StepLog]
    stage_tokens: Dict[int, int]
    frozen_digest: str


#
# Optimizer
#


def make_optimizer(named_params: Sequence[Tuple[str, torch.nn.Parameter]], params: TrainParams, lr: float) -> AdamW:
    """Decoupled weight decay on matrices and kernels only, never on vectors."""
    decay = [p for _, p in named_params if p.dim() >= 2]
    no_decay = [p for _, p in named_params if p.dim() < 2]
    groups = [
        {"params": decay, "weight_decay": params.weight_decay},
        {"params": no_decay, "weight_decay": 0.0},
    ]
    return AdamW([g for g in groups if g["params"]], lr=lr, betas=params.betas, eps=params.eps)


def warmup_cosine(total_steps: int, warmup_fraction: float = WARMUP_FRACTION, floor: float = COSINE_FLOOR):
    """LR multiplier: linear warm-up, then cosine decay down to ``floor`` of the peak."""
    warmup = max(1, math.ceil(warmup_fraction * total_steps))

    def factor(step: int) -> float:
        if step < warmup:
            return (step + 1) / warmup
        progress = min(1.0, (step - warmup) / max(1, total_steps - warmup))
        return floor + (1.0 - floor) * 0.5 * (1.0 + math.cos(math.pi * progress))

    return factor


#
# Teacher
#


@torch.no_grad()
def accuracy(model: ToyModel, samples: Sequence[SynthSample], batch_size: int = 128) -> Dict[str, float]:
    """Exact-match answer accuracy per task family, plus over all samples."""
    hits: Dict[str, List[bool]] = {task: [] for task in TASKS}
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        matched = exact_match(model, collate(chunk)).tolist()
        for sample, hit in zip(chunk, matched):
            hits[sample.task].append(hit)
    result = {task: float(np.mean(values)) for task, values in hits.items() if values}
    result["all"] = float(np.mean([hit for values in hits.values() for hit in values])) if samples else 0.0
    return result


def train_teacher(
    config: ToyConfig,
    train: Sequence[SynthSample],
    held_out: Sequence[SynthSample],
    params: TrainParams = TrainParams(),
    seed: int = 0,
) -> Tuple[ToyModel, Dict[str, float]]:
    """Next-token CE on the answers until held-out accuracy passes the competence gate."""
    teacher = build_teacher(config)
    trainable = [(name, p) for name, p in teacher.named_parameters() if p.requires_grad]
    optimizer = make_optimizer(trainable, params, params.teacher_lr)
    stream = batches(train, params.batch_size, seed)

    score: Dict[str, float] = {"all": 0.0}
    for step in range(1, params.teacher_max_steps + 1):
        batch = next(stream)
        logits = teacher(batch.features, batch.tokens).logits
        loss = F.cross_entropy(logits.flatten(0, 1), batch.labels.flatten(), ignore_index=IGNORE_INDEX)
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()

        if step % params.teacher_eval_every == 0 or step == params.teacher_max_steps:
            score = accuracy(teacher, held_out)
            log.info("teacher step %d: loss %.4f, held-out accuracy %s", step, float(loss), score)
            if score["all"] >= params.competence_gate:
                break

    if score["all"] < params.competence_gate:
        raise CompetenceError(
            f"teacher reached {score['all']:.3f} held-out accuracy, the gate is {params.competence_gate:.2f}"
        )
    for param in teacher.parameters():
        param.requires_grad_(False)
    teacher.eval()
    return teacher, score


def prepare_teacher(
    config: ToyConfig, params: TrainParams = TrainParams(), train_size: int = 4096, seed: int = 0
) -> Tuple[ToyModel, Dict[str, float]]:
    """Synthesize the teacher's own training split and a held-out competence split, then train."""
    train = synth_dataset(config, train_size, seed=(seed << 4) | 0xA)
    held_out = synth_dataset(config, params.competence_samples, seed=(seed << 4) | 0xB)
    return train_teacher(config, train, held_out, params=params, seed=seed)


#
# Alignment weights
#


def resolve_weights(
    condition: str,
    samples: Sequence[SynthSample],
    teacher: Optional[ToyModel] = None,
    cache: Optional[CacheFile] = None,
    weight_fn: Optional[WeightFn] = None,
    tau: float = TAU,
    beta: float = BETA,
) -> Dict[int, np.ndarray]:
    """
    Per-sample alignment weights of the Stage 1/2 loss, computed once before
    training. Empty for the unweighted conditions.

    C4 reads density maps from ``cache`` when it holds the sample and falls
    back to computing them; C5 does the same with the gradient weights.
    ``weight_fn`` overrides both (binary-mask control arms).
    """
    if condition not in CONDITIONS:
        raise DistillError(f"unknown condition {condition!r}")
    if weight_fn is not None:
        if condition != "C3":
            raise DistillError(f"explicit alignment weights only replace the uniform loss of C3, not {condition}")
        return {sample.sample_id: weight_fn(sample).weights for sample in samples}
    if cache is not None and condition not in ("C4", "C5"):
        raise DistillError(f"{condition} has no use for a weight cache")
    if condition not in ("C4", "C5"):
        return {}

    density_maps = cache.density_maps() if cache is not None else {}
    grad_cached = cache.grad_weights() if cache is not None else {}
    weights = {}
    for sample in samples:
        n_visual = sample.grid.n_patches
        if condition == "C4":
            density = density_maps.get(sample.sample_id)
            if density is None:
                vector = density_weights(sample.grid, sample.text_count, tau=tau, beta=beta)
            elif density.visual_count != n_visual:
                raise DistillError(
                    f"cache holds {density.visual_count} positions for sample {sample.sample_id}, expected {n_visual}"
                )
            else:
                vector = sequence_weights(density, sample.text_count, tau=tau, beta=beta)
            weights[sample.sample_id] = vector.weights
        else:
            cached = grad_cached.get(sample.sample_id)
            T = n_visual + sample.text_count
            if cached is None:
                if teacher is None:
                    raise DistillError("C5 needs the teacher to compute gradient weights")
                cached = grad_weight(position_sensitivity(teacher, sample), T, n_visual).weights
            elif cached.size != T:
                raise DistillError(
                    f"cache holds {cached.size} gradient weights for sample {sample.sample_id}, expected {T}"
                )
            weights[sample.sample_id] = cached
    return weights


#
# Distillation
#


def _teacher_trace(teacher: ToyModel, batch: Batch) -> ResidualTrace:
    with torch.no_grad():
        return forward_with_residuals(teacher, batch)


def _stage_loss(
    stage: int,
    condition: str,
    student_trace: ResidualTrace,
    teacher_trace: ResidualTrace,
    batch: Batch,
    weights: Dict[int, np.ndarray],
    params: TrainParams,
) -> LossValue:
    if stage == 3:
        return kd_loss(student_trace.logits, teacher_trace.logits, batch.labels, params.lambda_kl, params.lambda_ce)
    if condition == "C2":
        return hsa_loss(student_trace.block_outputs, teacher_trace.block_outputs)
    if weights:
        w = np.stack([weights[sample_id] for sample_id in batch.sample_ids])
        return heed_loss(student_trace, teacher_trace, w)
    return rsa_loss(student_trace, teacher_trace)


def _run_stage(
    stage: int,
    steps: int,
    condition: str,
    teacher: ToyModel,
    student: ToyModel,
    stream: Iterator[Batch],
    weights: Dict[int, np.ndarray],
    params: TrainParams,
    logs: List[StepLog],
    tokens: int,
) -> int:
    named = student.stage1_parameters() if stage == 1 else student.mixer_parameters()
    student.train_only([name for name, _ in named])
    optimizer = make_optimizer(named, params, params.peak_lr)
    scheduler = LambdaLR(optimizer, warmup_cosine(steps, params.warmup_fraction, params.cosine_floor))

    for step in range(steps):
        batch = next(stream)
        teacher_trace = _teacher_trace(teacher, batch)
        student_trace = forward_with_residuals(student, batch)
        loss = _stage_loss(stage, condition, student_trace, teacher_trace, batch, weights, params)

        optimizer.zero_grad(set_to_none=True)
        loss.value.backward()
        optimizer.step()
        scheduler.step()

        tokens += batch.n_tokens
        logs.append(StepLog(stage=stage, step=step, loss=loss.item(), tokens=tokens, parts=dict(loss.parts)))
        log.debug("stage %d step %d: loss %.6g", stage, step, loss.item())
    return tokens


def distill(
    teacher: ToyModel,
    student: ToyModel,
    samples: Sequence[SynthSample],
    condition: str,
    budget: StageBudget,
    params: TrainParams = TrainParams(),
    seed: int = 0,
    cache: Optional[CacheFile] = None,
    weight_fn: Optional[WeightFn] = None,
    tau: float = TAU,
    beta: float = BETA,
) -> DistillResult:
    """Train ``student`` in place; the teacher and every non-mixer parameter stay untouched."""
    if not samples:
        raise DistillError("empty distillation dataset")
    if not student.mixer_prefixes():
        raise DistillError("the student has no mixer block to train")

    teacher.eval()
    weights = resolve_weights(condition, samples, teacher, cache, weight_fn, tau=tau, beta=beta)
    frozen_before = parameter_digest(student.frozen_parameters())

    batch_size = min(params.batch_size, len(samples))
    tokens_per_batch = batch_size * teacher.config.seq_len
    steps = budget.stage_steps(tokens_per_batch, condition)
    stream = batches(samples, batch_size, seed)

    logs: List[StepLog] = []
    stage_tokens: Dict[int, int] = {}
    tokens = 0
    for stage, stage_steps in zip((1, 2, 3), steps):
        if not stage_steps:
            continue
        started = tokens
        tokens = _run_stage(stage, stage_steps, condition, teacher, student, stream, weights, params, logs, tokens)
        stage_tokens[stage] = tokens - started
        usage = metrics()
        log.info(
            "%s stage %d: %d steps, %d tokens, last loss %.6g, rss %s",
            condition,
            stage,
            stage_steps,
            stage_tokens[stage],
            logs[-1].loss,
            sizeof_fmt(usage["rss"]),
        )

    student.train_only([name for name, _ in student.mixer_parameters()])
    frozen_after = parameter_digest(student.frozen_parameters())
    if frozen_after != frozen_before:
        raise DistillError("a frozen parameter changed during distillation")
    return DistillResult(student=student, logs=logs, stage_tokens=stage_tokens, frozen_digest=frozen_after)
