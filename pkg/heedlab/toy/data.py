"""
Density-weighted residual alignment laboratory.

Synthetic dense-recall corpus.

Every image is a smooth background drawn around one of a few background
directions, with ``n_glyphs`` glyph patches drawn from directions keyed to
glyph token ids. Two task families share the same images:

- dense: the prompt asks for the glyphs, the answer lists their token ids in
  ascending order (a function of the glyph patches only);
- smooth: the prompt asks for the background, the answer repeats its class
  token (global, low-density evidence).
"""
import logging
from dataclasses import dataclass
from typing import Iterator, List, Sequence, Tuple

import numpy as np
import torch

from ..constants import IGNORE_INDEX
from ..density import DensityMap, PatchGrid, normalize_density, patch_density
from ..exceptions import ModelError
from .model import ToyConfig

__all__ = (
    "Batch",
    "SynthSample",
    "Vocabulary",
    "batches",
    "collate",
    "glyph_separation_rate",
    "synth_dataset",
    "visual_density",
)

log = logging.getLogger(__name__)

DENSE = "dense"
SMOOTH = "smooth"
TASKS = (DENSE, SMOOTH)

# Feature geometry
N_GLYPH_CLASSES = 8
N_BACKGROUND_CLASSES = 8
TEXTURE_SCALE = 0.15
NOISE_SCALE = 0.02
GLYPH_SPACING = 2  # Chebyshev distance between glyphs
PLACEMENT_ATTEMPTS = 1000
MIN_SEPARATION = 0.99  # share of images whose glyphs outrank every background patch


@dataclass(frozen=True)
class Vocabulary:
    """Token id layout; everything from ``filler`` to the end of the vocabulary is prompt filler."""

    pad: int = 0
    ask_dense: int = 1
    ask_smooth: int = 2
    glyph: int = 8
    background: int = 8 + N_GLYPH_CLASSES
    filler: int = 8 + N_GLYPH_CLASSES + N_BACKGROUND_CLASSES

    def check(self, config: ToyConfig) -> None:
        if config.vocab <= self.filler:
            raise ModelError(f"vocab={config.vocab} leaves no room for filler tokens (needs > {self.filler})")
        if config.feature_dim < N_GLYPH_CLASSES + N_BACKGROUND_CLASSES + 2:
            raise ModelError(f"feature_dim={config.feature_dim} is too small for the synthetic directions")
        if config.n_glyphs > N_GLYPH_CLASSES:
            raise ModelError(f"at most {N_GLYPH_CLASSES} glyphs per image")


VOCAB = Vocabulary()


@dataclass(frozen=True)
class SynthSample:
    sample_id: int
    task: str
    grid: PatchGrid
    glyph_positions: Tuple[int, ...]
    glyph_token_ids: Tuple[int, ...]
    background_token_id: int
    prompt_ids: Tuple[int, ...]
    answer_ids: Tuple[int, ...]
    labels: np.ndarray

    @property
    def tokens(self) -> np.ndarray:
        return np.array(self.prompt_ids + self.answer_ids, dtype=np.int64)

    @property
    def text_count(self) -> int:
        return len(self.prompt_ids) + len(self.answer_ids)


@dataclass
class Batch:
    features: torch.Tensor
    tokens: torch.Tensor
    labels: torch.Tensor
    sample_ids: Tuple[int, ...]
    tasks: Tuple[str, ...]

    def __len__(self) -> int:
        return len(self.sample_ids)

    @property
    def n_tokens(self) -> int:
        return int(self.labels.numel())


def feature_basis(config: ToyConfig) -> np.ndarray:
    """Orthonormal directions shared by the whole corpus, like a fixed vision tower."""
    rng = np.random.default_rng([config.seed, 0xF00D])
    q, _ = np.linalg.qr(rng.standard_normal((config.feature_dim, config.feature_dim)))
    return q.T


def _glyph_positions(rng: np.random.Generator, config: ToyConfig) -> Tuple[int, ...]:
    height, width = config.grid_height, config.grid_width
    for _ in range(PLACEMENT_ATTEMPTS):
        picks = rng.choice(height * width, size=config.n_glyphs, replace=False)
        cells = [divmod(int(p), width) for p in picks]
        if all(
            max(abs(a[0] - b[0]), abs(a[1] - b[1])) >= GLYPH_SPACING
            for i, a in enumerate(cells)
            for b in cells[i + 1 :]
        ):
            return tuple(sorted(int(p) for p in picks))
    raise ModelError(
        f"cannot place {config.n_glyphs} glyphs {GLYPH_SPACING} cells apart on a {height}x{width} grid"
        f" after {PLACEMENT_ATTEMPTS} attempts"
    )


def _sample(config: ToyConfig, basis: np.ndarray, rng: np.random.Generator, sample_id: int, task: str) -> SynthSample:
    height, width, dim = config.grid_height, config.grid_width, config.feature_dim
    glyph_dirs = basis[:N_GLYPH_CLASSES]
    background_dirs = basis[N_GLYPH_CLASSES : N_GLYPH_CLASSES + N_BACKGROUND_CLASSES]
    texture_dirs = basis[N_GLYPH_CLASSES + N_BACKGROUND_CLASSES :]

    background = int(rng.integers(N_BACKGROUND_CLASSES))
    pair = rng.choice(len(texture_dirs), size=2, replace=False)
    rows = np.linspace(-1.0, 1.0, height)[:, None, None]
    cols = np.linspace(-1.0, 1.0, width)[None, :, None]
    features = (
        background_dirs[background]
        + TEXTURE_SCALE * (rows * texture_dirs[pair[0]] + cols * texture_dirs[pair[1]])
        + NOISE_SCALE * rng.standard_normal((height, width, dim))
    )

    positions = _glyph_positions(rng, config)
    classes = rng.choice(N_GLYPH_CLASSES, size=config.n_glyphs, replace=False)
    for position, glyph in zip(positions, classes):
        row, col = divmod(position, width)
        features[row, col] = glyph_dirs[glyph] + NOISE_SCALE * rng.standard_normal(dim)

    glyph_tokens = tuple(VOCAB.glyph + int(glyph) for glyph in classes)
    background_token = VOCAB.background + background
    if task == DENSE:
        ask = VOCAB.ask_dense
        answer = tuple(sorted(glyph_tokens))
        answer = (answer * config.answer_len)[: config.answer_len]
    else:
        ask = VOCAB.ask_smooth
        answer = (background_token,) * config.answer_len

    filler = rng.integers(VOCAB.filler, config.vocab, size=config.text_len - 1)
    prompt = (ask,) + tuple(int(token) for token in filler)

    labels = np.full(config.seq_len, IGNORE_INDEX, dtype=np.int64)
    first_answer = config.n_visual + config.text_len
    for j, token in enumerate(answer):
        labels[first_answer - 1 + j] = token

    return SynthSample(
        sample_id=sample_id,
        task=task,
        grid=PatchGrid(features),
        glyph_positions=positions,
        glyph_token_ids=glyph_tokens,
        background_token_id=background_token,
        prompt_ids=prompt,
        answer_ids=answer,
        labels=labels,
    )


def synth_dataset(
    config: ToyConfig, n_samples: int, seed: int, tasks: Sequence[str] = TASKS
) -> List[SynthSample]:
    """Samples cycle through ``tasks``; ids are (seed << 32) | index so splits never collide."""
    VOCAB.check(config)
    for task in tasks:
        if task not in TASKS:
            raise ModelError(f"unknown task {task!r}")

    basis = feature_basis(config)
    rng = np.random.default_rng(seed)
    samples = [
        _sample(config, basis, rng, (seed << 32) | index, tasks[index % len(tasks)]) for index in range(n_samples)
    ]
    rate = glyph_separation_rate(samples)
    log.debug("synthesized %d samples (seed=%d), glyph separation %.3f", n_samples, seed, rate)
    if rate < MIN_SEPARATION:
        log.warning(
            "glyphs are the densest patches in only %.1f%% of %d samples (seed=%d)", 100 * rate, n_samples, seed
        )
    return samples


def glyph_separation_rate(samples: Sequence[SynthSample]) -> float:
    """Fraction of samples whose every glyph patch is denser than every background patch."""
    if not samples:
        return 1.0
    separated = 0
    for sample in samples:
        rho = patch_density(sample.grid).flat_rho()
        glyph = np.zeros(rho.size, dtype=bool)
        glyph[list(sample.glyph_positions)] = True
        separated += bool(rho[glyph].min() > rho[~glyph].max())
    return separated / len(samples)


def collate(samples: Sequence[SynthSample]) -> Batch:
    return Batch(
        features=torch.from_numpy(np.stack([s.grid.features for s in samples])).to(torch.float64),
        tokens=torch.from_numpy(np.stack([s.tokens for s in samples])),
        labels=torch.from_numpy(np.stack([s.labels for s in samples])),
        sample_ids=tuple(s.sample_id for s in samples),
        tasks=tuple(s.task for s in samples),
    )


def batches(samples: Sequence[SynthSample], batch_size: int, seed: int) -> Iterator[Batch]:
    """Endless stream of full batches, reshuffled every epoch from ``seed``."""
    if not samples:
        raise ModelError("empty dataset")
    batch_size = min(batch_size, len(samples))
    rng = np.random.default_rng(seed)
    while True:
        order = rng.permutation(len(samples))
        for start in range(0, len(order) - batch_size + 1, batch_size):
            yield collate([samples[i] for i in order[start : start + batch_size]])


def visual_density(sample: SynthSample) -> DensityMap:
    return normalize_density(patch_density(sample.grid))
