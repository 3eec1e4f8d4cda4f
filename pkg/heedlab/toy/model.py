"""
Density-weighted residual alignment laboratory.

Tiny pre-norm causal decoders.

The teacher stacks attention blocks. The student is the same decoder with
three of every four attention blocks replaced by a gated linear-recurrence
mixer that inherits W_Q, W_K, W_V and W_O from the attention block it
replaces. The mixer is a small stand-in for a Mamba-2 block::

    u_t = x_t + conv(x)_t                      (depthwise causal, width 4)
    a_t = σ(W_γ x_t + A)                       (one decay per head)
    S_t = a_t S_{t-1} + v_t k_tᵀ
    o_t = (S_t q_t) ⊙ σ(W_G x_t)

with q, k, v projected from u and q scaled by 1/√d_head like attention.
All arithmetic is float64.
"""
import copy
import hashlib
import json
import logging
import math
import struct
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import TYPE_CHECKING, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import torch
import torch.nn.functional as F
from torch import nn

from ..constants import CONV_WIDTH, IGNORE_INDEX, INIT_DECAY, INIT_STD
from ..exceptions import ModelError, RatioError, SequenceTooLong
from ..losses import ResidualTrace

if TYPE_CHECKING:
    from .data import Batch  # noqa

__all__ = (
    "ForwardOutput",
    "ToyConfig",
    "ToyModel",
    "answer_log_prob",
    "build_teacher",
    "exact_match",
    "forward_with_residuals",
    "hybridize",
    "load_checkpoint",
    "parameter_digest",
    "save_checkpoint",
)

log = logging.getLogger(__name__)

ATTENTION = "attention"
MIXER = "mixer"

# Mixer parameters trained during the warm-up stage
STAGE1_NAMES = ("W_G", "W_gamma", "A", "W_conv")

CHECKPOINT_MAGIC = b"HEEDCKPT"
CHECKPOINT_VERSION = 1
CHECKPOINT_HEADER = struct.Struct("<8sII")


@dataclass(frozen=True)
class ToyConfig:
    n_layers: int = 4
    d_model: int = 32
    n_heads: int = 2
    vocab: int = 64
    grid_height: int = 6
    grid_width: int = 6
    text_len: int = 8
    mixer_ratio: float = 0.75
    seed: int = 0
    feature_dim: int = 24
    d_ff: int = 64
    n_glyphs: int = 2
    answer_len: int = 2

    def __post_init__(self) -> None:
        if self.n_layers < 1 or self.d_model < 1 or self.n_heads < 1:
            raise ModelError("n_layers, d_model and n_heads must be positive")
        if self.d_model % self.n_heads:
            raise ModelError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if not 0.0 <= self.mixer_ratio <= 1.0:
            raise ModelError(f"mixer_ratio must be in [0, 1], got {self.mixer_ratio}")
        if self.text_len < 1 or self.answer_len < 1:
            raise ModelError("text_len and answer_len must be positive")

    @property
    def n_visual(self) -> int:
        return self.grid_height * self.grid_width

    @property
    def n_text(self) -> int:
        """Prompt and answer tokens; the answer is fed back for teacher forcing."""
        return self.text_len + self.answer_len

    @property
    def seq_len(self) -> int:
        return self.n_visual + self.n_text

    def mixer_layers(self) -> Tuple[int, ...]:
        """
        Layers replaced by mixers: in every group of ``den`` layers the first
        ``num`` are replaced, where num/den = mixer_ratio (3/4: layers 0, 1, 2).
        """
        count = self.n_layers * self.mixer_ratio
        if abs(count - round(count)) > 1e-9:
            raise RatioError(f"mixer_ratio={self.mixer_ratio} does not divide n_layers={self.n_layers}")
        ratio = Fraction(self.mixer_ratio).limit_denominator(self.n_layers)
        if self.n_layers % ratio.denominator:
            raise RatioError(f"mixer_ratio={self.mixer_ratio} does not tile n_layers={self.n_layers}")
        return tuple(i for i in range(self.n_layers) if i % ratio.denominator < ratio.numerator)

    def alignment_layers(self) -> Tuple[int, ...]:
        """Residual snapshots read right after each replaced layer: {ℓ + 1 : ℓ replaced}."""
        return tuple(layer + 1 for layer in self.mixer_layers())

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ToyConfig":
        return cls(**data)


@contextmanager
def seeded(seed: int) -> Iterator[None]:
    """Seed torch for a block of code without leaking into the caller's RNG state."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        yield


class Attention(nn.Module):
    def __init__(self, config: ToyConfig) -> None:
        super().__init__()
        d = config.d_model
        self.n_heads = config.n_heads
        self.W_Q = nn.Linear(d, d, bias=False)
        self.W_K = nn.Linear(d, d, bias=False)
        self.W_V = nn.Linear(d, d, bias=False)
        self.W_O = nn.Linear(d, d, bias=False)

    def forward(
        self, x: torch.Tensor, key_mask: Optional[torch.Tensor] = None
    ) -> Tuple[torch.Tensor, torch.Tensor]:
        batch, T, d = x.shape
        heads, d_head = self.n_heads, d // self.n_heads

        q = self.W_Q(x).view(batch, T, heads, d_head).transpose(1, 2)
        k = self.W_K(x).view(batch, T, heads, d_head).transpose(1, 2)
        v = self.W_V(x).view(batch, T, heads, d_head).transpose(1, 2)

        allowed = torch.ones(T, T, dtype=torch.bool, device=x.device).tril()[None, None]
        if key_mask is not None:
            allowed = allowed & key_mask[:, None, None, :]
        scores = (q @ k.transpose(-1, -2)) / math.sqrt(d_head)
        probs = torch.softmax(scores.masked_fill(~allowed, float("-inf")), dim=-1)
        # A query with every key hidden reads nothing
        probs = probs.masked_fill(~allowed.any(dim=-1, keepdim=True), 0.0)

        out = (probs @ v).transpose(1, 2).reshape(batch, T, d)
        return self.W_O(out), probs


class Mixer(nn.Module):
    def __init__(self, config: ToyConfig) -> None:
        super().__init__()
        d = config.d_model
        self.n_heads = config.n_heads
        self.W_Q = nn.Linear(d, d, bias=False)
        self.W_K = nn.Linear(d, d, bias=False)
        self.W_V = nn.Linear(d, d, bias=False)
        self.W_O = nn.Linear(d, d, bias=False)
        self.W_G = nn.Linear(d, d, bias=False)
        self.W_gamma = nn.Linear(d, config.n_heads, bias=False)
        self.A = nn.Parameter(torch.full((config.n_heads,), math.log(INIT_DECAY / (1.0 - INIT_DECAY))))
        self.W_conv = nn.Parameter(torch.empty(d, 1, CONV_WIDTH))
        for tensor in (self.W_G.weight, self.W_gamma.weight, self.W_conv):
            nn.init.trunc_normal_(tensor, std=INIT_STD, a=-2 * INIT_STD, b=2 * INIT_STD)

    def causal_conv(self, x: torch.Tensor) -> torch.Tensor:
        width = self.W_conv.shape[-1]
        padded = F.pad(x.transpose(1, 2), (width - 1, 0))
        return F.conv1d(padded, self.W_conv, groups=x.shape[-1]).transpose(1, 2)

    def forward(self, x: torch.Tensor, key_mask: Optional[torch.Tensor] = None) -> Tuple[torch.Tensor, None]:
        batch, T, d = x.shape
        heads, d_head = self.n_heads, d // self.n_heads

        u = x + self.causal_conv(x)
        q = self.W_Q(u).view(batch, T, heads, d_head) / math.sqrt(d_head)
        k = self.W_K(u).view(batch, T, heads, d_head)
        v = self.W_V(u).view(batch, T, heads, d_head)
        decay = torch.sigmoid(self.W_gamma(x) + self.A)
        gate = torch.sigmoid(self.W_G(x))

        state = x.new_zeros(batch, heads, d_head, d_head)
        outputs = []
        for t in range(T):
            state = decay[:, t, :, None, None] * state + v[:, t, :, :, None] * k[:, t, :, None, :]
            outputs.append(torch.einsum("bhij,bhj->bhi", state, q[:, t]))
        out = torch.stack(outputs, dim=1).reshape(batch, T, d) * gate
        return self.W_O(out), None


class MLP(nn.Module):
    def __init__(self, config: ToyConfig) -> None:
        super().__init__()
        self.fc_in = nn.Linear(config.d_model, config.d_ff)
        self.fc_out = nn.Linear(config.d_ff, config.d_model)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc_out(F.gelu(self.fc_in(x)))


class Block(nn.Module):
    def __init__(self, config: ToyConfig, kind: str = ATTENTION) -> None:
        super().__init__()
        self.kind = kind
        self.norm_mix = nn.RMSNorm(config.d_model)
        self.mix: nn.Module = Attention(config) if kind == ATTENTION else Mixer(config)
        self.norm_mlp = nn.RMSNorm(config.d_model)
        self.mlp = MLP(config)

    def forward(
        self, x: torch.Tensor, key_mask: Optional[torch.Tensor] = None
    ) -> Tuple[torch.Tensor, torch.Tensor, Optional[torch.Tensor]]:
        mixed, probs = self.mix(self.norm_mix(x), key_mask)
        x = x + mixed
        x = x + self.mlp(self.norm_mlp(x))
        return x, mixed, probs


@dataclass
class ForwardOutput:
    """``hiddens[s]`` is the residual stream after block s - 1; ``hiddens[0]`` is the input."""

    logits: torch.Tensor
    hiddens: List[torch.Tensor]
    block_outputs: List[torch.Tensor]
    attention: List[Optional[torch.Tensor]] = field(default_factory=list)


class ToyModel(nn.Module):
    def __init__(self, config: ToyConfig, kinds: Optional[Sequence[str]] = None) -> None:
        super().__init__()
        self.config = config
        kinds = tuple(kinds or (ATTENTION,) * config.n_layers)
        if len(kinds) != config.n_layers:
            raise ModelError(f"{len(kinds)} block kinds for {config.n_layers} layers")

        with seeded(config.seed):
            # Stand-in for the frozen vision tower's projector
            self.patch_projector = nn.Linear(config.feature_dim, config.d_model, bias=False)
            nn.init.orthogonal_(self.patch_projector.weight)
            self.patch_projector.weight.requires_grad_(False)

            self.embedding = nn.Embedding(config.vocab, config.d_model)
            self.pos_embedding = nn.Parameter(torch.randn(config.seq_len, config.d_model) * INIT_STD)
            self.blocks = nn.ModuleList(Block(config, kind) for kind in kinds)
            self.norm_f = nn.RMSNorm(config.d_model)
            self.head = nn.Linear(config.d_model, config.vocab, bias=False)

        self.to(torch.float64)

    @property
    def kinds(self) -> Tuple[str, ...]:
        return tuple(block.kind for block in self.blocks)

    def forward(
        self,
        features: torch.Tensor,
        tokens: torch.Tensor,
        key_mask: Optional[torch.Tensor] = None,
        residual_offsets: Optional[Dict[int, torch.Tensor]] = None,
    ) -> ForwardOutput:
        """
        Visual prefix (projected patch features, raster order) then text tokens.

        ``key_mask`` (batch, T) hides False positions from every attention map.
        ``residual_offsets`` adds a perturbation to the snapshot ``hiddens[s]``
        before later blocks read it.
        """
        batch = features.shape[0]
        visual = self.patch_projector(features.reshape(batch, -1, features.shape[-1]))
        x = torch.cat([visual, self.embedding(tokens)], dim=1)
        T = x.shape[1]
        if T > self.config.seq_len:
            raise SequenceTooLong(f"sequence of {T} positions exceeds the configured {self.config.seq_len}")
        x = x + self.pos_embedding[:T]

        hiddens, block_outputs, attention = [x], [], []
        for index, block in enumerate(self.blocks):
            x, mixed, probs = block(x, key_mask)
            if residual_offsets and index + 1 in residual_offsets:
                x = x + residual_offsets[index + 1]
            hiddens.append(x)
            block_outputs.append(mixed)
            attention.append(probs)

        logits = self.head(self.norm_f(x))
        return ForwardOutput(logits=logits, hiddens=hiddens, block_outputs=block_outputs, attention=attention)

    #
    # Parameter groups
    #

    def mixer_prefixes(self) -> Tuple[str, ...]:
        return tuple(f"blocks.{i}.mix." for i, kind in enumerate(self.kinds) if kind == MIXER)

    def _is_mixer(self, name: str) -> bool:
        return name.startswith(self.mixer_prefixes())

    def stage1_parameters(self) -> List[Tuple[str, nn.Parameter]]:
        """Fresh mixer parameters, the only ones the warm-up stage trains."""
        return [
            (name, param)
            for name, param in self.named_parameters()
            if self._is_mixer(name) and name.split(".")[3] in STAGE1_NAMES
        ]

    def mixer_parameters(self) -> List[Tuple[str, nn.Parameter]]:
        return [(name, param) for name, param in self.named_parameters() if self._is_mixer(name)]

    def frozen_parameters(self) -> List[Tuple[str, nn.Parameter]]:
        return [(name, param) for name, param in self.named_parameters() if not self._is_mixer(name)]

    def train_only(self, names: Sequence[str]) -> None:
        """Leave requires_grad on for the given parameter names only."""
        wanted = set(names)
        for name, param in self.named_parameters():
            param.requires_grad_(name in wanted)


def build_teacher(config: ToyConfig) -> ToyModel:
    """Untrained all-attention teacher; training lives in heedlab.toy.train."""
    teacher = ToyModel(config)
    teacher.patch_projector.weight.requires_grad_(False)
    return teacher


def hybridize(teacher: ToyModel, config: Optional[ToyConfig] = None) -> ToyModel:
    """
    3:1 student: replaced layers get a Mixer whose Q/K/V/O are verbatim
    copies of the teacher's, everything else is a frozen copy of the teacher.
    """
    config = config or teacher.config
    if MIXER in teacher.kinds:
        raise ModelError("the teacher must be all-attention")
    mixer_layers = config.mixer_layers()

    student = copy.deepcopy(teacher)
    with seeded(config.seed + 1), torch.no_grad():
        for index in mixer_layers:
            block = student.blocks[index]
            mixer = Mixer(config).to(torch.float64)
            for name in ("W_Q", "W_K", "W_V", "W_O"):
                getattr(mixer, name).weight.copy_(getattr(block.mix, name).weight)
            block.mix = mixer
            block.kind = MIXER

    student.train_only([name for name, _ in student.mixer_parameters()])
    log.debug("hybridized layers %s into mixers", mixer_layers)
    return student


def forward_with_residuals(
    model: ToyModel,
    batch: "Batch",
    key_mask: Optional[torch.Tensor] = None,
    residual_offsets: Optional[Dict[int, torch.Tensor]] = None,
) -> ResidualTrace:
    """Logits plus residual snapshots right after every replaced layer (post residual addition)."""
    layers = model.config.alignment_layers()
    out = model(batch.features, batch.tokens, key_mask=key_mask, residual_offsets=residual_offsets)
    attention = [probs for probs in out.attention if probs is not None]
    return ResidualTrace(
        layers=layers,
        residuals=torch.stack([out.hiddens[s] for s in layers], dim=1),
        logits=out.logits,
        block_outputs=torch.stack([out.block_outputs[s - 1] for s in layers], dim=1),
        attention=torch.stack(attention, dim=1) if attention else None,
    )


def answer_log_prob(model: ToyModel, batch: "Batch", key_mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Mean log-probability of the gold answer tokens, one score per sample."""
    logits = model(batch.features, batch.tokens, key_mask=key_mask).logits
    support = batch.labels != IGNORE_INDEX
    log_probs = F.log_softmax(logits, dim=-1)
    gold = log_probs.gather(-1, batch.labels.masked_fill(~support, 0).unsqueeze(-1)).squeeze(-1)
    return (gold * support).sum(dim=1) / support.sum(dim=1)


def exact_match(model: ToyModel, batch: "Batch") -> torch.Tensor:
    """
    True where every answer token is the argmax at its position.

    With teacher forcing this equals greedy decoding: once the first answer
    token is wrong the sample is wrong anyway.
    """
    logits = model(batch.features, batch.tokens).logits
    support = batch.labels != IGNORE_INDEX
    hits = (logits.argmax(dim=-1) == batch.labels) | ~support
    return hits.all(dim=1)


def parameter_digest(params: Sequence[Tuple[str, torch.Tensor]]) -> str:
    digest = hashlib.sha256()
    for name, param in params:
        digest.update(name.encode("utf-8"))
        digest.update(param.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


#
# Checkpoints
#
# magic "HEEDCKPT" | version u32 | header length u32 | header JSON | float64 data
#
# The JSON header echoes the config and the block kinds, and lists every
# parameter as {"name", "shape", "offset"} with offsets counted in float64
# values from the start of the data section.
#


def save_checkpoint(model: ToyModel, path: Union[str, Path]) -> None:
    entries, chunks, offset = [], [], 0
    for name, tensor in model.state_dict().items():
        array = tensor.detach().cpu().to(torch.float64).contiguous().numpy()
        entries.append({"name": name, "shape": list(array.shape), "offset": offset})
        chunks.append(array.astype("<f8").tobytes())
        offset += array.size

    header = json.dumps(
        {"config": model.config.to_dict(), "kinds": list(model.kinds), "params": entries},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    with open(path, "wb") as handle:
        handle.write(CHECKPOINT_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(header)))
        handle.write(header)
        for chunk in chunks:
            handle.write(chunk)


def load_checkpoint(path: Union[str, Path]) -> ToyModel:
    data = Path(path).read_bytes()
    if len(data) < CHECKPOINT_HEADER.size:
        raise ModelError(f"{path}: not a checkpoint")
    magic, version, header_len = CHECKPOINT_HEADER.unpack_from(data, 0)
    if magic != CHECKPOINT_MAGIC or version != CHECKPOINT_VERSION:
        raise ModelError(f"{path}: unsupported checkpoint (magic={magic!r}, version={version})")

    start = CHECKPOINT_HEADER.size
    header = json.loads(data[start : start + header_len].decode("utf-8"))
    body = memoryview(data)[start + header_len :]

    model = ToyModel(ToyConfig.from_dict(header["config"]))
    for index, kind in enumerate(header["kinds"]):
        if kind == MIXER:
            model.blocks[index].mix = Mixer(model.config).to(torch.float64)
            model.blocks[index].kind = MIXER

    state = {}
    for entry in header["params"]:
        count = math.prod(entry["shape"])
        begin = entry["offset"] * 8
        values = torch.frombuffer(bytearray(body[begin : begin + count * 8]), dtype=torch.float64)
        state[entry["name"]] = values.reshape(entry["shape"]).clone()
    model.load_state_dict(state)

    if MIXER in model.kinds:
        model.train_only([name for name, _ in model.mixer_parameters()])
    model.patch_projector.weight.requires_grad_(False)
    return model
