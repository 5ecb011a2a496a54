"""Decoder-only transformer LM whose final-layer representation doubles as
the retrieval key.

The forward pass returns both next-token logits and the post-final-layernorm
context vectors ``reprs``; that tensor is what the datastore stores, what
queries are formed from, and what the activation regularizers penalize.
Desk-scale defaults (2 layers, d=64) keep everything CPU-trainable; the
config is fully parameterized so larger shapes remain expressible.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from typing import Iterator, NamedTuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .corpus import EncodedSplit, batch_iter
from .errors import FormatError

CHECKPOINT_MAGIC = b"KNLM"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    vocab_size: int
    n_layers: int = 2
    n_heads: int = 4
    d_model: int = 64
    d_ff: int = 256
    context_len: int = 64
    tie_embeddings: bool = True
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("vocab_size", "n_layers", "n_heads", "d_model", "d_ff", "context_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model={self.d_model} not divisible by n_heads={self.n_heads}"
            )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


class ForwardOutput(NamedTuple):
    logits: torch.Tensor  # (B, T, V)
    reprs: torch.Tensor  # (B, T, d_model)


class CausalSelfAttention(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.n_heads = cfg.n_heads
        self.head_dim = cfg.d_model // cfg.n_heads
        self.qkv = nn.Linear(cfg.d_model, 3 * cfg.d_model)
        self.proj = nn.Linear(cfg.d_model, cfg.d_model)
        mask = torch.tril(torch.ones(cfg.context_len, cfg.context_len, dtype=torch.bool))
        self.register_buffer("mask", mask, persistent=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        B, T, C = x.shape
        q, k, v = self.qkv(x).split(C, dim=2)
        q = q.view(B, T, self.n_heads, self.head_dim).transpose(1, 2)
        k = k.view(B, T, self.n_heads, self.head_dim).transpose(1, 2)
        v = v.view(B, T, self.n_heads, self.head_dim).transpose(1, 2)
        att = (q @ k.transpose(-2, -1)) / math.sqrt(self.head_dim)
        att = att.masked_fill(~self.mask[:T, :T], float("-inf"))
        att = F.softmax(att, dim=-1)
        y = (att @ v).transpose(1, 2).reshape(B, T, C)
        return self.proj(y)


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(cfg.d_model)
        self.attn = CausalSelfAttention(cfg)
        self.ln2 = nn.LayerNorm(cfg.d_model)
        self.mlp = nn.Sequential(
            nn.Linear(cfg.d_model, cfg.d_ff),
            nn.GELU(),
            nn.Linear(cfg.d_ff, cfg.d_model),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.ln1(x))
        x = x + self.mlp(self.ln2(x))
        return x


class TransformerLM(nn.Module):
    """Pre-LN causal transformer with (by default) tied input/output embedding.

    Construction reseeds torch's global RNG from ``config.seed`` so two
    models built from equal configs are parameter-identical.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        torch.manual_seed(config.seed)
        self.tok_emb = nn.Embedding(config.vocab_size, config.d_model)
        self.pos_emb = nn.Embedding(config.context_len, config.d_model)
        self.blocks = nn.ModuleList(Block(config) for _ in range(config.n_layers))
        self.ln_f = nn.LayerNorm(config.d_model)
        if config.tie_embeddings:
            self.lm_head = None
        else:
            self.lm_head = nn.Linear(config.d_model, config.vocab_size, bias=False)
        nn.init.normal_(self.tok_emb.weight, std=0.02)
        nn.init.normal_(self.pos_emb.weight, std=0.02)

    @property
    def output_weight(self) -> torch.Tensor:
        return self.tok_emb.weight if self.lm_head is None else self.lm_head.weight

    def forward(self, ids: torch.Tensor) -> ForwardOutput:
        if ids.dim() == 1:
            ids = ids.unsqueeze(0)
        B, T = ids.shape
        if T > self.config.context_len:
            raise ValueError(
                f"sequence length {T} exceeds context_len {self.config.context_len}"
            )
        if int(ids.min()) < 0 or int(ids.max()) >= self.config.vocab_size:
            raise ValueError("token id out of range for vocab")
        pos = torch.arange(T, device=ids.device)
        x = self.tok_emb(ids) + self.pos_emb(pos)
        for block in self.blocks:
            x = block(x)
        reprs = self.ln_f(x)
        logits = F.linear(reprs, self.output_weight)
        return ForwardOutput(logits=logits, reprs=reprs)

    @property
    def d_model(self) -> int:
        return self.config.d_model


def ce_loss(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean next-token NLL over all positions (log-sum-exp stabilized)."""
    V = logits.shape[-1]
    return F.cross_entropy(logits.reshape(-1, V), targets.reshape(-1))


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def stable_softmax(logits: np.ndarray) -> np.ndarray:
    """Row-stable softmax in float64 along the last axis."""
    z = logits.astype(np.float64, copy=True)
    z -= z.max(axis=-1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=-1, keepdims=True)
    return z


def iter_eval_windows(
    model: TransformerLM,
    split: EncodedSplit,
    batch_size: int = 1,
    bptt: int | None = None,
) -> Iterator[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Yield (probs, reprs, targets) per non-overlapping window block.

    probs: (B, T, V) float64 next-token distributions; reprs: (B, T, d)
    float32 context vectors; targets: (B, T) int64. Iteration order is the
    deterministic order of :func:`batch_iter`.
    """
    if bptt is None:
        bptt = model.config.context_len
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            for x, y in batch_iter(split, batch_size, bptt):
                out = model(torch.from_numpy(np.ascontiguousarray(x)))
                probs = stable_softmax(out.logits.numpy())
                yield probs, out.reprs.numpy(), y
    finally:
        if was_training:
            model.train()


def nll_sum(probs: np.ndarray, targets: np.ndarray) -> tuple[float, int]:
    """Sum of -log p[target] over a window block, plus the token count.

    Shared by plain perplexity and the kNN-LM evaluator so that the two
    accumulate bit-identically.
    """
    p_true = np.take_along_axis(probs, targets[..., None], axis=-1).ravel()
    return float(-np.log(p_true).sum()), p_true.size


def perplexity(
    model: TransformerLM,
    split: EncodedSplit,
    batch_size: int = 1,
    bptt: int | None = None,
) -> float:
    """exp(mean token NLL) over the split, non-overlapping windows."""
    if len(split) == 0:
        raise ValueError("empty split")
    total = 0.0
    count = 0
    for probs, _, targets in iter_eval_windows(model, split, batch_size, bptt):
        s, n = nll_sum(probs, targets)
        total += s
        count += n
    return math.exp(total / count)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


@dataclass
class CheckpointMeta:
    config: ModelConfig
    vocab_hash: str = ""
    step: int = 0
    loss_trace: list[float] = field(default_factory=list)
    extra: dict = field(default_factory=dict)


def save_checkpoint(path, model: TransformerLM, meta: CheckpointMeta) -> None:
    """Write a KNLM container: JSON header + named float32 LE tensors."""
    header = {
        "config": meta.config.to_dict(),
        "vocab_hash": meta.vocab_hash,
        "step": meta.step,
        "loss_trace": meta.loss_trace,
        "extra": meta.extra,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    buf.write(struct.pack("<I", len(header_bytes)))
    buf.write(header_bytes)
    for name, param in model.named_parameters():
        name_b = name.encode("utf-8")
        arr = param.detach().to(torch.float32).numpy()
        buf.write(struct.pack("<I", len(name_b)))
        buf.write(name_b)
        buf.write(struct.pack("<I", arr.ndim))
        for dim in arr.shape:
            buf.write(struct.pack("<Q", dim))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def _read_exact(f, n: int) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise FormatError("truncated checkpoint file")
    return data


def load_checkpoint(path) -> tuple[TransformerLM, CheckpointMeta]:
    """Load a KNLM container; the rebuilt model reproduces the saved forward
    pass bit-for-bit (parameters are stored and restored as float32)."""
    with open(path, "rb") as f:
        if _read_exact(f, 4) != CHECKPOINT_MAGIC:
            raise FormatError(f"{path}: bad checkpoint magic")
        (version,) = struct.unpack("<I", _read_exact(f, 4))
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        (header_len,) = struct.unpack("<I", _read_exact(f, 4))
        header = json.loads(_read_exact(f, header_len).decode("utf-8"))
        config = ModelConfig.from_dict(header["config"])
        model = TransformerLM(config)
        tensors: dict[str, np.ndarray] = {}
        expected = [name for name, _ in model.named_parameters()]
        for name in expected:
            (name_len,) = struct.unpack("<I", _read_exact(f, 4))
            got = _read_exact(f, name_len).decode("utf-8")
            if got != name:
                raise FormatError(f"{path}: unexpected tensor {got!r}, wanted {name!r}")
            (ndim,) = struct.unpack("<I", _read_exact(f, 4))
            shape = struct.unpack(f"<{ndim}Q", _read_exact(f, 8 * ndim))
            n_items = int(np.prod(shape, dtype=np.int64)) if ndim else 1
            data = np.frombuffer(_read_exact(f, 4 * n_items), dtype="<f4")
            tensors[name] = data.reshape(shape)
        if f.read(1) != b"":
            raise FormatError(f"{path}: trailing bytes after final tensor")
    with torch.no_grad():
        for name, param in model.named_parameters():
            arr = tensors[name]
            if tuple(param.shape) != arr.shape:
                raise FormatError(f"{path}: shape mismatch for {name}")
            param.copy_(torch.from_numpy(arr.copy()))
    meta = CheckpointMeta(
        config=config,
        vocab_hash=header["vocab_hash"],
        step=header["step"],
        loss_trace=list(header["loss_trace"]),
        extra=dict(header.get("extra", {})),
    )
    return model, meta
