"""Auxiliary training losses on the retrieval-key activations.

Two penalties, both added to the cross-entropy objective with weight omega:

* a queue penalty pulling each context vector toward the recent vectors
  that predicted the same target word, where "recent" lives in per-word
  FIFO queues filled by a slowly-updated momentum copy of the model and
  queue entries are treated as constants (stop-gradient);
* a plain L2 penalty on the context-vector norms, which is what the queue
  penalty degenerates to when every queue entry is the zero vector.

Both penalties are sums (not means) over the batch and over stored queue
entries; renormalization is the caller's choice of omega.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import torch

from .model import TransformerLM


@dataclass
class RegConfig:
    omega: float = 0.0
    queue_len: int = 4
    momentum: float = 0.99

    def __post_init__(self) -> None:
        if self.omega < 0:
            raise ValueError(f"omega must be >= 0, got {self.omega}")
        if self.queue_len < 1:
            raise ValueError(f"queue_len must be >= 1, got {self.queue_len}")
        if not 0.0 <= self.momentum <= 1.0:
            raise ValueError(f"momentum must be in [0, 1], got {self.momentum}")


def _pairwise_sum(x: torch.Tensor, dim: int) -> torch.Tensor:
    # Balanced (power-of-two padded) reduction: keeps the zero-queue identity
    # moco == queue_len * l2 exact in floating point when queue_len is a
    # power of two.
    n = x.shape[dim]
    target = 1 << max(0, (n - 1).bit_length())
    if target != n:
        pad_shape = list(x.shape)
        pad_shape[dim] = target - n
        x = torch.cat([x, x.new_zeros(pad_shape)], dim=dim)
    while x.shape[dim] > 1:
        h = x.shape[dim] // 2
        x = x.narrow(dim, 0, h) + x.narrow(dim, h, h)
    return x.squeeze(dim)


def l2_penalty(reprs: torch.Tensor, omega: float) -> torch.Tensor:
    """omega * sum_j ||r_j||^2 over an (N, d) batch of context vectors."""
    per_vec = (reprs * reprs).sum(dim=-1)
    return omega * per_vec.sum()


class QueueBank:
    """Per-target-word ring buffers of the most recent momentum-encoded
    context vectors; at most ``queue_len`` entries per word, FIFO eviction.

    Words never seen have empty queues and contribute nothing to the
    penalty (empty sum), which keeps the queue objective distinct from its
    zero-vector reduction.
    """

    def __init__(
        self,
        vocab_size: int,
        queue_len: int,
        d_model: int,
        dtype: torch.dtype = torch.float32,
    ):
        if queue_len < 1:
            raise ValueError("queue_len must be >= 1")
        self.vocab_size = vocab_size
        self.queue_len = queue_len
        self.d_model = d_model
        self.buf = torch.zeros(vocab_size, queue_len, d_model, dtype=dtype)
        self.count = torch.zeros(vocab_size, dtype=torch.long)
        self.ptr = torch.zeros(vocab_size, dtype=torch.long)

    @torch.no_grad()
    def push(self, target_id: int, vec: torch.Tensor) -> None:
        if not torch.isfinite(vec).all():
            raise ValueError("refusing to enqueue non-finite vector")
        slot = int(self.ptr[target_id])
        self.buf[target_id, slot] = vec.detach().to(self.buf.dtype)
        self.ptr[target_id] = (slot + 1) % self.queue_len
        self.count[target_id] = min(self.queue_len, int(self.count[target_id]) + 1)

    @torch.no_grad()
    def push_batch(self, targets: torch.Tensor, vecs: torch.Tensor) -> None:
        """Push (target, vector) pairs in batch order."""
        for j in range(len(targets)):
            self.push(int(targets[j]), vecs[j])

    def contents(self, target_id: int) -> torch.Tensor:
        """Stored vectors for one word, oldest first."""
        c = int(self.count[target_id])
        if c < self.queue_len:
            return self.buf[target_id, :c].clone()
        p = int(self.ptr[target_id])
        order = [(p + j) % self.queue_len for j in range(self.queue_len)]
        return self.buf[target_id, order].clone()

    def gather(self, targets: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Queue slabs and validity mask for a batch of target ids."""
        q = self.buf[targets]
        mask = (
            torch.arange(self.queue_len).unsqueeze(0) < self.count[targets].unsqueeze(1)
        )
        return q, mask


def moco_penalty(
    queues: QueueBank,
    targets: torch.Tensor,
    reprs: torch.Tensor,
    omega: float,
) -> torch.Tensor:
    """omega * sum_j sum_i ||sg(Q^{w_j}_i) - r_j||^2 over stored entries.

    Queue entries are gradient constants; the gradient flows only into
    ``reprs``. Partially filled queues contribute only their stored entries.
    """
    q, mask = queues.gather(targets)
    diff = q.detach().to(reprs.dtype) - reprs.unsqueeze(1)
    sq = (diff * diff).sum(dim=-1)
    sq = sq * mask.to(sq.dtype)
    per_vec = _pairwise_sum(sq, dim=1)
    return omega * per_vec.sum()


class MomentumEncoder:
    """Shadow copy of the LM, updated as theta <- m*theta + (1-m)*theta_online.

    Initialized equal to the online model; produces the vectors that fill
    the queues, never the online model's own activations.
    """

    def __init__(self, model: TransformerLM, momentum: float):
        if not 0.0 <= momentum <= 1.0:
            raise ValueError(f"momentum must be in [0, 1], got {momentum}")
        self.momentum = momentum
        self.model = copy.deepcopy(model)
        for p in self.model.parameters():
            p.requires_grad_(False)
        self.model.eval()

    @torch.no_grad()
    def encode(self, ids: torch.Tensor) -> torch.Tensor:
        return self.model(ids).reprs

    def update(self, online: TransformerLM) -> None:
        momentum_update(self.model, online, self.momentum)


@torch.no_grad()
def momentum_update(
    target_model: torch.nn.Module, online_model: torch.nn.Module, m: float
) -> None:
    """Elementwise theta_target <- m*theta_target + (1-m)*theta_online."""
    if not 0.0 <= m <= 1.0:
        raise ValueError(f"momentum must be in [0, 1], got {m}")
    if m == 1.0:
        return
    for pt, po in zip(target_model.parameters(), online_model.parameters()):
        if m == 0.0:
            pt.copy_(po)
        else:
            pt.mul_(m).add_(po, alpha=1.0 - m)
