"""Training loop for the three objectives: plain cross-entropy, CE plus the
L2 activation penalty, and CE plus the momentum-queue penalty.

Deterministic by construction: a single seed drives parameter init, batches
are visited in corpus order, and dropout is not used, so fixed seeds produce
bit-identical checkpoints. With omega == 0 the regularized objectives skip
the penalty path entirely and reduce exactly to plain CE training.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .corpus import EncodedSplit, batch_iter
from .errors import DivergenceError
from .model import (
    CheckpointMeta,
    ModelConfig,
    TransformerLM,
    ce_loss,
    perplexity,
    save_checkpoint,
)
from .regularizers import (
    MomentumEncoder,
    QueueBank,
    RegConfig,
    l2_penalty,
    moco_penalty,
)

OBJECTIVES = ("ce", "ce+l2", "ce+moco")


@dataclass
class TrainConfig:
    objective: str = "ce"
    epochs: int = 5
    batch_size: int = 8
    bptt: int | None = None  # defaults to the model context length
    lr: float = 1e-3
    warmup_steps: int = 50
    grad_clip: float | None = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.objective not in OBJECTIVES:
            raise ValueError(
                f"unknown objective {self.objective!r}, expected one of {OBJECTIVES}"
            )


@dataclass
class TrainResult:
    model: TransformerLM
    metrics: dict
    checkpoint_path: Path | None


def objective_loss(
    model: TransformerLM,
    x: torch.Tensor,
    y: torch.Tensor,
    objective: str,
    reg: RegConfig,
    queues: QueueBank | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Total loss for one batch, plus the bare CE term.

    Pure in the parameters given a fixed queue state, which is what the
    finite-difference gradient checks rely on.
    """
    out = model(x)
    ce = ce_loss(out.logits, y)
    if objective == "ce" or reg.omega == 0.0:
        return ce, ce
    flat = out.reprs.reshape(-1, out.reprs.shape[-1])
    if objective == "ce+l2":
        return ce + l2_penalty(flat, reg.omega), ce
    if objective == "ce+moco":
        if queues is None:
            raise ValueError("ce+moco objective needs a QueueBank")
        return ce + moco_penalty(queues, y.reshape(-1), flat, reg.omega), ce
    raise ValueError(f"unknown objective {objective!r}")


def train_run(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    reg_cfg: RegConfig,
    train_split: EncodedSplit,
    valid_split: EncodedSplit | None = None,
    out_path: str | Path | None = None,
    vocab_hash: str = "",
) -> TrainResult:
    """Train a model, tracking per-epoch train/valid perplexity.

    If ``out_path`` is given, a checkpoint is (re)written there after every
    epoch. Non-finite losses abort with a diagnostic instead of saving a
    poisoned checkpoint.
    """
    torch.manual_seed(train_cfg.seed)
    model = TransformerLM(model_cfg)
    bptt = train_cfg.bptt or model_cfg.context_len
    opt = torch.optim.Adam(model.parameters(), lr=train_cfg.lr)
    sched = torch.optim.lr_scheduler.LambdaLR(
        opt, lambda step: min(1.0, (step + 1) / max(1, train_cfg.warmup_steps))
    )

    use_moco = train_cfg.objective == "ce+moco" and reg_cfg.omega != 0.0
    queues = None
    encoder = None
    if use_moco:
        queues = QueueBank(
            model_cfg.vocab_size,
            reg_cfg.queue_len,
            model_cfg.d_model,
            dtype=next(model.parameters()).dtype,
        )
        encoder = MomentumEncoder(model, reg_cfg.momentum)

    step = 0
    loss_trace: list[float] = []
    train_ppls: list[float] = []
    valid_ppls: list[float] = []
    checkpoint_path = Path(out_path) if out_path is not None else None

    for epoch in range(train_cfg.epochs):
        model.train()
        epoch_ce = 0.0
        epoch_loss = 0.0
        n_batches = 0
        for x_np, y_np in batch_iter(train_split, train_cfg.batch_size, bptt):
            x = torch.from_numpy(np.ascontiguousarray(x_np))
            y = torch.from_numpy(np.ascontiguousarray(y_np))
            loss, ce = objective_loss(
                model, x, y, train_cfg.objective, reg_cfg, queues
            )
            if not torch.isfinite(loss):
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch} step {step}: "
                    f"total={float(loss)!r} ce={float(ce)!r} "
                    f"(objective={train_cfg.objective}, omega={reg_cfg.omega})"
                )
            opt.zero_grad()
            loss.backward()
            if train_cfg.grad_clip is not None:
                torch.nn.utils.clip_grad_norm_(model.parameters(), train_cfg.grad_clip)
            opt.step()
            sched.step()
            step += 1
            if use_moco:
                encoder.update(model)
                with torch.no_grad():
                    key_reprs = encoder.encode(x).reshape(-1, model_cfg.d_model)
                queues.push_batch(y.reshape(-1), key_reprs)
            epoch_ce += float(ce)
            epoch_loss += float(loss)
            n_batches += 1
        loss_trace.append(epoch_loss / n_batches)
        train_ppls.append(math.exp(epoch_ce / n_batches))
        if valid_split is not None:
            valid_ppls.append(perplexity(model, valid_split, bptt=bptt))
        if checkpoint_path is not None:
            meta = CheckpointMeta(
                config=model_cfg,
                vocab_hash=vocab_hash,
                step=step,
                loss_trace=loss_trace,
                extra={
                    "objective": train_cfg.objective,
                    "reg": asdict(reg_cfg),
                    "train": asdict(train_cfg),
                    "seed": train_cfg.seed,
                },
            )
            save_checkpoint(checkpoint_path, model, meta)

    metrics = {
        "objective": train_cfg.objective,
        "omega": reg_cfg.omega,
        "seed": train_cfg.seed,
        "steps": step,
        "train_loss": loss_trace,
        "train_ppl": train_ppls,
        "valid_ppl": valid_ppls,
    }
    return TrainResult(model=model, metrics=metrics, checkpoint_path=checkpoint_path)
