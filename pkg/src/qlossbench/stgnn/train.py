"""Multi-task objective, gradients, and the training loop."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor

from qlossbench.errors import NumericalAbort
from qlossbench.experiment import Dataset
from qlossbench.stgnn.model import DTYPE, STGNN, Inputs, encode, encode_dataset

log = logging.getLogger(__name__)


@dataclass
class Targets:
    labels: Tensor  # (B, d)
    excluded: Tensor  # (B, d) bool
    loss_mask: Tensor  # (B, d*d, T)

    def select(self, idx) -> "Targets":
        return Targets(self.labels[idx], self.excluded[idx], self.loss_mask[idx])


def targets_of(dataset: Dataset, idx=slice(None)) -> Targets:
    return Targets(
        torch.as_tensor(dataset.logical_labels[idx], dtype=DTYPE),
        torch.as_tensor(dataset.excluded_observables[idx].astype(bool)),
        # stored round-major (B, T, n_data); the head is qubit-major
        torch.as_tensor(dataset.loss_mask_truth[idx], dtype=DTYPE).transpose(1, 2),
    )


def positive_weight(loss_mask: np.ndarray | Tensor) -> float:
    """Negatives over positives of a loss mask; 1 when there are no positives."""
    m = np.asarray(loss_mask)
    pos = float(m.sum())
    if pos == 0:
        return 1.0
    return (m.size - pos) / pos


def multi_task_loss(
    logical_logits: Tensor,
    loss_logits: Tensor,
    targets: Targets,
    lambda_logic: float,
    lambda_loss: float,
    pos_weight: float = 1.0,
) -> tuple[Tensor, dict]:
    """Weighted sum of masked logical and loss-mask cross entropies.

    Returns the scalar and a dict of float components. If every observable
    in the batch is excluded the logical term is skipped and
    ``logical_skipped`` is set.
    """
    keep = ~targets.excluded
    skipped = not bool(keep.any())
    if skipped:
        logic = logical_logits.sum() * 0.0
    else:
        per = F.binary_cross_entropy_with_logits(logical_logits, targets.labels, reduction="none")
        logic = per[keep].mean()
    lossterm = F.binary_cross_entropy_with_logits(
        loss_logits,
        targets.loss_mask,
        pos_weight=torch.tensor(pos_weight, dtype=loss_logits.dtype),
    )
    total = lambda_logic * logic + lambda_loss * lossterm
    parts = {
        "logical": float(logic.detach()),
        "loss": float(lossterm.detach()),
        "total": float(total.detach()),
        "logical_skipped": skipped,
    }
    return total, parts


def backward(
    model: STGNN, inputs: Inputs, targets: Targets, pos_weight: float = 1.0
) -> tuple[dict[str, Tensor], dict]:
    """Gradients of the objective for every named parameter.

    Raises :class:`NumericalAbort` if the forward pass is not finite.
    """
    model.zero_grad(set_to_none=False)
    logical, loss_logits = model(inputs)
    total, parts = multi_task_loss(
        logical, loss_logits, targets, model.cfg.lambda_logic, model.cfg.lambda_loss, pos_weight
    )
    if not torch.isfinite(total):
        bad = [n for n, t in (("logical", logical), ("loss", loss_logits)) if not torch.isfinite(t).all()]
        raise NumericalAbort(f"non-finite objective {parts}; non-finite outputs: {bad or 'none'}")
    total.backward()
    grads = {n: p.grad.detach().clone() for n, p in model.named_parameters()}
    return grads, parts


@dataclass
class OptimizerConfig:
    lr: float = 3e-3
    epochs: int = 200
    batch_size: int = 64
    seed: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    schedule: str = "constant"  # or "cosine": decay to zero over ``epochs``

    def __post_init__(self):
        if self.lr <= 0 or self.epochs < 0 or self.batch_size < 1:
            raise ValueError("lr must be positive, epochs non-negative, batch_size at least 1")
        if self.schedule not in ("constant", "cosine"):
            raise ValueError(f"schedule must be 'constant' or 'cosine', got {self.schedule!r}")


@dataclass
class EpochStats:
    epoch: int
    logical_loss: float
    loss_loss: float
    total: float
    logical_accuracy: float
    precision: float
    recall: float

    def line(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class TrainResult:
    history: list[EpochStats] = field(default_factory=list)
    epochs_done: int = 0
    pos_weight: float = 1.0


def _precision_recall(prob: Tensor, truth: Tensor, threshold: float = 0.5) -> tuple[float, float]:
    pred = prob >= threshold
    pos = truth > 0.5
    tp = float((pred & pos).sum())
    fp = float((pred & ~pos).sum())
    fn = float((~pred & pos).sum())
    precision = tp / (tp + fp) if tp + fp else 1.0
    recall = tp / (tp + fn) if tp + fn else 1.0
    return precision, recall


@torch.no_grad()
def evaluate(model: STGNN, inputs: Inputs, targets: Targets, pos_weight: float, batch: int = 256) -> dict:
    """Full-set objective components, logical accuracy, and loss-head P/R at 0.5."""
    was = model.training
    model.eval()
    logical, loss_logits = [], []
    for s in range(0, inputs.batch, batch):
        a, b = model(inputs.select(slice(s, s + batch)))
        logical.append(a)
        loss_logits.append(b)
    model.train(was)
    logical = torch.cat(logical)
    loss_logits = torch.cat(loss_logits)
    _, parts = multi_task_loss(
        logical, loss_logits, targets, model.cfg.lambda_logic, model.cfg.lambda_loss, pos_weight
    )
    keep = ~targets.excluded
    hit = ((logical > 0).to(DTYPE) == targets.labels) & keep
    acc = float(hit.sum()) / float(keep.sum()) if keep.any() else 1.0
    precision, recall = _precision_recall(torch.sigmoid(loss_logits), targets.loss_mask)
    return {**parts, "logical_accuracy": acc, "precision": precision, "recall": recall}


def train(
    model: STGNN,
    dataset: Dataset,
    opt: OptimizerConfig,
    on_epoch: Callable[[EpochStats], None] | None = None,
    start_epoch: int = 0,
    stop: Callable[[EpochStats], bool] | None = None,
) -> TrainResult:
    """Adam over shuffled minibatches; deterministic given ``opt.seed``.

    Aborts with :class:`NumericalAbort` if the objective becomes non-finite
    or exceeds ten times its initial value for three epochs in a row.
    ``stop`` may end training early once an epoch's stats satisfy it.
    """
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    if dataset.d != model.layout.d:
        raise ValueError(f"dataset d={dataset.d} does not match model d={model.layout.d}")
    inputs = encode_dataset(dataset)
    targets = targets_of(dataset)
    pw = positive_weight(dataset.loss_mask_truth)
    result = TrainResult(epochs_done=start_epoch, pos_weight=pw)
    gen = torch.Generator().manual_seed(opt.seed)
    optim = torch.optim.Adam(model.parameters(), lr=opt.lr, betas=opt.betas)
    sched = None
    if opt.schedule == "cosine" and opt.epochs > 0:
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(optim, T_max=opt.epochs)
    initial = evaluate(model, inputs, targets, pw)["total"]
    over = 0
    model.train()
    for epoch in range(start_epoch + 1, start_epoch + opt.epochs + 1):
        order = torch.randperm(len(dataset), generator=gen)
        for s in range(0, len(dataset), opt.batch_size):
            idx = order[s : s + opt.batch_size]
            optim.zero_grad()
            logical, loss_logits = model(inputs.select(idx))
            total, parts = multi_task_loss(
                logical, loss_logits, targets.select(idx),
                model.cfg.lambda_logic, model.cfg.lambda_loss, pw,
            )
            if not torch.isfinite(total):
                raise NumericalAbort(f"non-finite objective at epoch {epoch}: {parts}")
            total.backward()
            optim.step()
        if sched is not None:
            sched.step()
        ev = evaluate(model, inputs, targets, pw)
        stats = EpochStats(
            epoch=epoch,
            logical_loss=ev["logical"],
            loss_loss=ev["loss"],
            total=ev["total"],
            logical_accuracy=ev["logical_accuracy"],
            precision=ev["precision"],
            recall=ev["recall"],
        )
        result.history.append(stats)
        result.epochs_done = epoch
        log.info(stats.line())
        if on_epoch is not None:
            on_epoch(stats)
        over = over + 1 if stats.total > 10.0 * initial else 0
        if over >= 3:
            raise NumericalAbort(
                f"training diverged: objective {stats.total:.4g} above 10x initial "
                f"{initial:.4g} for 3 epochs (epoch {epoch})"
            )
        if stop is not None and stop(stats):
            break
    model.eval()
    return result


@torch.no_grad()
def predict(model: STGNN, inputs: Inputs, batch: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """Logical flip predictions ``(B, d)`` and loss probabilities ``(B, d*d, T)``."""
    model.eval()
    flips, probs = [], []
    for s in range(0, inputs.batch, batch):
        a, b = model(inputs.select(slice(s, s + batch)))
        flips.append((a > 0).to(torch.uint8))
        probs.append(torch.sigmoid(b))
    return torch.cat(flips).numpy(), torch.cat(probs).numpy()


@torch.no_grad()
def predict_loss_mask(model: STGNN, record, threshold: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    """Loss mask and probabilities ``(d*d, T)`` for one shot record.

    The per-qubit verdict is the last column.
    """
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must lie in [0, 1], got {threshold}")
    x = encode(model.layout, record.ancilla_outcomes, record.detectors, record.basis.code)
    model.eval()
    _, logits = model(x)
    prob = torch.sigmoid(logits[0]).numpy()
    return (prob >= threshold).astype(np.uint8), prob
