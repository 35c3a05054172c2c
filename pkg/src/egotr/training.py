"""Soft-margin triplet loss, AdamW with a cosine schedule, and the epoch loop."""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .data import CrossViewDataset, batch_iter
from .exceptions import NonFiniteError, UsageError
from .model import EgoTrModel, forward_pair
from .tensor import Tensor

ALPHA = 10.0


def triplet_loss(d_pos, d_neg, alpha: float = ALPHA):
    """softplus(alpha * (d_pos - d_neg)).

    Works on floats (returns a float) and on Tensors (returns a Tensor).
    """
    if isinstance(d_pos, Tensor) or isinstance(d_neg, Tensor):
        return T.softplus((d_pos - d_neg) * alpha)
    x = alpha * (float(d_pos) - float(d_neg))
    return max(x, 0.0) + math.log1p(math.exp(-abs(x)))


def pairwise_distances(f_g: Tensor, f_a: Tensor, eps: float = 1e-12) -> Tensor:
    """L2 distances d[i, j] = |f_g[i] - f_a[j]|; eps keeps sqrt differentiable at 0."""
    diff = f_g.reshape(f_g.shape[0], 1, f_g.shape[1]) - f_a.reshape(1, *f_a.shape)
    return T.sqrt((diff * diff).sum(axis=-1) + eps)


def batch_loss(f_g: Tensor, f_a: Tensor, alpha: float = ALPHA) -> Tensor:
    """Mean soft-margin triplet loss over every in-batch negative, both directions.

    Row i of ``f_g`` and ``f_a`` is a matching pair. Ground-to-aerial terms
    use d(g_i, a_i) against d(g_i, a_j); aerial-to-ground terms use
    d(a_i, g_i) against d(a_i, g_j). There are 2 B (B - 1) terms.
    """
    if f_g.shape != f_a.shape or f_g.ndim != 2:
        raise UsageError(f"descriptor batches must both be (B, D), got {f_g.shape} and {f_a.shape}")
    b = f_g.shape[0]
    if b < 2:
        raise UsageError("batch_loss needs B >= 2 so that negatives exist")
    d = pairwise_distances(f_g, f_a)
    idx = np.arange(b)
    pos = d[idx, idx]
    off = Tensor._wrap((1.0 - np.eye(b)).astype(d.dtype))
    g2a = T.softplus((pos.reshape(b, 1) - d) * alpha)   # [i, j]: query g_i, negative a_j
    a2g = T.softplus((pos.reshape(1, b) - d) * alpha)   # [j, i]: query a_i, negative g_j
    total = ((g2a + a2g) * off).sum()
    return total * (1.0 / (2 * b * (b - 1)))


def cosine_lr(step: int, total_steps: int, lr_max: float = 1e-4, lr_min: float = 0.0) -> float:
    if not 0 <= step <= total_steps:
        raise UsageError(f"step {step} outside [0, {total_steps}]")
    if total_steps == 0:
        return lr_max
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * step / total_steps))


@dataclass
class OptimState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    lr: float = 1e-4
    weight_decay: float = 0.03
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: dict[str, Tensor], **kwargs) -> "OptimState":
        return cls(m={k: np.zeros_like(p.data) for k, p in params.items()},
                   v={k: np.zeros_like(p.data) for k, p in params.items()}, **kwargs)


def adamw_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: OptimState,
               lr_t: float) -> None:
    """One in-place AdamW update with decoupled weight decay."""
    state.t += 1
    b1, b2 = state.betas
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if state.weight_decay:
            p.data *= p.data.dtype.type(1.0 - lr_t * state.weight_decay)
        if g is None:
            continue
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / c1
        v_hat = v / c2
        p.data -= (lr_t * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.dtype, copy=False)


class AdamW:
    """Thin owner of an :class:`OptimState` over a fixed parameter dict."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-4, weight_decay: float = 0.03,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.state = OptimState.zeros_like(params, lr=lr, weight_decay=weight_decay,
                                           betas=tuple(betas), eps=eps)

    def step(self, lr_t: float | None = None) -> None:
        grads = {k: p.grad for k, p in self.params.items() if p.grad is not None}
        adamw_step(self.params, grads, self.state, self.state.lr if lr_t is None else lr_t)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_blobs(self) -> dict[str, np.ndarray]:
        blobs = {f"optim.m.{k}": v for k, v in self.state.m.items()}
        blobs.update({f"optim.v.{k}": v for k, v in self.state.v.items()})
        return blobs

    def load_blobs(self, blobs: dict[str, np.ndarray], t: int) -> None:
        for k in self.params:
            self.state.m[k] = blobs[f"optim.m.{k}"].astype(self.params[k].dtype)
            self.state.v[k] = blobs[f"optim.v.{k}"].astype(self.params[k].dtype)
        self.state.t = int(t)


def clip_grad_norm(params: dict[str, Tensor], max_norm: float | None) -> float:
    """Scale gradients so their global L2 norm is at most ``max_norm``; return the norm before."""
    total = math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2))
                          for p in params.values() if p.grad is not None))
    if max_norm is not None and total > max_norm:
        scale = max_norm / (total + 1e-6)
        for p in params.values():
            if p.grad is not None:
                p.grad *= p.grad.dtype.type(scale)
    return total


def norm_dump(model: EgoTrModel) -> str:
    """One line per parameter with value and gradient norms (for NaN diagnostics)."""
    lines = []
    for name, p in model.named_parameters().items():
        gn = "-" if p.grad is None else f"{float(np.linalg.norm(p.grad)):.4g}"
        lines.append(f"{name}: |w|={float(np.linalg.norm(p.data)):.4g} |g|={gn}")
    return "\n".join(lines)


@dataclass
class TrainConfig:
    """Optimisation settings; defaults follow the reference recipe."""

    epochs: int = 50
    batch_size: int = 32
    alpha: float = ALPHA
    lr: float = 1e-4
    lr_min: float = 0.0
    weight_decay: float = 0.03
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    warmup_steps: int = 0
    clip_norm: float | None = 1.0
    seed: int = 0


@dataclass
class EpochMetrics:
    epoch: int
    mean_loss: float
    lr: float
    grad_norm: float
    steps: int
    recall_at_1: float | None = None

    def row(self) -> dict:
        return {"epoch": self.epoch, "mean_loss": f"{self.mean_loss:.8f}", "lr": f"{self.lr:.8e}",
                "grad_norm": f"{self.grad_norm:.8f}",
                "r@1": "" if self.recall_at_1 is None else f"{self.recall_at_1:.6f}"}


METRIC_FIELDS = ("epoch", "mean_loss", "lr", "grad_norm", "r@1")


def append_metrics_csv(path, metrics: EpochMetrics) -> None:
    new = not os.path.exists(path)
    with open(path, "a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRIC_FIELDS, lineterminator="\n")
        if new:
            writer.writeheader()
        writer.writerow(metrics.row())


class LRSchedule:
    """Linear warmup (optional) then cosine decay over ``total_steps``."""

    def __init__(self, total_steps: int, lr_max: float, lr_min: float = 0.0, warmup_steps: int = 0):
        self.total_steps = max(int(total_steps), 0)
        self.lr_max, self.lr_min = lr_max, lr_min
        self.warmup_steps = min(int(warmup_steps), self.total_steps)

    def __call__(self, step: int) -> float:
        if step < self.warmup_steps:
            return self.lr_max * (step + 1) / self.warmup_steps
        span = self.total_steps - self.warmup_steps
        return cosine_lr(min(step - self.warmup_steps, span), span, self.lr_max, self.lr_min)


def steps_per_epoch(n_pairs: int, batch_size: int) -> int:
    full, rest = divmod(n_pairs, batch_size)
    return full + (1 if rest >= 2 else 0)


def train_epoch(model: EgoTrModel, batches, optimizer: AdamW, config: TrainConfig,
                schedule: LRSchedule, epoch: int = 0) -> EpochMetrics:
    """One pass over ``batches``; parameters are updated in place."""
    params = optimizer.params
    losses, norms, lr_t = [], [], schedule(optimizer.state.t)
    for batch in batches:
        lr_t = schedule(optimizer.state.t)
        optimizer.zero_grad()
        try:
            f_g, f_a, _ = forward_pair(model, batch.ground, batch.aerial)
            loss = batch_loss(f_g, f_a, config.alpha)
        except NonFiniteError as exc:
            raise NonFiniteError(f"epoch {epoch}: {exc}\n{norm_dump(model)}") from None
        T.backward(loss)
        norms.append(clip_grad_norm(params, config.clip_norm))
        if not math.isfinite(norms[-1]):
            raise NonFiniteError(f"epoch {epoch}: non-finite gradient norm\n{norm_dump(model)}")
        optimizer.step(lr_t)
        losses.append(loss.item())
    optimizer.zero_grad()
    if not losses:
        raise UsageError("epoch produced no batches (need at least 2 training pairs)")
    return EpochMetrics(epoch, float(np.mean(losses)), float(lr_t), float(np.mean(norms)), len(losses))


@dataclass
class TrainResult:
    history: list[EpochMetrics] = field(default_factory=list)
    best_epoch: int | None = None
    best_recall: float | None = None


def fit(model: EgoTrModel, train: CrossViewDataset, config: TrainConfig,
        aerial_train: np.ndarray | None = None,
        evaluate: Callable[[EgoTrModel], float] | None = None,
        on_epoch_end: Callable[[EgoTrModel, EpochMetrics, AdamW, bool], None] | None = None,
        optimizer: AdamW | None = None, start_epoch: int = 0) -> TrainResult:
    """Train for ``config.epochs`` epochs.

    ``aerial_train`` replaces the dataset's aerial images (the polar-warped
    copies when the model expects them). ``evaluate`` returns a validation
    r@1 recorded in each epoch's metrics; ``on_epoch_end`` receives the model,
    metrics, optimizer and whether this epoch is the best so far.
    """
    params = model.named_parameters()
    if optimizer is None:
        optimizer = AdamW(params, lr=config.lr, weight_decay=config.weight_decay,
                          betas=config.betas, eps=config.eps)
    total = config.epochs * steps_per_epoch(len(train), config.batch_size)
    schedule = LRSchedule(total, config.lr, config.lr_min, config.warmup_steps)
    result = TrainResult()
    for epoch in range(start_epoch + 1, config.epochs + 1):
        batches = batch_iter(train, config.batch_size, seed=_epoch_seed(config.seed, epoch),
                             aerial=aerial_train)
        metrics = train_epoch(model, batches, optimizer, config, schedule, epoch)
        best = False
        if evaluate is not None:
            metrics.recall_at_1 = float(evaluate(model))
            if result.best_recall is None or metrics.recall_at_1 > result.best_recall:
                result.best_recall, result.best_epoch, best = metrics.recall_at_1, epoch, True
        result.history.append(metrics)
        if on_epoch_end is not None:
            on_epoch_end(model, metrics, optimizer, best)
    return result


def _epoch_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, epoch]).generate_state(1)[0])
