"""Losses, optimiser and the epoch loop."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .evaluation import EvalReport, evaluate_model
from .model import Batch, ForwardTrace, MatchMode, SeqPAN

logger = logging.getLogger(__name__)


class NumericalError(FloatingPointError):
    """A NaN/Inf showed up in a gradient or loss."""


# -- losses ------------------------------------------------------------

def loc_loss(p_start: Tensor, p_end: Tensor, y_start, y_end) -> Tensor:
    """Half the sum of start and end cross-entropies, averaged over the batch."""
    return ag.scale(ag.cross_entropy(p_start, y_start) + ag.cross_entropy(p_end, y_end), 0.5)


def orthogonality_penalty(e_lab: Tensor) -> Tensor:
    """Squared Frobenius norm of the off-diagonal part of ``E^T E``."""
    gram = ag.transpose(e_lab) @ e_lab
    k = gram.shape[0]
    off = gram * ag.Tensor((1.0 - np.eye(k)).astype(e_lab.dtype))
    return (off * off).sum()


def seq_loss(labels_soft: Tensor, y_lab, e_lab: Tensor | None, mask) -> Tensor:
    """Frame-level label cross-entropy (class axis 1) plus the orthogonality term."""
    xe = ag.cross_entropy(labels_soft, y_lab, mask=mask, axis=1)
    return xe if e_lab is None else xe + orthogonality_penalty(e_lab)


def total_loss(model: SeqPAN, trace: ForwardTrace, batch: Batch) -> tuple[Tensor, dict[str, float]]:
    dtype = trace.p_start.dtype
    loc = loc_loss(trace.p_start, trace.p_end, batch.start_onehot(dtype), batch.end_onehot(dtype))
    mm = model.config.match_mode
    parts = {"loc": float(loc.data)}
    if mm is MatchMode.NONE:
        return loc, parts
    mask = np.asarray(batch.video_mask, dtype=bool)
    if mm is MatchMode.FB_MATCH:
        y = np.stack([1 - batch.fb, batch.fb], axis=1).astype(dtype)
        seq = seq_loss(trace.labels_soft, y, None, mask)
    else:
        y = np.eye(4, dtype=dtype)[batch.bieo].transpose(0, 2, 1)
        e_lab = model.label_emb.table if model.label_emb is not None else None
        seq = seq_loss(trace.labels_soft, y, e_lab, mask)
    parts["seq"] = float(seq.data)
    return loc + seq, parts


# -- optimisation ------------------------------------------------------

def lr_schedule(epoch: int, base_lr: float, epochs: int) -> float:
    """Linear decay ``base_lr * (1 - epoch / epochs)``; epochs count from 0."""
    if not 0 <= epoch < epochs:
        raise ValueError(f"epoch {epoch} outside [0, {epochs})")
    return base_lr * (1.0 - epoch / epochs)


def clip_grad_norm(params: list[Tensor], max_norm: float) -> float:
    """Rescale gradients so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    grads = [p.grad for p in params if p.grad is not None]
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads))
    if norm > max_norm:
        c = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * np.asarray(c, dtype=p.grad.dtype)
    return norm


class Adam:
    """Adam with bias correction and decoupled weight decay."""

    def __init__(self, params: list[Tensor], names: list[str] | None = None, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.01, clip_norm: float | None = 1.0):
        self.params = list(params)
        self.names = names or [f"param{i}" for i in range(len(self.params))]
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr: float) -> float:
        for name, p in zip(self.names, self.params):
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise NumericalError(f"non-finite gradient in parameter {name}")
        norm = clip_grad_norm(self.params, self.clip_norm) if self.clip_norm else float("nan")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            update = (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data = (p.data - lr * update).astype(p.dtype)
        return norm

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


# -- loop --------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 16
    lr: float = 1e-4
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    patience: int = 10
    seed: int = 0


@dataclass
class EpochLog:
    epoch: int
    lr: float
    train_loss: float
    report: EvalReport

    def line(self) -> str:
        r = self.report
        return (f"{self.epoch},{self.lr:.6g},{self.train_loss:.6f},"
                f"{r.r1[0.3]:.6f},{r.r1[0.5]:.6f},{r.r1[0.7]:.6f},{r.miou:.6f}")


METRIC_LOG_HEADER = "epoch,lr,train_loss,r1@0.3,r1@0.5,r1@0.7,miou"


@dataclass
class TrainResult:
    best_state: dict[str, np.ndarray]
    best_epoch: int
    best_report: EvalReport
    log: list[EpochLog] = field(default_factory=list)
    stopped_early: bool = False
    seconds: float = 0.0

    def metric_log(self) -> str:
        return "\n".join([METRIC_LOG_HEADER] + [e.line() for e in self.log]) + "\n"


def train_step(model: SeqPAN, opt: Adam, batch: Batch, lr: float, rng: np.random.Generator) -> float:
    model.train()
    trace = model.forward(batch, rng)
    loss, _ = total_loss(model, trace, batch)
    if not np.isfinite(loss.data):
        raise NumericalError(f"non-finite loss {float(loss.data)}")
    opt.zero_grad()
    loss.backward()
    opt.step(lr)
    return float(loss.data)


def train_loop(model: SeqPAN, train_set, val_set, cfg: TrainConfig, evaluate=None,
               on_epoch=None) -> TrainResult:
    """Shuffle, batch, step; evaluate after every epoch; keep the best mIoU.

    Stops after ``cfg.patience`` epochs without improvement. ``evaluate``
    (model, dataset) -> EvalReport can be swapped out for testing.
    """
    if len(train_set) == 0:
        raise ValueError("training set is empty")
    evaluate = evaluate or evaluate_model
    rng = np.random.default_rng(cfg.seed)
    names, params = zip(*model.named_parameters())
    opt = Adam(list(params), list(names), weight_decay=cfg.weight_decay, clip_norm=cfg.clip_norm)
    result = TrainResult(best_state=_snapshot(model), best_epoch=-1, best_report=None)
    best = -math.inf
    stale = 0
    t0 = time.perf_counter()
    for epoch in range(cfg.epochs):
        lr = lr_schedule(epoch, cfg.lr, cfg.epochs)
        losses = []
        for batch in train_set.batches(cfg.batch_size, rng):
            losses.append(train_step(model, opt, batch, lr, rng) * len(batch))
        train_loss = sum(losses) / len(train_set)
        report = evaluate(model, val_set)
        entry = EpochLog(epoch, lr, train_loss, report)
        result.log.append(entry)
        logger.info(entry.line())
        if on_epoch is not None:
            on_epoch(entry)
        if report.miou > best:
            best, stale = report.miou, 0
            result.best_state = _snapshot(model)
            result.best_epoch, result.best_report = epoch, report
        else:
            stale += 1
            if stale >= cfg.patience:
                result.stopped_early = True
                break
    result.seconds = time.perf_counter() - t0
    return result


def _snapshot(model: SeqPAN) -> dict[str, np.ndarray]:
    return {k: v.copy() for k, v in model.state_dict().items()}
