"""Episodic training: Adam, plateau-based LR reduction, early stopping."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError
from .head import compute_prototypes, classify_batch, episode_loss

log = logging.getLogger(__name__)

STOP_COMPLETED = "completed"
STOP_EARLY = "early-stop"


@dataclass
class TrainConfig:
    ways: int = 2
    shots: int = 5
    query: int = 5
    epochs: int = 10
    episodes_per_epoch: int = 200
    lr0: float = 0.001
    plateau_patience: int = 3
    plateau_factor: float = 0.1
    early_stop_patience: int = 5
    min_delta: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.episodes_per_epoch < 1:
            raise ConfigError(f"episodes_per_epoch must be >= 1, got {self.episodes_per_epoch}")
        if not 0.0 < self.plateau_factor < 1.0:
            raise ConfigError(f"plateau_factor must be in (0,1), got {self.plateau_factor}")
        if self.lr0 <= 0.0:
            raise ConfigError(f"lr0 must be positive, got {self.lr0}")


class AdamState:
    """First/second moment accumulators mirroring the trainable parameters."""

    def __init__(self, params, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(t.data) for name, t in params.trainable_items()}
        self.v = {name: np.zeros_like(t.data) for name, t in params.trainable_items()}


def adam_step(params, state: AdamState, lr: float) -> bool:
    """One Adam update over the trainable parameters with populated grads.

    Returns False (and applies nothing) when any gradient is non-finite.
    """
    updates = []
    for name, tensor in params.trainable_items():
        g = tensor.grad
        if g is None:
            continue
        if not np.isfinite(g).all():
            log.warning("adam_step aborted: non-finite gradient in %s", name)
            return False
        updates.append((name, tensor, g))
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for name, tensor, g in updates:
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        tensor.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return True


class TrainingController:
    """Plateau LR reduction and early stopping on the epoch-mean loss.

    Improvement means beating the best loss seen so far by more than
    ``min_delta``. The plateau counter resets after each reduction; the
    early-stop counter only resets on improvement.
    """

    def __init__(self, plateau_patience: int, early_stop_patience: int, min_delta: float):
        self.plateau_patience = plateau_patience
        self.early_stop_patience = early_stop_patience
        self.min_delta = min_delta
        self.best: float | None = None
        self._plateau = 0
        self._stall = 0

    def update(self, loss: float) -> tuple[bool, bool]:
        """Feed one epoch-mean loss; returns (reduce_lr, stop)."""
        if self.best is None or loss < self.best - self.min_delta:
            self.best = loss
            self._plateau = 0
            self._stall = 0
            return False, False
        self._plateau += 1
        self._stall += 1
        reduce_lr = self._plateau >= self.plateau_patience
        if reduce_lr:
            self._plateau = 0
        return reduce_lr, self._stall >= self.early_stop_patience


@dataclass
class EpochStats:
    epoch: int
    mean_loss: float
    lr: float
    seconds: float


@dataclass
class TrainHistory:
    epochs: list[EpochStats] = field(default_factory=list)
    stop_reason: str = STOP_COMPLETED
    best_epoch: int = 0
    best_loss: float = float("inf")

    def to_tsv(self) -> str:
        lines = ["epoch\tmean_loss\tlr\tseconds"]
        for e in self.epochs:
            lines.append(f"{e.epoch}\t{e.mean_loss:.6f}\t{e.lr:.6g}\t{e.seconds:.3f}")
        lines.append(f"# stop_reason={self.stop_reason} best_epoch={self.best_epoch} "
                     f"best_loss={self.best_loss:.6f}")
        return "\n".join(lines) + "\n"


def run_epoch(model, sampler, config: TrainConfig, state: AdamState, lr: float) -> float:
    """Run episodes_per_epoch episodes, one optimizer step each; mean loss."""
    losses = []
    for i in range(config.episodes_per_epoch):
        try:
            episode = sampler.sample()
        except DataError as exc:
            raise DataError(f"epoch aborted at episode {i + 1}: {exc}") from exc
        model.params.zero_grads()
        support = model.embed(episode.support_x)
        protos = compute_prototypes(support, episode.support_y, episode.way)
        queries = model.embed(episode.query_x)
        scores = classify_batch(queries, protos, model.distance)
        loss = episode_loss(scores, episode.query_y)
        loss.backward()
        adam_step(model.params, state, lr)
        losses.append(loss.item())
    return float(np.mean(losses))


def fit(model, sampler, config: TrainConfig, checkpoint_path=None) -> tuple[object, TrainHistory]:
    """Train for up to config.epochs epochs with plateau LR decay and early stopping.

    The model is left holding the best-loss parameters; when
    ``checkpoint_path`` is given, a checkpoint is written at each new best.
    """
    state = AdamState(model.params)
    controller = TrainingController(
        config.plateau_patience, config.early_stop_patience, config.min_delta
    )
    history = TrainHistory()
    lr = config.lr0
    best_snapshot = model.params.snapshot()
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        mean_loss = run_epoch(model, sampler, config, state, lr)
        seconds = time.perf_counter() - t0
        history.epochs.append(EpochStats(epoch=epoch, mean_loss=mean_loss, lr=lr, seconds=seconds))
        if mean_loss < history.best_loss:
            history.best_loss = mean_loss
            history.best_epoch = epoch
            best_snapshot = model.params.snapshot()
            if checkpoint_path is not None:
                model.save(checkpoint_path)
        reduce_lr, stop = controller.update(mean_loss)
        if reduce_lr:
            lr *= config.plateau_factor
            log.info("epoch %d: plateau, lr reduced to %.3g", epoch, lr)
        if stop:
            history.stop_reason = STOP_EARLY
            log.info("epoch %d: early stop", epoch)
            break
    model.params.restore(best_snapshot)
    if checkpoint_path is not None:
        model.save(checkpoint_path)
    return model, history
