"""Prototype head: class prototypes, distance scoring, and the episode loss.

Distances default to squared Euclidean; the plain Euclidean (square-root)
form is available behind the ``distance`` switch for comparison runs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DataError, NumericalError, ShapeError

PROB_FLOOR = 1e-12
_LOG_FLOOR = math.log(PROB_FLOOR)

DISTANCES = ("squared", "euclidean")


@dataclass
class PrototypeSet:
    """One prototype vector per class, rows indexed by class id."""

    tensor: T.Tensor  # (way, dim)
    way: int
    dim: int

    def __post_init__(self):
        if self.tensor.shape != (self.way, self.dim):
            raise ShapeError(
                f"PrototypeSet: tensor shape {self.tensor.shape} != ({self.way},{self.dim})"
            )
        if not np.isfinite(self.tensor.data).all():
            raise NumericalError("PrototypeSet: prototypes contain non-finite values")

    def vector(self, class_id: int) -> np.ndarray:
        return self.tensor.data[class_id]


@dataclass
class ClassDistribution:
    """Probabilities over the episode's classes; sums to one."""

    probabilities: np.ndarray

    def __post_init__(self):
        self.probabilities = np.asarray(self.probabilities, dtype=np.float64)


@dataclass
class EpisodeScores:
    """Batched classification of query embeddings against a PrototypeSet."""

    log_probs: T.Tensor  # (M, way), stays in the autodiff graph
    probabilities: np.ndarray  # (M, way)
    predicted: np.ndarray  # (M,)

    def distribution(self, i: int) -> ClassDistribution:
        return ClassDistribution(self.probabilities[i])


@dataclass
class LossStats:
    """Counts probability-floor clamp events inside episode_loss."""

    clamped: int = 0


def compute_prototypes(embeddings: T.Tensor, labels, way: int) -> PrototypeSet:
    """Average the support embeddings of each class into its prototype.

    ``embeddings`` is the (n, dim) support batch; ``labels`` holds a class id
    in [0, way) per row. Every class must contribute at least one row.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if embeddings.ndim != 2:
        raise ShapeError(f"compute_prototypes: embeddings must be 2-D, got {embeddings.shape}")
    if labels.shape != (embeddings.shape[0],):
        raise ShapeError(
            f"compute_prototypes: {labels.shape[0]} labels for {embeddings.shape[0]} embeddings"
        )
    if labels.min(initial=0) < 0 or labels.max(initial=-1) >= way:
        raise DataError(f"compute_prototypes: labels out of range for {way}-way episode")
    counts = np.bincount(labels, minlength=way)
    empty = np.flatnonzero(counts == 0)
    if empty.size:
        raise DataError(f"compute_prototypes: class {int(empty[0])} has no support embeddings")
    averager = np.zeros((way, labels.size), dtype=embeddings.dtype)
    averager[labels, np.arange(labels.size)] = 1.0 / counts[labels]
    protos = T.matmul(T.Tensor(averager), embeddings)
    return PrototypeSet(tensor=protos, way=way, dim=embeddings.shape[1])


def sq_euclidean(v, q) -> float:
    """Sum of squared coordinate differences (no square root)."""
    v = np.asarray(v, dtype=np.float64).ravel()
    q = np.asarray(q, dtype=np.float64).ravel()
    if v.shape != q.shape:
        raise ShapeError(f"sq_euclidean: length mismatch, {v.shape[0]} != {q.shape[0]}")
    d = v - q
    return float(np.dot(d, d))


def _distance_tensor(query_embeddings: T.Tensor, protos: PrototypeSet, distance: str) -> T.Tensor:
    if distance not in DISTANCES:
        raise ShapeError(f"unknown distance '{distance}', expected one of {DISTANCES}")
    d = T.pairwise_sq_dist(query_embeddings, protos.tensor)
    if distance == "euclidean":
        d = T.sqrt(d)
    return d


def classify_batch(
    query_embeddings: T.Tensor, protos: PrototypeSet, distance: str = "squared"
) -> EpisodeScores:
    """Softmax over negative prototype distances for a batch of queries."""
    d = _distance_tensor(query_embeddings, protos, distance)
    log_probs = T.log_softmax(T.scale(d, -1.0))
    probabilities = np.exp(log_probs.data)
    predicted = probabilities.argmax(axis=1)  # argmax takes the lowest index on ties
    return EpisodeScores(log_probs=log_probs, probabilities=probabilities, predicted=predicted)


def classify(query_embedding, protos: PrototypeSet, distance: str = "squared"):
    """Classify one query vector; returns (ClassDistribution, predicted class id).

    This path is pure float64 numpy, used for reporting and property checks;
    the differentiable batch path is classify_batch.
    """
    if distance not in DISTANCES:
        raise ShapeError(f"unknown distance '{distance}', expected one of {DISTANCES}")
    q = np.asarray(
        query_embedding.data if isinstance(query_embedding, T.Tensor) else query_embedding,
        dtype=np.float64,
    ).ravel()
    if q.shape[0] != protos.dim:
        raise ShapeError(f"classify: query length {q.shape[0]} != prototype dim {protos.dim}")
    diff = protos.tensor.data.astype(np.float64) - q[None, :]
    d = (diff * diff).sum(axis=1)
    if distance == "euclidean":
        d = np.sqrt(d)
    z = -d
    z -= z.max()
    e = np.exp(z)
    p = e / e.sum()
    return ClassDistribution(p), int(p.argmax())


def episode_loss(scores, true_labels, stats: LossStats | None = None) -> T.Tensor:
    """Mean negative log-probability of the true class over the query batch.

    ``scores`` is either an EpisodeScores (differentiable path) or a sequence
    of ClassDistribution (plain probabilities). True-class probabilities below
    PROB_FLOOR are clamped before the log and the event is counted in
    ``stats`` when given.
    """
    probs = None
    if isinstance(scores, EpisodeScores):
        log_probs = scores.log_probs
    else:
        probs = np.stack([np.asarray(d.probabilities, dtype=np.float64) for d in scores])
        log_probs = T.Tensor(np.log(np.maximum(probs, PROB_FLOOR)), dtype=np.float64)
    labels = np.asarray(true_labels, dtype=np.int64)
    m, way = log_probs.shape
    if labels.shape != (m,):
        raise ShapeError(f"episode_loss: {labels.shape[0] if labels.ndim else 0} labels for {m} queries")
    if labels.min(initial=0) < 0 or labels.max(initial=-1) >= way:
        raise DataError(f"episode_loss: labels out of range for {way} classes")
    if stats is not None:
        if probs is not None:
            clamped = probs[np.arange(m), labels] < PROB_FLOOR
        else:
            clamped = log_probs.data[np.arange(m), labels] < _LOG_FLOOR
        stats.clamped += int(clamped.sum())
    one_hot = np.zeros((m, way), dtype=log_probs.dtype)
    one_hot[np.arange(m), labels] = 1.0
    picked_sum = T.mul(T.clip_min(log_probs, _LOG_FLOOR), T.Tensor(one_hot)).sum()
    return T.scale(picked_sum, -1.0 / m)
