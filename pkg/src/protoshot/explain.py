"""Grad-CAM saliency over the conv-net encoder, plus overlay rendering and
high-confidence sample selection.

The differentiated class score is the log-probability the prototype head
assigns to the target class. Channel weights are spatial means of the score
gradient at the last conv block's post-relu activations; the weighted, relu-
rectified sum is bilinearly upsampled to the input size and max-normalized.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import bilinear_resize
from .errors import ConfigError, DataError, NumericalError, ShapeError
from .head import PrototypeSet, classify_batch
from .metrics import QueryOutcome

TAG_HIGH_CONFIDENCE = "high-confidence"
TAG_MISCLASSIFIED = "misclassified"


@dataclass
class SaliencyMap:
    grid: np.ndarray  # (input_size, input_size), values in [0,1]
    source_shape: tuple[int, int]  # resolution of the conv maps it came from

    def __post_init__(self):
        if self.grid.min() < 0.0 or self.grid.max() > 1.0:
            raise NumericalError("saliency values must lie in [0,1]")


def gradcam(model, image, target_class: int, protos: PrototypeSet) -> SaliencyMap:
    """Saliency for one image w.r.t. the prototype-head score of target_class."""
    if model.config.archetype != "conv-net":
        raise ConfigError(
            "gradcam needs a conv-net encoder; frozen-embed models have no "
            "convolutional activation maps to attribute over"
        )
    if not 0 <= target_class < protos.way:
        raise DataError(f"target_class {target_class} out of range [0,{protos.way})")
    arr = np.asarray(image, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    model.params.zero_grads()
    capture: dict = {}
    emb = model.embed(arr, capture=capture)
    # prototypes are a fixed snapshot of the classifier, not attribution targets
    frozen = PrototypeSet(tensor=protos.tensor.detach(), way=protos.way, dim=protos.dim)
    scores = classify_batch(emb, frozen, model.distance)
    score = T.take(scores.log_probs, (0, target_class))
    score.backward()
    acts = capture["last_conv"]
    if acts.grad is None:
        grad = np.zeros_like(acts.data)
    else:
        grad = acts.grad
    if not np.isfinite(grad).all():
        raise NumericalError("gradcam: non-finite gradients at the last conv layer")
    weights = grad.mean(axis=(2, 3), keepdims=True)
    cam = np.maximum((weights * acts.data).sum(axis=1)[0], 0.0)
    size = model.config.input_size
    up = np.maximum(bilinear_resize(cam, size, size), 0.0)
    peak = up.max()
    if peak > 0:
        up = up / peak
    return SaliencyMap(grid=up.astype(np.float32), source_shape=cam.shape)


def heat_ramp(values: np.ndarray) -> np.ndarray:
    """Monotone cold-to-hot ramp: dark blue -> red -> yellow, uint8 RGB.

    R = clip(2v, 0, 1), G = clip(2v - 1, 0, 1), B = clip(1 - 2v, 0, 1) / 2,
    each scaled to 0..255.
    """
    v = np.asarray(values, dtype=np.float64)
    r = np.clip(2.0 * v, 0.0, 1.0)
    g = np.clip(2.0 * v - 1.0, 0.0, 1.0)
    b = np.clip(1.0 - 2.0 * v, 0.0, 1.0) * 0.5
    return np.clip(np.rint(np.stack([r, g, b], axis=-1) * 255.0), 0, 255).astype(np.uint8)


def overlay(image, saliency, alpha: float) -> np.ndarray:
    """Blend a grayscale image with the heat ramp of a saliency grid.

    Returns uint8 RGB of shape (H, W, 3); alpha 0 keeps the image bytes.
    """
    if not 0.0 <= alpha <= 1.0:
        raise DataError(f"alpha must be in [0,1], got {alpha}")
    grid = saliency.grid if isinstance(saliency, SaliencyMap) else np.asarray(saliency)
    arr = np.asarray(image)
    if arr.ndim == 3 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.ndim != 2:
        raise ShapeError(f"overlay expects a grayscale image, got shape {np.asarray(image).shape}")
    if arr.shape != grid.shape:
        raise ShapeError(f"overlay: image shape {arr.shape} != saliency shape {grid.shape}")
    if arr.dtype == np.uint8:
        gray = arr.astype(np.float64)
    else:
        gray = np.clip(arr.astype(np.float64), 0.0, 1.0) * 255.0
    gray_rgb = np.repeat(gray[:, :, None], 3, axis=2)
    heat = heat_ramp(grid).astype(np.float64)
    blended = (1.0 - alpha) * gray_rgb + alpha * heat
    return np.clip(np.rint(blended), 0, 255).astype(np.uint8)


@dataclass
class SelectedSample:
    tag: str
    outcome: QueryOutcome


def select_high_confidence(outcomes, threshold: float) -> list[SelectedSample]:
    """Tag correctly classified queries above the probability threshold and
    every misclassified query."""
    if not 0.0 <= threshold < 1.0:
        raise DataError(f"threshold must be in [0,1), got {threshold}")
    selected = []
    for o in outcomes:
        if o.predicted == o.true:
            if o.prob_true > threshold:
                selected.append(SelectedSample(tag=TAG_HIGH_CONFIDENCE, outcome=o))
        else:
            selected.append(SelectedSample(tag=TAG_MISCLASSIFIED, outcome=o))
    return selected


def save_saliency_grid(path, saliency: SaliencyMap) -> None:
    np.savetxt(path, saliency.grid, fmt="%.6f", delimiter="\t")
