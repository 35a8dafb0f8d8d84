"""Procedural desk-scale datasets: Gaussian blobs, striped textures, and a
planted-signal task for saliency localization checks."""

from __future__ import annotations

import numpy as np

from .errors import DataError


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def blob_pools(
    way: int = 2,
    dim: int = 8,
    per_class: int = 50,
    separation: float = 5.0,
    stddev: float = 1.0,
    seed=0,
) -> tuple[dict[int, np.ndarray], np.ndarray]:
    """Gaussian blobs whose class means differ by ``separation * stddev`` in
    every coordinate.

    Means are collinear: mean_k = k * separation * stddev * ones(dim), so
    adjacent classes are separation*stddev apart per component
    (separation * stddev * sqrt(dim) in Euclidean distance). Returns
    (pools, means).
    """
    if way < 2 or dim < 1:
        raise DataError(f"blob_pools: need way >= 2 and dim >= 1, got way={way} dim={dim}")
    rng = _rng(seed)
    means = np.stack([np.full(dim, k * separation * stddev) for k in range(way)])
    pools = {
        k: (means[k] + rng.normal(0.0, stddev, size=(per_class, dim))).astype(np.float32)
        for k in range(way)
    }
    return pools, means.astype(np.float32)


def _stripes(size: int, period: float, phase: float, horizontal: bool) -> np.ndarray:
    coord = np.arange(size, dtype=np.float64)
    wave = 0.5 + 0.35 * np.sin(2.0 * np.pi * (coord + phase) / period)
    return np.tile(wave[:, None], (1, size)) if horizontal else np.tile(wave[None, :], (size, 1))


def texture_pools(
    per_class: int = 60,
    size: int = 64,
    noise: float = 0.08,
    seed=0,
) -> dict[int, np.ndarray]:
    """Three texture classes: horizontal stripes, vertical streaks, blank noise."""
    rng = _rng(seed)
    pools: dict[int, np.ndarray] = {}
    for class_id in range(3):
        imgs = np.empty((per_class, 1, size, size), dtype=np.float32)
        for i in range(per_class):
            if class_id == 2:
                base = np.full((size, size), 0.5)
            else:
                period = rng.uniform(6.0, 14.0)
                phase = rng.uniform(0.0, period)
                base = _stripes(size, period, phase, horizontal=(class_id == 0))
            img = base + rng.normal(0.0, noise, size=(size, size))
            imgs[i, 0] = np.clip(img, 0.0, 1.0)
        pools[class_id] = imgs
    return pools


def planted_signal_pools(
    per_class: int = 60,
    size: int = 32,
    block: int | None = None,
    signal: float = 1.0,
    background: float = 0.05,
    noise: float = 0.03,
    seed=0,
) -> tuple[dict[int, np.ndarray], tuple[slice, slice]]:
    """Binary task whose positive evidence is a bright block inside one quadrant.

    Class 1 images carry a bright ``block``-sized square (default size // 3)
    placed uniformly at random inside the top-left quadrant; class 0 is
    background noise only. Returns (pools, quadrant) where quadrant is the
    (row, col) slice pair of the planted region.
    """
    half = size // 2
    if block is None:
        block = max(2, size // 3)
    if block > half:
        raise DataError(f"planted_signal_pools: block {block} exceeds quadrant side {half}")
    rng = _rng(seed)
    pools = {}
    for class_id in (0, 1):
        imgs = np.empty((per_class, 1, size, size), dtype=np.float32)
        for i in range(per_class):
            img = background + rng.normal(0.0, noise, size=(size, size))
            if class_id == 1:
                r = rng.integers(0, half - block + 1)
                c = rng.integers(0, half - block + 1)
                img[r : r + block, c : c + block] = signal
            imgs[i, 0] = np.clip(img, 0.0, 1.0)
        pools[class_id] = imgs
    return pools, (slice(0, half), slice(0, half))
