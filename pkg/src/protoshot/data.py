"""Manifest ingestion, leak-free video-level splitting, filtering, image
preprocessing, rotation augmentation, and K-way N-shot episode sampling.

Manifest schema (UTF-8 CSV with a mandatory header)::

    path,class,video_id,probe,luss

``class`` holds a class name; names are mapped to ids by sorted order.
``probe`` is ``convex`` or ``linear``; ``luss`` is an optional 0..3 severity
score and may be left empty.
"""

from __future__ import annotations

import csv
import io
import logging
from collections import defaultdict
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from . import tensor as T
from .errors import DataError

log = logging.getLogger(__name__)

MANIFEST_COLUMNS = ("path", "class", "video_id", "probe", "luss")
PROBES = ("convex", "linear")
LUSS_RANGE = (0, 1, 2, 3)


@dataclass(frozen=True)
class SampleRecord:
    image_path: str
    class_id: int
    class_name: str
    video_id: str
    probe: str
    luss: int | None = None


@dataclass
class Manifest:
    records: list[SampleRecord]
    class_names: list[str]

    @property
    def way(self) -> int:
        return len(self.class_names)


@dataclass
class SplitPair:
    train: list[SampleRecord]
    test: list[SampleRecord]


@dataclass
class LussFilterReport:
    kept: int = 0
    removed: int = 0
    missing_luss: int = 0


@dataclass
class Episode:
    """One K-way N-shot task with stacked support and query batches."""

    way: int
    shot: int
    query_count: int
    support_x: np.ndarray
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray

    def __post_init__(self):
        k, n, m = self.way, self.shot, self.query_count
        if self.support_x.shape[0] != k * n or self.support_y.shape != (k * n,):
            raise DataError(f"episode support size {self.support_x.shape[0]} != way*shot {k * n}")
        if self.query_x.shape[0] != k * m or self.query_y.shape != (k * m,):
            raise DataError(f"episode query size {self.query_x.shape[0]} != way*query {k * m}")
        for y, count, kind in ((self.support_y, n, "support"), (self.query_y, m, "query")):
            per_class = np.bincount(y, minlength=k)
            if per_class.shape[0] != k or not (per_class == count).all():
                raise DataError(f"episode {kind} set is not class-balanced: {per_class.tolist()}")


# ---------------------------------------------------------------------------
# manifest I/O


def load_manifest(path) -> Manifest:
    """Parse a manifest file; all malformed rows are reported with line numbers."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file, expected header {','.join(MANIFEST_COLUMNS)}")
        if tuple(h.strip() for h in header) != MANIFEST_COLUMNS:
            raise DataError(
                f"{path}: header {','.join(header)!r} does not match {','.join(MANIFEST_COLUMNS)!r}"
            )
        rows = []
        problems = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(MANIFEST_COLUMNS):
                problems.append(f"line {lineno}: expected {len(MANIFEST_COLUMNS)} fields, got {len(row)}")
                continue
            img, cls, video, probe, luss_raw = (c.strip() for c in row)
            if not img:
                problems.append(f"line {lineno}: field 'path' is empty")
            if not cls:
                problems.append(f"line {lineno}: field 'class' is empty")
            if not video:
                problems.append(f"line {lineno}: field 'video_id' is empty")
            if probe not in PROBES:
                problems.append(f"line {lineno}: field 'probe' must be one of {PROBES}, got {probe!r}")
            luss: int | None = None
            if luss_raw:
                try:
                    luss = int(luss_raw)
                except ValueError:
                    problems.append(f"line {lineno}: field 'luss' is not an integer: {luss_raw!r}")
                    luss = None
                else:
                    if luss not in LUSS_RANGE:
                        problems.append(f"line {lineno}: field 'luss' out of range [0,3]: {luss}")
            rows.append((img, cls, video, probe, luss))
        if problems:
            raise DataError(f"{path}: " + "; ".join(problems))
    class_names = sorted({cls for _, cls, _, _, _ in rows})
    ids = {name: i for i, name in enumerate(class_names)}
    records = [
        SampleRecord(image_path=img, class_id=ids[cls], class_name=cls,
                     video_id=video, probe=probe, luss=luss)
        for img, cls, video, probe, luss in rows
    ]
    return Manifest(records=records, class_names=class_names)


def write_manifest(path, records: list[SampleRecord]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_COLUMNS)
        for r in records:
            writer.writerow(
                [r.image_path, r.class_name, r.video_id, r.probe, "" if r.luss is None else r.luss]
            )


# ---------------------------------------------------------------------------
# record filtering


def filter_convex(records: list[SampleRecord]) -> list[SampleRecord]:
    """Keep only convex-probe records."""
    return [r for r in records if r.probe == "convex"]


def filter_luss(
    records: list[SampleRecord],
    normal_scores: set[int],
    covid_scores: set[int],
    normal_class_id: int,
    covid_class_id: int,
) -> tuple[list[SampleRecord], LussFilterReport]:
    """Severity filter: keep normal-class records whose score is in
    ``normal_scores`` and covid-class records whose score is in
    ``covid_scores``; other classes pass through untouched. Records in a
    filtered class without a score are excluded and counted."""
    for name, scores in (("normal_scores", normal_scores), ("covid_scores", covid_scores)):
        bad = set(scores) - set(LUSS_RANGE)
        if bad:
            raise DataError(f"filter_luss: {name} contains values outside [0,3]: {sorted(bad)}")
    wanted = {normal_class_id: set(normal_scores), covid_class_id: set(covid_scores)}
    report = LussFilterReport()
    kept = []
    for r in records:
        scores = wanted.get(r.class_id)
        if scores is None:
            kept.append(r)
            continue
        if r.luss is None:
            report.missing_luss += 1
            report.removed += 1
        elif r.luss in scores:
            kept.append(r)
            report.kept += 1
        else:
            report.removed += 1
    return kept, report


# ---------------------------------------------------------------------------
# video-level split


def split_by_video(records: list[SampleRecord], train_fraction: float, seed: int) -> SplitPair:
    """Assign whole videos to train/test per class, targeting the frame fraction.

    Greedy: within each class, videos are taken largest-first (seeded shuffle
    breaks size ties) and assigned to whichever split is furthest below its
    frame target. Classes with at least two videos always land in both splits;
    a single-video class goes entirely to train with a warning.
    """
    if not 0.0 < train_fraction < 1.0:
        raise DataError(f"train_fraction must be in (0,1), got {train_fraction}")
    rng = np.random.default_rng(seed)
    by_class: dict[int, dict[str, list[SampleRecord]]] = defaultdict(lambda: defaultdict(list))
    for r in records:
        by_class[r.class_id][r.video_id].append(r)
    train: list[SampleRecord] = []
    test: list[SampleRecord] = []
    for class_id in sorted(by_class):
        videos = by_class[class_id]
        names = sorted(videos)
        if len(names) == 1:
            log.warning(
                "class %d has a single video (%s); all %d frames go to train",
                class_id, names[0], len(videos[names[0]]),
            )
            train.extend(videos[names[0]])
            continue
        order = list(rng.permutation(len(names)))
        names = [names[i] for i in order]
        names.sort(key=lambda v: -len(videos[v]))  # stable: ties stay in shuffled order
        total = sum(len(videos[v]) for v in names)
        deficit = {"train": train_fraction * total, "test": (1.0 - train_fraction) * total}
        assigned = {"train": [], "test": []}
        for v in names:
            side = "train" if deficit["train"] >= deficit["test"] else "test"
            assigned[side].append(v)
            deficit[side] -= len(videos[v])
        for side in ("train", "test"):
            if not assigned[side]:
                other = "test" if side == "train" else "train"
                moved = min(assigned[other], key=lambda v: len(videos[v]))
                assigned[other].remove(moved)
                assigned[side].append(moved)
        for v in assigned["train"]:
            train.extend(videos[v])
        for v in assigned["test"]:
            test.extend(videos[v])
    return SplitPair(train=train, test=test)


# ---------------------------------------------------------------------------
# augmentation and preprocessing


def augment_rotations(images) -> list[np.ndarray]:
    """Expand each square image into {original, rot90, rot180, rot270}."""
    out = []
    for i, img in enumerate(images):
        arr = np.asarray(img)
        if arr.ndim == 2:
            h, w = arr.shape
            axes = (0, 1)
        elif arr.ndim == 3:
            h, w = arr.shape[1], arr.shape[2]
            axes = (1, 2)
        else:
            raise DataError(f"augment_rotations: image {i} has unsupported ndim {arr.ndim}")
        if h != w:
            raise DataError(f"augment_rotations: image {i} is not square ({h}x{w})")
        out.append(arr)
        for k in (1, 2, 3):
            out.append(np.rot90(arr, k=k, axes=axes))
    return out


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Separable bilinear interpolation with half-pixel centers, edges clamped."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img.copy()

    def _axis(n_in: int, n_out: int):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1.0)
        lo = np.floor(src).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        frac = src - lo
        return lo, hi, frac

    y0, y1, fy = _axis(h, out_h)
    x0, x1, fx = _axis(w, out_w)
    top = img[np.ix_(y0, x0)] * (1 - fx)[None, :] + img[np.ix_(y0, x1)] * fx[None, :]
    bot = img[np.ix_(y1, x0)] * (1 - fx)[None, :] + img[np.ix_(y1, x1)] * fx[None, :]
    return top * (1 - fy)[:, None] + bot * fy[:, None]


def _decode_image(source, channels: int) -> np.ndarray:
    """Decode to a float array in [0,1] of shape (channels, H, W)."""
    if isinstance(source, np.ndarray):
        arr = source
        if arr.ndim == 2:
            arr = arr[None]
        if arr.shape[0] not in (1, 3):
            raise DataError(f"array image must have 1 or 3 leading channels, got {arr.shape}")
        if arr.dtype == np.uint8:
            arr = arr.astype(np.float64) / 255.0
        else:
            arr = arr.astype(np.float64)
        if channels == 1 and arr.shape[0] == 3:
            arr = arr.mean(axis=0, keepdims=True)
        elif channels == 3 and arr.shape[0] == 1:
            arr = np.repeat(arr, 3, axis=0)
        return arr
    if isinstance(source, (bytes, bytearray)):
        fh, name = io.BytesIO(source), "<bytes>"
    else:
        fh, name = source, str(source)
    try:
        with Image.open(fh) as im:
            im = im.convert("L" if channels == 1 else "RGB")
            arr = np.asarray(im, dtype=np.float64) / 255.0
    except (UnidentifiedImageError, OSError) as exc:
        raise DataError(f"cannot decode image: {name}") from exc
    if arr.ndim == 2:
        return arr[None]
    return arr.transpose(2, 0, 1)


def preprocess(source, target_size: int, crop_top_fraction: float = 0.0, channels: int = 1) -> T.Tensor:
    """Crop the top fraction of rows, resize bilinearly, and scale to [0,1].

    ``source`` may be an image file path, encoded bytes, or an array shaped
    (H,W) or (C,H,W). Returns a (channels, target_size, target_size) tensor.
    """
    if not 0.0 <= crop_top_fraction < 1.0:
        raise DataError(f"crop_top_fraction must be in [0,1), got {crop_top_fraction}")
    if target_size < 1:
        raise DataError(f"target_size must be >= 1, got {target_size}")
    arr = _decode_image(source, channels)
    h = arr.shape[1]
    drop = int(h * crop_top_fraction)
    if drop >= h:
        raise DataError(f"crop_top_fraction {crop_top_fraction} removes all {h} rows")
    arr = arr[:, drop:, :]
    resized = np.stack([bilinear_resize(c, target_size, target_size) for c in arr])
    return T.Tensor(resized.astype(np.float32))


# ---------------------------------------------------------------------------
# scenario remapping


def remap_scenario(
    manifest: Manifest,
    ways: int,
    positive_class: str = "covid",
    excluded_class: str = "other",
    negative_name: str = "negative",
) -> Manifest:
    """Regroup dataset classes into a 2-, 3-, or 4-way task.

    2-way: ``positive_class`` versus everything else, renamed ``negative_name``.
    3-way: drop ``excluded_class`` rows, keep the remaining classes.
    4-way: identity.
    """
    if ways not in (2, 3, 4):
        raise DataError(f"scenario ways must be 2, 3 or 4, got {ways}")
    if ways == 4:
        return Manifest(records=list(manifest.records), class_names=list(manifest.class_names))
    if positive_class not in manifest.class_names:
        raise DataError(
            f"positive class {positive_class!r} not in manifest classes {manifest.class_names}"
        )
    if ways == 2:
        renamed = [
            replace(r, class_name=r.class_name if r.class_name == positive_class else negative_name)
            for r in manifest.records
        ]
    else:
        renamed = [r for r in manifest.records if r.class_name != excluded_class]
        if len({r.class_name for r in renamed}) != 3:
            raise DataError(
                f"3-way scenario expects 3 classes after excluding {excluded_class!r}, "
                f"got {sorted({r.class_name for r in renamed})}"
            )
    names = sorted({r.class_name for r in renamed})
    ids = {name: i for i, name in enumerate(names)}
    records = [replace(r, class_id=ids[r.class_name]) for r in renamed]
    return Manifest(records=records, class_names=names)


# ---------------------------------------------------------------------------
# episode sampling


def sample_episode_indices(
    pool_sizes: dict[int, int], way: int, shot: int, query: int, rng: np.random.Generator
) -> tuple[dict[int, np.ndarray], dict[int, np.ndarray]]:
    """Draw disjoint support/query index sets per class, without replacement."""
    if sorted(pool_sizes) != list(range(way)):
        raise DataError(f"expected classes 0..{way - 1}, got {sorted(pool_sizes)}")
    support_idx, query_idx = {}, {}
    for class_id in range(way):
        n = pool_sizes[class_id]
        if n < shot + query:
            raise DataError(
                f"class {class_id} has {n} samples, episode needs shot+query = {shot + query}"
            )
        perm = rng.permutation(n)[: shot + query]
        support_idx[class_id] = perm[:shot]
        query_idx[class_id] = perm[shot:]
    return support_idx, query_idx


class EpisodeSampler:
    """Seeded episodic sampler over per-class sample pools.

    Pools map class id -> array of samples (first axis indexes samples).
    Child samplers from :meth:`spawn` draw independent deterministic
    substreams, so parallel consumers never overlap.
    """

    def __init__(self, pools: dict[int, np.ndarray], way: int, shot: int, query: int, seed):
        if way != len(pools):
            raise DataError(f"sampler got {len(pools)} classes for a {way}-way task")
        if shot < 1 or query < 1:
            raise DataError(f"shot and query must be >= 1, got shot={shot} query={query}")
        self.pools = {int(k): np.asarray(v) for k, v in pools.items()}
        self.way = way
        self.shot = shot
        self.query = query
        self._seq = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
        self._rng = np.random.default_rng(self._seq)

    def spawn(self, n: int) -> list["EpisodeSampler"]:
        return [
            EpisodeSampler(self.pools, self.way, self.shot, self.query, child)
            for child in self._seq.spawn(n)
        ]

    def sample_indices(self):
        sizes = {k: len(v) for k, v in self.pools.items()}
        return sample_episode_indices(sizes, self.way, self.shot, self.query, self._rng)

    def sample(self) -> Episode:
        support_idx, query_idx = self.sample_indices()
        sx, sy, qx, qy = [], [], [], []
        for class_id in range(self.way):
            pool = self.pools[class_id]
            sx.append(pool[support_idx[class_id]])
            qx.append(pool[query_idx[class_id]])
            sy.append(np.full(self.shot, class_id, dtype=np.int64))
            qy.append(np.full(self.query, class_id, dtype=np.int64))
        return Episode(
            way=self.way,
            shot=self.shot,
            query_count=self.query,
            support_x=np.concatenate(sx),
            support_y=np.concatenate(sy),
            query_x=np.concatenate(qx),
            query_y=np.concatenate(qy),
        )


def pools_from_records(
    records: list[SampleRecord],
    target_size: int,
    crop_top_fraction: float = 0.0,
    channels: int = 1,
    augment: bool = False,
    root=None,
) -> dict[int, np.ndarray]:
    """Materialize per-class image arrays from manifest records."""
    by_class: dict[int, list[np.ndarray]] = defaultdict(list)
    for r in records:
        path = Path(root) / r.image_path if root is not None else Path(r.image_path)
        img = preprocess(path, target_size, crop_top_fraction, channels).data
        by_class[r.class_id].append(img)
    pools = {}
    for class_id, imgs in by_class.items():
        if augment:
            imgs = augment_rotations(imgs)
        pools[class_id] = np.stack(imgs)
    return pools
