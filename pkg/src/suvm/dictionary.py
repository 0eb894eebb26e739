"""Visual dictionary: k-means words, nearest-centroid assignment, dense scanning."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .imaging import (
    DEFAULT_RATIO,
    GradientField,
    HogParams,
    InputError,
    MomentAccumulator,
    PcaProjection,
    build_pyramid,
    dense_positions,
    patch_descriptors,
    patch_pixels,
    pca_from_moments,
    sample_patches,
    window_descriptors,
)

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Word detections
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class WordDetection:
    word: int
    x: float
    y: float
    sx: float
    sy: float
    distance: float = 0.0
    layer: int = 0


class DetectionSet:
    """Column store of word detections for one image."""

    __slots__ = ("word", "x", "y", "sx", "sy", "distance", "layer")

    def __init__(self, word=(), x=(), y=(), sx=(), sy=(), distance=None, layer=None):
        self.word = np.asarray(word, dtype=np.int64)
        n = len(self.word)
        self.x = np.asarray(x, dtype=np.float64)
        self.y = np.asarray(y, dtype=np.float64)
        self.sx = np.asarray(sx, dtype=np.float64)
        self.sy = np.asarray(sy, dtype=np.float64)
        self.distance = np.zeros(n) if distance is None else np.asarray(distance, dtype=np.float64)
        self.layer = np.zeros(n, dtype=np.int64) if layer is None else np.asarray(layer, dtype=np.int64)

    @classmethod
    def from_list(cls, dets: Sequence[WordDetection]) -> "DetectionSet":
        if not dets:
            return cls()
        cols = list(zip(*[(d.word, d.x, d.y, d.sx, d.sy, d.distance, d.layer) for d in dets]))
        return cls(*cols)

    @classmethod
    def concat(cls, parts: Sequence["DetectionSet"]) -> "DetectionSet":
        parts = [p for p in parts if len(p)]
        if not parts:
            return cls()
        return cls(*[np.concatenate([getattr(p, name) for p in parts]) for name in cls.__slots__])

    def __len__(self) -> int:
        return len(self.word)

    def __getitem__(self, i):
        if isinstance(i, (int, np.integer)):
            return WordDetection(int(self.word[i]), float(self.x[i]), float(self.y[i]), float(self.sx[i]),
                                 float(self.sy[i]), float(self.distance[i]), int(self.layer[i]))
        return DetectionSet(*[getattr(self, name)[i] for name in self.__slots__])

    def __iter__(self) -> Iterator[WordDetection]:
        for i in range(len(self)):
            yield self[i]

    def select(self, mask) -> "DetectionSet":
        return self[np.asarray(mask)]

    def scaled(self, factor: float) -> "DetectionSet":
        return DetectionSet(self.word, self.x * factor, self.y * factor, self.sx * factor, self.sy * factor,
                            self.distance, self.layer)


# ---------------------------------------------------------------------------
# k-means
# ---------------------------------------------------------------------------


@dataclass
class KMeansResult:
    centroids: np.ndarray
    labels: np.ndarray
    inertia: float
    history: list[float]
    iterations: int


def _sq_dists(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    d2 = (X * X).sum(1)[:, None] - 2.0 * X @ C.T + (C * C).sum(1)[None, :]
    return np.maximum(d2, 0.0)


def _assign(X, C, chunk=8192):
    labels = np.empty(len(X), dtype=np.int64)
    dist = np.empty(len(X))
    for s in range(0, len(X), chunk):
        d2 = _sq_dists(X[s:s + chunk], C)
        labels[s:s + chunk] = d2.argmin(1)
        dist[s:s + chunk] = d2[np.arange(len(d2)), labels[s:s + chunk]]
    return labels, dist


def _kmeans_pp(X, k, rng):
    n = len(X)
    centers = [int(rng.integers(n))]
    closest = _sq_dists(X, X[centers[0]][None, :])[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            idx = int(rng.integers(n))
        else:
            idx = int(np.searchsorted(np.cumsum(closest), rng.random() * total))
            idx = min(idx, n - 1)
        centers.append(idx)
        closest = np.minimum(closest, _sq_dists(X, X[idx][None, :])[:, 0])
    return X[centers].copy()


def lloyd(X: np.ndarray, k: int, seed=0, max_iters: int = 100, tol: float = 1e-6,
          n_init: int = 4) -> KMeansResult:
    """Lloyd iterations from k-means++ seeds; best of ``n_init`` restarts.

    An empty cluster is re-seeded at the point farthest from its nearest
    centroid. Inertia is checked to be non-increasing on every iteration.
    """
    X = np.asarray(X, dtype=np.float64)
    if len(X) < k:
        raise InputError(f"k-means needs at least k={k} samples, got {len(X)}")
    if k < 2:
        raise InputError("k must be at least 2")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(max(n_init, 1)):
        C = _kmeans_pp(X, k, rng)
        labels, dist = _assign(X, C)
        history = [float(dist.sum())]
        it = 0
        for it in range(1, max_iters + 1):
            counts = np.bincount(labels, minlength=k)
            sums = np.zeros_like(C)
            np.add.at(sums, labels, X)
            newC = C.copy()
            filled = counts > 0
            newC[filled] = sums[filled] / counts[filled, None]
            empty = np.flatnonzero(~filled)
            if len(empty):
                order = np.argsort(-dist, kind="stable")
                for j, idx in zip(empty, order[: len(empty)]):
                    newC[j] = X[idx]
            shift = float(np.sqrt(((newC - C) ** 2).sum(1)).max())
            C = newC
            labels, dist = _assign(X, C)
            inertia = float(dist.sum())
            if inertia > history[-1] * (1 + 1e-12) + 1e-12:
                raise AssertionError(f"k-means inertia increased: {history[-1]} -> {inertia}")
            history.append(inertia)
            if shift < tol:
                break
        res = KMeansResult(C, labels, history[-1], history, it)
        if best is None or res.inertia < best.inertia:
            best = res
    return best


# ---------------------------------------------------------------------------
# Dictionary
# ---------------------------------------------------------------------------


def identity_pca(dim: int) -> PcaProjection:
    return PcaProjection(np.zeros(dim), np.eye(dim), np.ones(dim), np.full(dim, 1.0 / dim))


@dataclass
class VisualDictionary:
    centroids: np.ndarray  # k x d
    pca: PcaProjection
    window: tuple[int, int]
    counts: np.ndarray
    word_variance: np.ndarray  # isotropic per-dimension variance of each word
    mean_patches: np.ndarray | None = None  # k x h x w
    distance_quantiles: np.ndarray | None = None  # percentiles 0..100 of training distances
    hog: HogParams = field(default_factory=HogParams)

    def __post_init__(self):
        self.centroids = np.asarray(self.centroids, dtype=np.float64)
        if self.k < 2:
            raise InputError("a dictionary needs at least two words")
        if not np.all(np.isfinite(self.centroids)):
            raise InputError("non-finite centroid")
        self.window = (int(self.window[0]), int(self.window[1]))
        self.counts = np.asarray(self.counts, dtype=np.int64)

    @property
    def k(self) -> int:
        return len(self.centroids)

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]

    def cutoff(self, percentile: float | None) -> float | None:
        if percentile is None or self.distance_quantiles is None:
            return None
        q = self.distance_quantiles
        return float(np.interp(percentile, np.linspace(0, 100, len(q)), q))

    def encode(self, raw: np.ndarray) -> np.ndarray:
        return self.pca.project(raw)


def assign_words(descriptors: np.ndarray, centroids: np.ndarray, chunk: int = 4096):
    """Nearest centroid (Euclidean) per row; ties go to the lowest word id."""
    X = np.atleast_2d(np.asarray(descriptors, dtype=np.float64))
    C = np.asarray(centroids, dtype=np.float64)
    words = np.empty(len(X), dtype=np.int64)
    dists = np.empty(len(X))
    scale = 1e-9 * (1.0 + (C * C).sum(1).max())
    for s in range(0, len(X), chunk):
        xb = X[s:s + chunk]
        approx = _sq_dists(xb, C)
        best = approx.min(1)
        cand = approx <= (best + scale)[:, None]
        multi = np.flatnonzero(cand.sum(1) > 1)
        w = approx.argmin(1)
        for r in multi:
            ids = np.flatnonzero(cand[r])
            exact = ((xb[r] - C[ids]) ** 2).sum(1)
            w[r] = ids[np.argmin(exact)]
        exact_d = np.sqrt(((xb - C[w]) ** 2).sum(1))
        words[s:s + chunk] = w
        dists[s:s + chunk] = exact_d
    return words, dists


def assign_word(descriptor: np.ndarray, dictionary: VisualDictionary) -> tuple[int, float]:
    descriptor = np.asarray(descriptor, dtype=np.float64)
    if descriptor.shape[-1] != dictionary.dim:
        raise InputError(f"descriptor has dimension {descriptor.shape[-1]}, dictionary expects {dictionary.dim}")
    w, d = assign_words(descriptor[None, :], dictionary.centroids)
    return int(w[0]), float(d[0])


def kmeans_fit(descriptors: np.ndarray, k: int, seed=0, max_iters: int = 100, tol: float = 1e-6,
               pca: PcaProjection | None = None, window=(128, 96), n_init: int = 4,
               hog: HogParams = HogParams()) -> VisualDictionary:
    """Cluster projected descriptors into a ``k``-word dictionary."""
    X = np.asarray(descriptors, dtype=np.float64)
    res = lloyd(X, k, seed=seed, max_iters=max_iters, tol=tol, n_init=n_init)
    counts = np.bincount(res.labels, minlength=k)
    sq = ((X - res.centroids[res.labels]) ** 2).sum(1)
    dist = np.sqrt(sq)
    per_word = np.bincount(res.labels, weights=sq, minlength=k)
    global_var = sq.mean() / X.shape[1] if len(X) else 1.0
    word_var = np.where(counts > 1, per_word / np.maximum(counts, 1) / X.shape[1], global_var)
    word_var = np.maximum(word_var, max(global_var, 1e-12) * 1e-3)
    return VisualDictionary(
        centroids=res.centroids,
        pca=pca if pca is not None else identity_pca(X.shape[1]),
        window=window,
        counts=counts,
        word_variance=word_var,
        distance_quantiles=np.percentile(dist, np.arange(101)),
        hog=hog,
    )


def build_dictionary(images: Sequence[np.ndarray], k: int, window=(128, 96), n_patches: int = 10000,
                     seed=0, pca_dim: int = 64, ratio: float = DEFAULT_RATIO, max_iters: int = 100,
                     tol: float = 1e-6, hog: HogParams = HogParams()) -> VisualDictionary:
    """Random multi-scale patches -> HOG -> PCA -> k-means, with mean word patches."""
    if not images:
        raise InputError("empty corpus")
    rng = np.random.default_rng(seed)
    per_image = np.full(len(images), n_patches // len(images))
    per_image[: n_patches % len(images)] += 1
    raw_blocks, pixel_blocks = [], []
    for i, (img, count) in enumerate(zip(images, per_image)):
        if count == 0:
            continue
        pyr = build_pyramid(img, ratio, window)
        patches = sample_patches(pyr, window, "random", int(count), rng, image_id=i)
        raw_blocks.append(patch_descriptors(pyr, patches, hog))
        pixel_blocks.append(np.stack([patch_pixels(pyr, p) for p in patches]))
    raw = np.concatenate(raw_blocks)
    pixels = np.concatenate(pixel_blocks)
    acc = MomentAccumulator(raw.shape[1]).push(raw)
    pca = pca_from_moments(acc, min(pca_dim, raw.shape[1]))
    X = pca.project(raw)
    dictionary = kmeans_fit(X, k, seed=seed, max_iters=max_iters, tol=tol, pca=pca, window=window, hog=hog)
    labels, _ = assign_words(X, dictionary.centroids)
    sums = np.zeros((k,) + pixels.shape[1:])
    np.add.at(sums, labels, pixels)
    counts = np.bincount(labels, minlength=k)
    dictionary.mean_patches = sums / np.maximum(counts, 1)[:, None, None]
    log.info("dictionary: %d words from %d patches, %d-dim descriptors", k, len(X), X.shape[1])
    return dictionary


# ---------------------------------------------------------------------------
# Dense scanning
# ---------------------------------------------------------------------------


def scan_image(image: np.ndarray, dictionary: VisualDictionary, stride: int = 8,
               ratio: float = DEFAULT_RATIO, distance_cutoff: float | None = None,
               max_layers: int | None = None) -> DetectionSet:
    """One word detection per window position per pyramid layer, in base pixels."""
    w, h = dictionary.window
    pyr = build_pyramid(image, ratio, (w, h))
    parts = []
    for li, (layer, f) in enumerate(pyr.layers):
        if max_layers is not None and li >= max_layers:
            break
        xs, ys = dense_positions(layer.shape[1], layer.shape[0], (w, h), stride)
        if len(xs) == 0:
            continue
        field_ = GradientField(layer, dictionary.hog)
        raw = window_descriptors(field_, xs, ys, (w, h))
        words, dists = assign_words(dictionary.encode(raw), dictionary.centroids)
        n = len(xs)
        parts.append(DetectionSet(words, xs / f, ys / f, np.full(n, w / f), np.full(n, h / f), dists,
                                  np.full(n, li)))
    dets = DetectionSet.concat(parts)
    if distance_cutoff is not None:
        dets = dets.select(dets.distance <= distance_cutoff)
    return dets
