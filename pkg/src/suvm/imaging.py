"""Image ingestion, scale pyramids, patch sampling, HOG descriptors and PCA."""

from __future__ import annotations

import math
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import cv2
import numpy as np
from PIL import Image

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")
DEFAULT_RATIO = 2.0 ** -0.5
LUMA = np.array([0.299, 0.587, 0.114])


class InputError(ValueError):
    """Raised for images or arguments the pipeline cannot accept."""


# ---------------------------------------------------------------------------
# Image I/O
# ---------------------------------------------------------------------------


def to_gray(pixels: np.ndarray) -> np.ndarray:
    """Convert a raster to float64 luma on the 8-bit scale [0, 255]."""
    arr = np.asarray(pixels).astype(np.float64)
    if arr.ndim == 3:
        if arr.shape[2] == 4:
            arr = arr[:, :, :3]
        arr = arr @ LUMA
    return arr


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB", "RGBA"):
            im = im.convert("RGB")
        return to_gray(np.asarray(im))


def save_image(path, gray: np.ndarray) -> None:
    arr = np.clip(np.round(np.asarray(gray)), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path)


def list_images(directory) -> list[Path]:
    """Image files of a corpus directory in lexicographic order."""
    root = Path(directory)
    if not root.is_dir():
        raise InputError(f"not a directory: {root}")
    return sorted(p for p in root.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def resize(image: np.ndarray, width: int, height: int) -> np.ndarray:
    """Area-averaging resize (exact 2x2 averaging for factor 1/2)."""
    if image.shape[1] == width and image.shape[0] == height:
        return np.array(image, dtype=np.float64)
    src = np.ascontiguousarray(image, dtype=np.float64)
    shrinking = width <= image.shape[1] and height <= image.shape[0]
    interp = cv2.INTER_AREA if shrinking else cv2.INTER_LINEAR
    return cv2.resize(src, (int(width), int(height)), interpolation=interp)


# ---------------------------------------------------------------------------
# Scale pyramid and patches
# ---------------------------------------------------------------------------


def _as_size(size) -> tuple[int, int]:
    if np.isscalar(size):
        return int(size), int(size)
    w, h = size
    return int(w), int(h)


def pyramid_factors(width: int, height: int, ratio: float, min_size) -> list[float]:
    """Scale factors ratio**k for every layer that stays at least ``min_size``."""
    if not 0.0 < ratio < 1.0:
        raise InputError(f"pyramid ratio must lie in (0, 1), got {ratio}")
    min_w, min_h = _as_size(min_size)
    if width < min_w or height < min_h:
        raise InputError(f"image {width}x{height} is smaller than the window {min_w}x{min_h}")
    # layer count = floor(log(min/base) / log(ratio)) + 1, limited by the tighter axis
    kx = math.floor(math.log(min_w / width) / math.log(ratio) + 1e-9)
    ky = math.floor(math.log(min_h / height) / math.log(ratio) + 1e-9)
    count = min(kx, ky) + 1
    return [ratio**k for k in range(count)]


def layer_size(width: int, height: int, factor: float) -> tuple[int, int]:
    return int(math.floor(width * factor + 1e-6)), int(math.floor(height * factor + 1e-6))


@dataclass
class ScalePyramid:
    layers: list[tuple[np.ndarray, float]]
    base_size: tuple[int, int]
    ratio: float
    min_size: tuple[int, int]

    @property
    def factors(self) -> list[float]:
        return [f for _, f in self.layers]

    def __len__(self) -> int:
        return len(self.layers)


def build_pyramid(image: np.ndarray, ratio: float = DEFAULT_RATIO, min_size=(128, 96)) -> ScalePyramid:
    """Successively downscaled copies of ``image`` (each layer resized from the base)."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        image = to_gray(image)
    height, width = image.shape
    factors = pyramid_factors(width, height, ratio, min_size)
    layers = []
    for f in factors:
        lw, lh = layer_size(width, height, f)
        layers.append((resize(image, lw, lh), f))
    return ScalePyramid(layers, (width, height), ratio, _as_size(min_size))


@dataclass(frozen=True)
class Patch:
    image_id: int
    layer: int
    x: int
    y: int
    w: int
    h: int
    factor: float

    @property
    def sx(self) -> float:
        return self.w / self.factor

    @property
    def sy(self) -> float:
        return self.h / self.factor

    @property
    def base_xy(self) -> tuple[float, float]:
        return self.x / self.factor, self.y / self.factor


def tiling_count(width: int, height: int, window, stride: int) -> int:
    w, h = _as_size(window)
    if width < w or height < h:
        return 0
    return ((width - w) // stride + 1) * ((height - h) // stride + 1)


def dense_positions(width: int, height: int, window, stride: int) -> tuple[np.ndarray, np.ndarray]:
    w, h = _as_size(window)
    xs = np.arange(0, width - w + 1, stride)
    ys = np.arange(0, height - h + 1, stride)
    gx, gy = np.meshgrid(xs, ys)
    return gx.ravel(), gy.ravel()


def sample_patches(pyramid: ScalePyramid, window, mode: str = "random", count: int = 0,
                   seed=None, stride: int | None = None, image_id: int = 0) -> list[Patch]:
    """Random or dense windows over all pyramid layers.

    Random mode picks a layer uniformly and then a uniform window origin; dense
    mode tiles every layer with ``stride``.
    """
    w, h = _as_size(window)
    for img, _ in pyramid.layers:
        if img.shape[1] < w or img.shape[0] < h:
            raise InputError("window does not fit every pyramid layer")
    patches: list[Patch] = []
    if mode == "dense":
        if not stride or stride <= 0:
            raise InputError("dense sampling needs a positive stride")
        for li, (img, f) in enumerate(pyramid.layers):
            xs, ys = dense_positions(img.shape[1], img.shape[0], (w, h), stride)
            patches.extend(Patch(image_id, li, int(x), int(y), w, h, f) for x, y in zip(xs, ys))
        return patches
    if mode != "random":
        raise InputError(f"unknown sampling mode {mode!r}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    layer_ids = rng.integers(0, len(pyramid), size=count)
    for li in layer_ids:
        img, f = pyramid.layers[li]
        x = int(rng.integers(0, img.shape[1] - w + 1))
        y = int(rng.integers(0, img.shape[0] - h + 1))
        patches.append(Patch(image_id, int(li), x, y, w, h, f))
    return patches


# ---------------------------------------------------------------------------
# HOG
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class HogParams:
    """8x8 cells, 9 unsigned bins, 2x2-cell blocks, L2-hys clipped at 0.2."""

    cell: int = 8
    bins: int = 9
    block: int = 2
    clip: float = 0.2
    eps: float = 0.5

    def dim(self, window) -> int:
        w, h = _as_size(window)
        return (w // self.cell) * (h // self.cell) * self.bins


class GradientField:
    """Integral images of orientation-binned gradient magnitude, bins last."""

    def __init__(self, image: np.ndarray, params: HogParams = HogParams()):
        img = np.asarray(image, dtype=np.float64)
        self.params = params
        self.shape = img.shape
        dx = np.zeros_like(img)
        dy = np.zeros_like(img)
        dx[:, 1:-1] = img[:, 2:] - img[:, :-2]
        dy[1:-1, :] = img[2:, :] - img[:-2, :]
        mag = np.hypot(dx, dy)
        theta = np.mod(np.arctan2(dy, dx), np.pi)
        pos = theta / np.pi * params.bins
        lo = np.floor(pos).astype(np.int64)
        frac = pos - lo
        lo %= params.bins
        hi = (lo + 1) % params.bins
        # lo and hi never coincide, so each pixel feeds two distinct bins
        contrib = np.zeros(img.shape + (params.bins,))
        np.put_along_axis(contrib, lo[..., None], (mag * (1.0 - frac))[..., None], axis=2)
        np.put_along_axis(contrib, hi[..., None], (mag * frac)[..., None], axis=2)
        ii = cv2.integral(contrib, sdepth=cv2.CV_64F)
        self.integral = ii.reshape(ii.shape[0], ii.shape[1], params.bins)

    def cell_histograms(self, xs: np.ndarray, ys: np.ndarray, ncx: int, ncy: int) -> np.ndarray:
        """Histograms (N, ncy, ncx, bins) of the cell grids anchored at (xs, ys)."""
        c = self.params.cell
        xs = np.asarray(xs, dtype=np.int64)
        ys = np.asarray(ys, dtype=np.int64)
        x0 = xs[:, None] + c * np.arange(ncx)[None, :]
        y0 = ys[:, None] + c * np.arange(ncy)[None, :]
        X0 = x0[:, None, :]
        Y0 = y0[:, :, None]
        ii = self.integral
        out = ii[Y0 + c, X0 + c] - ii[Y0, X0 + c]
        out -= ii[Y0 + c, X0]
        out += ii[Y0, X0]
        return np.maximum(out, 0.0, out=out)


def _l2hys(v: np.ndarray, params: HogParams) -> np.ndarray:
    """L2-hys normalization of flattened blocks (last axis), in place."""
    eps2 = params.eps**2
    v /= np.sqrt(np.einsum("...k,...k->...", v, v) + eps2)[..., None]
    np.minimum(v, params.clip, out=v)
    v /= np.sqrt(np.einsum("...k,...k->...", v, v) + eps2)[..., None]
    return v


def _block_grid(ncx: int, ncy: int, params: HogParams):
    b = params.block
    nby, nbx = ncy - b + 1, ncx - b + 1
    if nby < 1 or nbx < 1:
        raise InputError("window smaller than one HOG block")
    hits = np.zeros((ncy, ncx))
    for by in range(nby):
        for bx in range(nbx):
            hits[by:by + b, bx:bx + b] += 1
    return nby, nbx, hits


def normalize_cells(hist: np.ndarray, params: HogParams = HogParams()) -> np.ndarray:
    """Average of each cell's L2-hys normalizations over the blocks containing it."""
    n, ncy, ncx, nb = hist.shape
    b = params.block
    nby, nbx, hits = _block_grid(ncx, ncy, params)
    offsets = [(dy, dx) for dy in range(b) for dx in range(b)]
    # each block flattened contiguously so the norms reduce over the last axis
    v = _l2hys(np.concatenate([hist[:, dy:dy + nby, dx:dx + nbx, :] for dy, dx in offsets], axis=3), params)
    out = np.zeros_like(hist)
    for k, (dy, dx) in enumerate(offsets):
        out[:, dy:dy + nby, dx:dx + nbx, :] += v[..., k * nb:(k + 1) * nb]
    out /= hits[None, :, :, None]
    return out.reshape(n, -1)


def window_descriptors(field_: GradientField, xs, ys, window, chunk: int = 4096) -> np.ndarray:
    """Raw HOG descriptors for windows with top-left corners (xs, ys).

    Overlapping windows share blocks, so every distinct block is normalized
    once and gathered into the windows that contain it.
    """
    params = field_.params
    w, h = _as_size(window)
    ncx, ncy, nb, b = w // params.cell, h // params.cell, params.bins, params.block
    nby, nbx, hits = _block_grid(ncx, ncy, params)
    xs = np.asarray(xs, dtype=np.int64)
    ys = np.asarray(ys, dtype=np.int64)
    key_w = field_.shape[1] + 1
    grid_x = params.cell * np.tile(np.arange(nbx), nby)
    grid_y = params.cell * np.repeat(np.arange(nby), nbx)
    out = np.empty((len(xs), ncx * ncy * nb))
    for start in range(0, len(xs), chunk):
        sl = slice(start, start + chunk)
        keys = (ys[sl, None] + grid_y) * key_w + xs[sl, None] + grid_x
        uniq, inv = np.unique(keys, return_inverse=True)
        inv = inv.reshape(keys.shape)
        blocks = field_.cell_histograms(uniq % key_w, uniq // key_w, b, b)
        blocks = _l2hys(blocks.reshape(len(uniq), -1), params)
        acc = np.zeros((keys.shape[0], ncy, ncx, nb))
        for k in range(nby * nbx):
            by, bx = divmod(k, nbx)
            acc[:, by:by + b, bx:bx + b, :] += blocks[inv[:, k]].reshape(-1, b, b, nb)
        acc /= hits[None, :, :, None]
        out[sl] = acc.reshape(keys.shape[0], -1)
    return out


def hog(patch: np.ndarray, params: HogParams = HogParams()) -> np.ndarray:
    """HOG descriptor of a single canonical-size patch."""
    patch = np.asarray(patch, dtype=np.float64)
    h, w = patch.shape
    if w % params.cell or h % params.cell:
        raise InputError(f"patch {w}x{h} is not a multiple of the {params.cell}px cell")
    field_ = GradientField(patch, params)
    return window_descriptors(field_, [0], [0], (w, h))[0]


def patch_descriptors(pyramid: ScalePyramid, patches: Sequence[Patch],
                      params: HogParams = HogParams()) -> np.ndarray:
    """Descriptors of patches cut from one pyramid, computed in layer context."""
    if not patches:
        return np.empty((0, 0))
    out = None
    by_layer: dict[int, list[int]] = {}
    for i, p in enumerate(patches):
        by_layer.setdefault(p.layer, []).append(i)
    for li, idx in sorted(by_layer.items()):
        img, _ = pyramid.layers[li]
        field_ = GradientField(img, params)
        window = (patches[idx[0]].w, patches[idx[0]].h)
        desc = window_descriptors(field_, [patches[i].x for i in idx], [patches[i].y for i in idx], window)
        if out is None:
            out = np.empty((len(patches), desc.shape[1]))
        out[idx] = desc
    return out


def patch_pixels(pyramid: ScalePyramid, patch: Patch) -> np.ndarray:
    img, _ = pyramid.layers[patch.layer]
    return img[patch.y:patch.y + patch.h, patch.x:patch.x + patch.w]


# ---------------------------------------------------------------------------
# PCA
# ---------------------------------------------------------------------------


@dataclass
class MomentAccumulator:
    """Streaming mean and scatter matrix with a commutative merge."""

    dim: int
    n: int = 0
    mean: np.ndarray = field(default=None)
    scatter: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.mean is None:
            self.mean = np.zeros(self.dim)
        if self.scatter is None:
            self.scatter = np.zeros((self.dim, self.dim))

    def push(self, X: np.ndarray) -> "MomentAccumulator":
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if len(X) == 0:
            return self
        mu = X.mean(axis=0)
        centered = X - mu
        other = MomentAccumulator(self.dim, len(X), mu, centered.T @ centered)
        merged = self.merge(other)
        self.n, self.mean, self.scatter = merged.n, merged.mean, merged.scatter
        return self

    def merge(self, other: "MomentAccumulator") -> "MomentAccumulator":
        n = self.n + other.n
        if n == 0:
            return MomentAccumulator(self.dim)
        delta = other.mean - self.mean
        mean = self.mean + delta * (other.n / n)
        scatter = self.scatter + other.scatter + np.outer(delta, delta) * (self.n * other.n / n)
        return MomentAccumulator(self.dim, n, mean, scatter)

    @property
    def covariance(self) -> np.ndarray:
        return self.scatter / max(self.n, 1)


@dataclass
class PcaProjection:
    mean: np.ndarray
    basis: np.ndarray  # D x d, orthonormal columns
    explained_variance: np.ndarray
    explained_variance_ratio: np.ndarray

    @property
    def input_dim(self) -> int:
        return self.basis.shape[0]

    @property
    def output_dim(self) -> int:
        return self.basis.shape[1]

    def project(self, X: np.ndarray) -> np.ndarray:
        return (np.asarray(X, dtype=np.float64) - self.mean) @ self.basis

    def reconstruct(self, Y: np.ndarray) -> np.ndarray:
        return np.asarray(Y) @ self.basis.T + self.mean


def pca_from_moments(acc: MomentAccumulator, d: int, rank_tol: float = 1e-10) -> PcaProjection:
    if acc.n < d + 1:
        raise InputError(f"PCA to {d} dimensions needs at least {d + 1} samples, got {acc.n}")
    if d > acc.dim:
        raise InputError(f"target dimension {d} exceeds input dimension {acc.dim}")
    evals, evecs = np.linalg.eigh(acc.covariance)
    order = np.argsort(evals)[::-1]
    evals = np.clip(evals[order], 0.0, None)
    evecs = evecs[:, order]
    total = evals.sum()
    rank = int(np.sum(evals > rank_tol * max(evals[0], 1e-300))) if total > 0 else 0
    if rank < d:
        warnings.warn(f"descriptor data has rank {rank} < {d}; reducing PCA dimension to {rank}")
        d = max(rank, 1)
    basis = evecs[:, :d].copy()
    # deterministic sign: largest-magnitude loading positive
    idx = np.argmax(np.abs(basis), axis=0)
    signs = np.sign(basis[idx, np.arange(d)])
    signs[signs == 0] = 1.0
    basis *= signs
    ratio = evals[:d] / total if total > 0 else np.zeros(d)
    return PcaProjection(acc.mean.copy(), basis, evals[:d].copy(), ratio)


def fit_pca(descriptors: np.ndarray, d: int = 64) -> PcaProjection:
    X = np.atleast_2d(np.asarray(descriptors, dtype=np.float64))
    acc = MomentAccumulator(X.shape[1]).push(X)
    return pca_from_moments(acc, d)


# ---------------------------------------------------------------------------
# Descriptor dump files
# ---------------------------------------------------------------------------

DUMP_MAGIC = b"SVDS"
DUMP_VERSION = 1
_DUMP_HEADER = struct.Struct("<4sIII")


def write_descriptor_dump(path, descriptors: np.ndarray) -> None:
    """Flat little-endian float32 matrix behind a 16-byte header."""
    X = np.ascontiguousarray(descriptors, dtype="<f4")
    rows, cols = X.shape
    with open(path, "wb") as fh:
        fh.write(_DUMP_HEADER.pack(DUMP_MAGIC, DUMP_VERSION, rows, cols))
        fh.write(X.tobytes())


def read_descriptor_dump(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic, version, rows, cols = _DUMP_HEADER.unpack(fh.read(_DUMP_HEADER.size))
        if magic != DUMP_MAGIC:
            raise InputError(f"{path}: not a descriptor dump")
        if version != DUMP_VERSION:
            raise InputError(f"{path}: unsupported dump version {version}")
        data = np.frombuffer(fh.read(), dtype="<f4")
    return data.reshape(rows, cols).astype(np.float64)


def iter_corpus(paths: Iterable, failures: list | None = None):
    """Yield (index, path, gray image); unreadable files are recorded and skipped."""
    for i, path in enumerate(paths):
        try:
            yield i, path, load_image(path)
        except (OSError, ValueError) as exc:
            if failures is None:
                raise
            failures.append((str(path), str(exc)))
