"""Generative side of the model: sampling exemplars, exemplar likelihood, rendering."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .imaging import resize
from .semantics import CipcGraph, GpeEmbedding
from .srn import LOG_2PI, Srn, axis_log_density, gaussian_form, sample_gaussian_form


class SamplingError(RuntimeError):
    pass


@dataclass
class SuvModel:
    """One object category: springs, parts, embedding and per-viewlet appearance."""

    srn: Srn
    cipc: CipcGraph
    gpe: GpeEmbedding
    window: tuple[int, int]
    appearance_mean: np.ndarray  # n_viewlets x d, rows follow srn.nodes
    appearance_var: np.ndarray  # n_viewlets isotropic variances
    mean_patches: np.ndarray | None = None  # n_viewlets x h x w
    inclusion_prob: float = 0.9
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if tuple(self.cipc.nodes) != tuple(self.srn.nodes) or tuple(self.gpe.nodes) != tuple(self.srn.nodes):
            raise ValueError("model components cover different viewlet sets")
        self.appearance_mean = np.asarray(self.appearance_mean, dtype=np.float64)
        self.appearance_var = np.asarray(self.appearance_var, dtype=np.float64)
        self.window = (int(self.window[0]), int(self.window[1]))
        if not 0.0 < self.inclusion_prob <= 1.0:
            raise ValueError("inclusion probability must lie in (0, 1]")

    @property
    def viewlets(self) -> tuple[int, ...]:
        return self.srn.nodes

    def index(self, word: int) -> int:
        return self.srn.index(word)


@dataclass
class Exemplar:
    parts: tuple[int, ...]
    words: np.ndarray
    x: np.ndarray  # top-left corners, pixels
    y: np.ndarray
    sx: np.ndarray  # extents, pixels
    sy: np.ndarray
    scale: float  # global scale s
    appearances: np.ndarray | None = None  # N x d
    distances: np.ndarray | None = None  # appearance distance to the word centroid

    def __post_init__(self):
        self.words = np.asarray(self.words, dtype=np.int64)
        for name in ("x", "y", "sx", "sy"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        n = len(self.words)
        if any(len(getattr(self, a)) != n for a in ("x", "y", "sx", "sy")):
            raise ValueError("exemplar arrays differ in length")

    def __len__(self) -> int:
        return len(self.words)

    @property
    def box(self) -> tuple[float, float, float, float]:
        return (float(self.x.min()), float(self.y.min()), float((self.x + self.sx).max()),
                float((self.y + self.sy).max()))

    def translated(self, dx: float, dy: float) -> "Exemplar":
        return Exemplar(self.parts, self.words, self.x + dx, self.y + dy, self.sx, self.sy, self.scale,
                        self.appearances, self.distances)

    def rescaled(self, factor: float) -> "Exemplar":
        return Exemplar(self.parts, self.words, self.x * factor, self.y * factor, self.sx * factor,
                        self.sy * factor, self.scale * factor, self.appearances, self.distances)


def _local_edges(srn: Srn, words) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Edges of the subgraph induced by ``words`` in local indices (c, mu per axis)."""
    pos = {int(w): k for k, w in enumerate(words)}
    ei, ej, c, mu = [], [], [], []
    for e in srn.edges:
        if e.i in pos and e.j in pos:
            ei.append(pos[e.i])
            ej.append(pos[e.j])
            c.append(e.c)
            mu.append(e.mu)
    return (np.array(ei, dtype=np.int64), np.array(ej, dtype=np.int64),
            np.array(c, dtype=np.float64).reshape(-1, 3), np.array(mu, dtype=np.float64).reshape(-1, 3))


def _components(n, ei, ej) -> list[np.ndarray]:
    from .spatial import UnionFind

    uf = UnionFind(n)
    for i, j in zip(ei, ej):
        uf.union(int(i), int(j))
    return [np.array(g) for g in uf.groups()]


def _sub(n, ei, ej, members):
    """Edges inside ``members`` remapped to positions within it (edge mask too)."""
    local = -np.ones(n, dtype=np.int64)
    local[members] = np.arange(len(members))
    mask = (local[ei] >= 0) & (local[ej] >= 0)
    return local[ei[mask]], local[ej[mask]], mask


def choose_viewlets(model: SuvModel, rng: np.random.Generator, max_tries: int = 100):
    """Steps 1-2: independent part inclusion, then one viewlet per exclusive group."""
    cipc = model.cipc
    for _ in range(max_tries):
        parts = [p for p in range(cipc.n_parts) if rng.random() < model.inclusion_prob]
        if parts:
            break
    else:
        raise SamplingError(f"no part selected in {max_tries} draws")
    words = []
    for p in parts:
        for group in cipc.part_groups(p):
            words.append(group[int(rng.integers(len(group)))] if len(group) > 1 else group[0])
    order = sorted(words, key=model.index)
    return tuple(parts), np.array(order, dtype=np.int64)


def sample_exemplar(model: SuvModel, s: float = 1.0, seed=None, origin=(0.0, 0.0),
                    words=None) -> Exemplar:
    """Draw parts, viewlets, scales, then locations given scales.

    Each connected piece of the chosen viewlets' spring subgraph is anchored at
    its last node's embedded position and scale; the rest is drawn from the
    anchored GMRF. ``words`` skips the discrete steps.
    """
    if s <= 0:
        raise ValueError("global scale must be positive")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if words is None:
        parts, words = choose_viewlets(model, rng)
    else:
        words = np.array(sorted(words, key=model.index), dtype=np.int64)
        parts = tuple(sorted({model.cipc.part_of[int(w)] for w in words}))
    n = len(words)
    gi = np.array([model.index(int(w)) for w in words])
    ei, ej, c, mu = _local_edges(model.srn, words)
    w_px, h_px = model.window
    log_s = np.log(model.gpe.scale[gi])
    gx, gy = model.gpe.x[gi], model.gpe.y[gi]
    S = np.empty(n)
    x = np.empty(n)
    y = np.empty(n)
    comps = _components(n, ei, ej)
    for members in comps:
        a = members[-1]
        if len(members) == 1:
            S[a] = log_s[a]
            continue
        li, lj, m = _sub(n, ei, ej, members)
        free, mean, P, _ = gaussian_form(len(members), li, lj, c[m, 2], mu[m, 2])
        draw = sample_gaussian_form(mean, P, rng)
        S[members[free]] = log_s[a] + draw
        S[a] = log_s[a]
    S = np.exp(S)
    sx = s * w_px * S
    sy = s * h_px * S
    for members in comps:
        a = members[-1]
        x[a] = gx[a] * s * w_px
        y[a] = gy[a] * s * h_px
        if len(members) == 1:
            continue
        li, lj, m = _sub(n, ei, ej, members)
        for axis, pos, ext in ((0, x, sx), (1, y, sy)):
            free, mean, P, _ = gaussian_form(len(members), li, lj, c[m, axis], mu[m, axis], ext[members])
            pos[members[free]] = pos[a] + sample_gaussian_form(mean, P, rng)
    x += origin[0]
    y += origin[1]
    sd = np.sqrt(model.appearance_var[gi])
    mean_a = model.appearance_mean[gi]
    app = mean_a + rng.standard_normal(mean_a.shape) * sd[:, None]
    dist = np.linalg.norm(app - mean_a, axis=1)
    return Exemplar(parts, words, x, y, sx, sy, float(s), app, dist)


# ---------------------------------------------------------------------------
# Likelihood
# ---------------------------------------------------------------------------


def viewlet_log_prob(model: SuvModel, words) -> float:
    """log P(V_G): part inclusion Bernoulli, uniform variant choice, hard exclusion."""
    p = model.inclusion_prob
    cipc = model.cipc
    group_of = cipc.group_of()
    present = [int(w) for w in words]
    groups_hit: dict[int, int] = {}
    for w in present:
        g = group_of[w]
        groups_hit[g] = groups_hit.get(g, 0) + 1
        if groups_hit[g] > 1:
            return -math.inf
    parts_hit = {cipc.part_of[w] for w in present}
    total = 0.0
    for part in range(cipc.n_parts):
        if part in parts_hit:
            total += math.log(p)
            for group in cipc.part_groups(part):
                if len(group) > 1 and group_of[group[0]] in groups_hit:
                    total -= math.log(len(group))
        elif p < 1.0:
            total += math.log1p(-p)
        else:
            total = -math.inf if cipc.n_parts else total
    return total


def appearance_log_prob(model: SuvModel, words, appearances=None, distances=None) -> float:
    gi = [model.index(int(w)) for w in words]
    var = model.appearance_var[gi]
    d = model.appearance_mean.shape[1]
    if appearances is not None:
        sq = np.sum((np.asarray(appearances) - model.appearance_mean[gi]) ** 2, axis=1)
    elif distances is not None:
        sq = np.asarray(distances, dtype=np.float64) ** 2
    else:
        return 0.0
    return float(np.sum(-0.5 * d * (LOG_2PI + np.log(var)) - 0.5 * sq / var))


def geometry_log_prob(model: SuvModel, words, x, y, sx, sy) -> dict[str, float]:
    """X, Y (given scales) and S factors, summed over connected pieces of the subgraph."""
    ei, ej, c, mu = _local_edges(model.srn, words)
    out = {"x": 0.0, "y": 0.0, "s": 0.0}
    n = len(words)
    for members in _components(n, ei, ej):
        if len(members) < 2:
            continue
        li, lj, m = _sub(n, ei, ej, members)
        k = len(members)
        out["x"] += axis_log_density(k, li, lj, c[m, 0], mu[m, 0], x[members], sx[members])
        out["y"] += axis_log_density(k, li, lj, c[m, 1], mu[m, 1], y[members], sy[members])
        out["s"] += axis_log_density(k, li, lj, c[m, 2], mu[m, 2], np.log(sx[members]))
    return out


def exemplar_log_likelihood(model: SuvModel, ex: Exemplar, appearance: bool = True):
    """Sum of the five log factors and their breakdown (keys Y, X, A, S, V)."""
    unknown = [int(w) for w in ex.words if int(w) not in model.srn._index]
    if unknown:
        raise ValueError(f"words {unknown} are not viewlets of this model")
    if len(ex) and (not np.all(np.isfinite(ex.x)) or not np.all(np.isfinite(ex.y))
                    or np.any(ex.sx <= 0) or np.any(ex.sy <= 0)):
        raise ValueError("exemplar must be finite with positive extents")
    order = np.argsort([model.index(int(w)) for w in ex.words], kind="stable")
    words = ex.words[order]
    geo = geometry_log_prob(model, words, ex.x[order], ex.y[order], ex.sx[order], ex.sy[order])
    app = 0.0
    if appearance:
        app = appearance_log_prob(model, words,
                                  None if ex.appearances is None else np.asarray(ex.appearances)[order],
                                  None if ex.distances is None else np.asarray(ex.distances)[order])
    parts = {"Y": geo["y"], "X": geo["x"], "A": app, "S": geo["s"], "V": viewlet_log_prob(model, words)}
    return sum(parts.values()), parts


def expected_geometry_log_prob(model: SuvModel, ex: Exemplar) -> dict[str, float]:
    """Closed-form expectation of the geometric factors given the exemplar's extents.

    For an n-dimensional Gaussian the mean log density is -n/2 - 1/2 log|2 pi Sigma|.
    """
    order = np.argsort([model.index(int(w)) for w in ex.words], kind="stable")
    words = ex.words[order]
    sx, sy = ex.sx[order], ex.sy[order]
    ei, ej, c, _ = _local_edges(model.srn, words)
    out = {"x": 0.0, "y": 0.0, "s": 0.0}
    from .srn import anchored_laplacian, axis_weights, logdet_pd

    n = len(words)
    for members in _components(n, ei, ej):
        k = len(members)
        if k < 2:
            continue
        li, lj, m = _sub(n, ei, ej, members)
        for axis, ext in (("x", sx[members]), ("y", sy[members]), ("s", None)):
            a = "xys".index(axis)
            if ext is not None:
                ext = ext / math.exp(float(np.mean(np.log(ext))))
            Lam = anchored_laplacian(k, li, lj, axis_weights(li, lj, c[m, a], ext))
            out[axis] += -0.5 * (k - 1) - 0.5 * ((k - 1) * LOG_2PI - logdet_pd(Lam))
    return out


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------


@dataclass
class RenderResult:
    image: np.ndarray
    offset: tuple[int, int]  # shift added to exemplar coordinates to reach canvas pixels


def paste_windows(canvas: np.ndarray, patches, boxes) -> None:
    """Paste resized patches at integer boxes (x, y, w, h), later ones on top."""
    for patch, (x, y, w, h) in zip(patches, boxes):
        if w < 1 or h < 1:
            continue
        canvas[y:y + h, x:x + w] = resize(patch, w, h)


def render_exemplar(ex: Exemplar, model: SuvModel, canvas=None, background: float = 128.0) -> RenderResult:
    """Paste each viewlet's mean patch at its sampled window.

    ``canvas`` is an image or a (height, width) shape. Windows that fall off
    the canvas grow it; the returned offset maps exemplar to canvas pixels.
    """
    if model.mean_patches is None:
        raise ValueError("model has no representative patches to render")
    if canvas is None:
        canvas = (0, 0)
    if isinstance(canvas, tuple):
        canvas = np.full(canvas, background, dtype=np.float64)
    canvas = np.asarray(canvas, dtype=np.float64)
    x0 = np.floor(ex.x).astype(int)
    y0 = np.floor(ex.y).astype(int)
    w = np.maximum(np.rint(ex.sx).astype(int), 1)
    h = np.maximum(np.rint(ex.sy).astype(int), 1)
    left = max(0, -int(x0.min(initial=0)))
    top = max(0, -int(y0.min(initial=0)))
    right = max(canvas.shape[1], int((x0 + w).max(initial=0)) + left)
    bottom = max(canvas.shape[0], int((y0 + h).max(initial=0)) + top)
    if (left, top) != (0, 0) or (bottom, right) != canvas.shape:
        grown = np.full((bottom, right), background, dtype=np.float64)
        grown[top:top + canvas.shape[0], left:left + canvas.shape[1]] = canvas
        canvas = grown
    else:
        canvas = canvas.copy()
    order = np.argsort(-(w * h), kind="stable")  # large windows first, small ones stay visible
    patches = [model.mean_patches[model.index(int(ex.words[k]))] for k in order]
    boxes = [(int(x0[k] + left), int(y0[k] + top), int(w[k]), int(h[k])) for k in order]
    paste_windows(canvas, patches, boxes)
    return RenderResult(canvas, (left, top))
