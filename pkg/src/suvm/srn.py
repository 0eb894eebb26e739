"""Spatial relationship networks: pair statistics, spring estimation, GMRF algebra.

Z statistics for an ordered word pair (i, j) detected in one image::

    Zx = (x_j - x_i) / (sx_i + sx_j)
    Zy = (y_j - y_i) / (sy_i + sy_j)
    Zs = sx_j / sx_i            (stored as log Zs)

Pairs are stored once with i < j; the reverse orientation negates every mean.
Each spring contributes one term per unordered pair to the quadratic form,
which makes the precision matrix the anchored weighted graph Laplacian.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .dictionary import DetectionSet
from .spatial import UnionFind, neighbor_pairs

AXES = ("x", "y", "s")
LOG_2PI = math.log(2.0 * math.pi)


class SingularPrecisionError(ValueError):
    """The spring network does not pin down a proper Gaussian."""


class ConvergenceError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Pair statistics
# ---------------------------------------------------------------------------


@dataclass
class PairStats:
    """Streaming per-pair moments of (Zx, Zy, log Zs) over a corpus."""

    k: int
    n: np.ndarray = None  # k x k sample counts, upper triangle
    mean: np.ndarray = None  # 3 x k x k, oriented low id -> high id
    m2: np.ndarray = None  # 3 x k x k sums of squared deviations
    images: np.ndarray = None  # k x k images contributing at least one sample
    occurrences: np.ndarray = None  # k images containing each word
    n_images: int = 0
    skipped: int = 0

    def __post_init__(self):
        k = self.k
        if self.n is None:
            self.n = np.zeros((k, k), dtype=np.int64)
        if self.mean is None:
            self.mean = np.zeros((3, k, k))
        if self.m2 is None:
            self.m2 = np.zeros((3, k, k))
        if self.images is None:
            self.images = np.zeros((k, k), dtype=np.int64)
        if self.occurrences is None:
            self.occurrences = np.zeros(k, dtype=np.int64)

    # -- accumulation ------------------------------------------------------

    def _merge_moments(self, lo, hi, n_b, mean_b, m2_b):
        n_a = self.n[lo, hi]
        n = n_a + n_b
        delta = mean_b - self.mean[:, lo, hi]
        frac = n_b / n
        self.mean[:, lo, hi] += delta * frac
        self.m2[:, lo, hi] += m2_b + delta**2 * (n_a * frac)
        self.n[lo, hi] = n

    def push_samples(self, lo, hi, z: np.ndarray) -> None:
        """Add samples z (3 x N) for canonical pairs lo < hi (one image)."""
        lo = np.asarray(lo, dtype=np.int64)
        hi = np.asarray(hi, dtype=np.int64)
        if len(lo) == 0:
            return
        keys = lo * self.k + hi
        uniq, inv = np.unique(keys, return_inverse=True)
        cnt = np.bincount(inv, minlength=len(uniq)).astype(np.float64)
        mean_b = np.stack([np.bincount(inv, weights=z[a], minlength=len(uniq)) for a in range(3)]) / cnt
        dev = z - mean_b[:, inv]
        m2_b = np.stack([np.bincount(inv, weights=dev[a] ** 2, minlength=len(uniq)) for a in range(3)])
        ul, uh = uniq // self.k, uniq % self.k
        self._merge_moments(ul, uh, cnt.astype(np.int64), mean_b, m2_b)
        self.images[ul, uh] += 1

    def push_image(self, dets: DetectionSet, radius: float | None = None) -> None:
        """Accumulate every co-detected word pair of one image.

        ``radius`` limits pairs to |Zx|, |Zy| <= radius (None = all pairs).
        """
        self.n_images += 1
        if len(dets) == 0:
            return
        words = dets.word
        self.occurrences[np.unique(words)] += 1
        ok = (dets.sx > 0) & (dets.sy > 0)
        if not ok.all():
            bad = int((~ok).sum())
            # each dropped detection would have paired with every other one
            self.skipped += bad * (len(dets) - 1)
            dets = dets.select(ok)
            words = dets.word
        if len(dets) < 2:
            return
        reach = np.inf if radius is None else radius
        if np.isinf(reach) and len(dets) <= 4000:
            I, J = np.triu_indices(len(dets), 1)
        else:
            I, J = neighbor_pairs(dets.x, dets.y, dets.sx, dets.sy, reach, reach)
        diff = words[I] != words[J]
        I, J = I[diff], J[diff]
        swap = words[I] > words[J]
        I, J = np.where(swap, J, I), np.where(swap, I, J)
        z = np.stack([
            (dets.x[J] - dets.x[I]) / (dets.sx[I] + dets.sx[J]),
            (dets.y[J] - dets.y[I]) / (dets.sy[I] + dets.sy[J]),
            np.log(dets.sx[J] / dets.sx[I]),
        ])
        if radius is not None:
            keep = (np.abs(z[0]) <= radius) & (np.abs(z[1]) <= radius)
            I, J, z = I[keep], J[keep], z[:, keep]
        self.push_samples(words[I], words[J], z)

    def merge(self, other: "PairStats") -> "PairStats":
        """Commutative merge of two accumulators over disjoint image sets."""
        if other.k != self.k:
            raise ValueError("cannot merge statistics over different dictionaries")
        out = PairStats(self.k, self.n.copy(), self.mean.copy(), self.m2.copy(), self.images + other.images,
                        self.occurrences + other.occurrences, self.n_images + other.n_images,
                        self.skipped + other.skipped)
        lo, hi = np.nonzero(other.n)
        if len(lo):
            out._merge_moments(lo, hi, other.n[lo, hi], other.mean[:, lo, hi], other.m2[:, lo, hi])
        return out

    # -- queries -----------------------------------------------------------

    def count(self, i: int, j: int) -> int:
        lo, hi = min(i, j), max(i, j)
        return int(self.n[lo, hi]) if lo != hi else 0

    def cooccurrence(self, i: int, j: int) -> int:
        lo, hi = min(i, j), max(i, j)
        return int(self.images[lo, hi]) if lo != hi else 0

    def pair_mean(self, i: int, j: int) -> np.ndarray:
        """Means of (Zx, Zy, log Zs) oriented i -> j."""
        if i < j:
            return self.mean[:, i, j].copy()
        return -self.mean[:, j, i]

    def pair_var(self, i: int, j: int) -> np.ndarray:
        lo, hi = min(i, j), max(i, j)
        n = self.n[lo, hi]
        return self.m2[:, lo, hi] / n if n else np.full(3, np.inf)

    def variances(self) -> np.ndarray:
        """3 x k x k population variances (inf where no samples)."""
        with np.errstate(divide="ignore", invalid="ignore"):
            v = self.m2 / self.n[None]
        v[:, self.n == 0] = np.inf
        return v

    def pairs(self, min_support: int = 1):
        lo, hi = np.nonzero(self.n >= max(min_support, 1))
        return lo, hi

    def dump_table(self, path, min_support: int = 1) -> None:
        """Sorted text table: pair, n, images, means, variances."""
        lo, hi = self.pairs(min_support)
        with open(path, "w") as fh:
            fh.write("# i j n images mean_zx mean_zy mean_logzs var_zx var_zy var_logzs\n")
            for i, j in zip(lo, hi):
                m = self.mean[:, i, j]
                v = self.m2[:, i, j] / self.n[i, j]
                fh.write(f"{i} {j} {self.n[i, j]} {self.images[i, j]} "
                         + " ".join(f"{a:.9g}" for a in (*m, *v)) + "\n")


def accumulate_pairs(per_image: Iterable[DetectionSet], k: int, radius: float | None = None) -> PairStats:
    stats = PairStats(k)
    for dets in per_image:
        stats.push_image(dets, radius)
    return stats


def combined_variance(stats: PairStats, i: int, j: int, min_support: int = 20) -> float:
    """Var(Zx) + Var(Zy) + Var(log Zs); inf below the support minimum."""
    if stats.count(i, j) < min_support:
        return math.inf
    return float(stats.pair_var(i, j).sum())


# ---------------------------------------------------------------------------
# Springs and networks
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SpringEdge:
    i: int
    j: int
    c: tuple[float, float, float]  # stiffness for x, y, log-scale
    mu: tuple[float, float, float]  # rest Zx, rest Zy, rest log Zs, oriented i -> j
    variance: float = 0.0  # combined variance at estimation time
    n: int = 0

    @property
    def mu_ratio(self) -> float:
        return math.exp(self.mu[2])

    def oriented(self, a: int) -> tuple[np.ndarray, np.ndarray]:
        """(c, mu) with mu oriented from word ``a`` to the other endpoint."""
        mu = np.array(self.mu)
        return np.array(self.c), (mu if a == self.i else -mu)


def sparsify(stats: PairStats, lam: float, variance_threshold: float, min_support: int = 20,
             max_edges: int | None = None, nodes: Sequence[int] | None = None) -> list[SpringEdge]:
    """Threshold rule on combined variances, stiffness at the c <= 1/(Var + lam) bound."""
    if lam <= 0:
        raise ValueError("lambda must be positive")
    lo, hi = stats.pairs(min_support)
    if nodes is not None:
        allowed = np.zeros(stats.k, dtype=bool)
        allowed[list(nodes)] = True
        keep = allowed[lo] & allowed[hi]
        lo, hi = lo[keep], hi[keep]
    var = stats.m2[:, lo, hi] / stats.n[lo, hi]
    V = var.sum(0)
    keep = V <= variance_threshold
    lo, hi, var, V = lo[keep], hi[keep], var[:, keep], V[keep]
    order = np.lexsort((hi, lo, V))
    if max_edges is not None:
        order = order[:max_edges]
    edges = []
    for e in sorted(order, key=lambda t: (lo[t], hi[t])):
        i, j = int(lo[e]), int(hi[e])
        c = tuple(float(1.0 / (v + lam)) for v in var[:, e])
        mu = tuple(float(m) for m in stats.mean[:, i, j])
        edges.append(SpringEdge(i, j, c, mu, float(V[e]), int(stats.n[i, j])))
    return edges


def matched_threshold(c_target: float, lam: float) -> float:
    """Variance threshold that removes every edge whose bound falls below ``c_target``."""
    return 1.0 / c_target - lam


@dataclass
class Srn:
    nodes: tuple[int, ...]
    edges: list[SpringEdge]
    _index: dict = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.nodes = tuple(sorted(int(n) for n in self.nodes))
        self.edges = sorted(self.edges, key=lambda e: (e.i, e.j))
        self._index = {w: k for k, w in enumerate(self.nodes)}
        for e in self.edges:
            if e.i not in self._index or e.j not in self._index:
                raise ValueError(f"edge ({e.i}, {e.j}) references a word outside the network")

    @property
    def anchor(self) -> int:
        return self.nodes[-1]

    def __len__(self) -> int:
        return len(self.nodes)

    def index(self, word: int) -> int:
        return self._index[word]

    def edge_arrays(self):
        """(ei, ej, c[E,3], mu[E,3]) in local node indices."""
        ei = np.array([self._index[e.i] for e in self.edges], dtype=np.int64)
        ej = np.array([self._index[e.j] for e in self.edges], dtype=np.int64)
        c = np.array([e.c for e in self.edges], dtype=np.float64).reshape(-1, 3)
        mu = np.array([e.mu for e in self.edges], dtype=np.float64).reshape(-1, 3)
        return ei, ej, c, mu

    def edge(self, a: int, b: int) -> SpringEdge | None:
        lookup = getattr(self, "_edge_lookup", None)
        if lookup is None:
            lookup = {(e.i, e.j): e for e in self.edges}
            object.__setattr__(self, "_edge_lookup", lookup)
        return lookup.get((min(a, b), max(a, b)))

    def neighbors(self) -> dict[int, set[int]]:
        nb = {w: set() for w in self.nodes}
        for e in self.edges:
            nb[e.i].add(e.j)
            nb[e.j].add(e.i)
        return nb

    def components(self) -> list[list[int]]:
        n = len(self.nodes)
        if n == 0:
            return []
        ei, ej, _, _ = self.edge_arrays()
        graph = coo_matrix((np.ones(len(ei)), (ei, ej)), shape=(n, n))
        _, labels = connected_components(graph, directed=False)
        comps: dict[int, list[int]] = {}
        for k, lab in enumerate(labels):
            comps.setdefault(lab, []).append(self.nodes[k])
        return sorted(comps.values(), key=lambda c: (-len(c), c[0]))

    def is_connected(self) -> bool:
        return len(self.components()) <= 1

    def subnetwork(self, words: Iterable[int]) -> "Srn":
        keep = set(int(w) for w in words)
        return Srn(tuple(sorted(keep)), [e for e in self.edges if e.i in keep and e.j in keep])


def giant_components(edges: Sequence[SpringEdge], nodes: Iterable[int] | None = None,
                     min_size: int = 3) -> list[Srn]:
    """Connected components with at least ``min_size`` viewlets, largest first."""
    if nodes is None:
        nodes = {e.i for e in edges} | {e.j for e in edges}
    nodes = sorted(set(int(n) for n in nodes))
    index = {w: k for k, w in enumerate(nodes)}
    uf = UnionFind(len(nodes))
    for e in edges:
        uf.union(index[e.i], index[e.j])
    groups = [[nodes[k] for k in g] for g in uf.groups()]
    groups = [g for g in groups if len(g) >= max(min_size, 1)]
    groups.sort(key=lambda g: (-len(g), min(g)))
    out = []
    for g in groups:
        members = set(g)
        out.append(Srn(tuple(g), [e for e in edges if e.i in members]))
    return out


# ---------------------------------------------------------------------------
# Precision matrices and likelihoods
# ---------------------------------------------------------------------------


@dataclass
class PrecisionMatrix:
    axis: str
    matrix: np.ndarray
    order: tuple[int, ...]  # node words of the rows (anchor excluded)


def anchored_laplacian(n: int, ei, ej, weights, anchor: int | None = None) -> np.ndarray:
    """Weighted Laplacian with the anchor row and column removed."""
    anchor = n - 1 if anchor is None else anchor
    L = np.zeros((n, n))
    np.add.at(L, (ei, ej), -weights)
    np.add.at(L, (ej, ei), -weights)
    np.add.at(L, (ei, ei), weights)
    np.add.at(L, (ej, ej), weights)
    keep = np.arange(n) != anchor
    return L[np.ix_(keep, keep)]


def axis_weights(ei, ej, c, extents=None):
    """Edge weights c / (e_i + e_j)^2; unit denominators when extents is None."""
    if extents is None:
        return np.asarray(c, dtype=np.float64)
    e = np.asarray(extents, dtype=np.float64)
    return np.asarray(c) / (e[ei] + e[ej]) ** 2


def _axis_index(axis: str) -> int:
    try:
        return AXES.index(axis)
    except ValueError:
        raise ValueError(f"axis must be one of {AXES}, got {axis!r}") from None


def assemble_precision(srn: Srn, axis: str, scales=None) -> PrecisionMatrix:
    """Precision matrix without the connectivity check."""
    a = _axis_index(axis)
    ei, ej, c, _ = srn.edge_arrays()
    w = axis_weights(ei, ej, c[:, a], None if axis == "s" else scales)
    M = anchored_laplacian(len(srn), ei, ej, w)
    return PrecisionMatrix(axis, M, srn.nodes[:-1])


def precision_matrix(srn: Srn, axis: str, scales=None) -> PrecisionMatrix:
    """Anchored precision matrix of one axis.

    For x and y, ``scales`` are per-node extents s_i (defaulting to 1); the
    log-scale axis has no extent normalization.
    """
    comps = srn.components()
    if len(comps) > 1:
        stray = next(c for c in comps if srn.anchor not in c)
        raise SingularPrecisionError(
            f"spring network is disconnected; component {stray} is not tied to anchor {srn.anchor}")
    if scales is None and axis != "s":
        scales = np.ones(len(srn))
    return assemble_precision(srn, axis, scales)


def is_positive_definite(M: np.ndarray, rel_tol: float = 1e-12) -> bool:
    """Cholesky with a relative pivot floor (exact-zero pivots fail)."""
    if M.size == 0:
        return True
    try:
        L = np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        return False
    return bool(np.min(np.diag(L)) ** 2 > rel_tol * max(np.max(np.abs(np.diag(M))), 1e-300))


def logdet_pd(M: np.ndarray) -> float:
    if M.size == 0:
        return 0.0
    try:
        L = np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        raise SingularPrecisionError("precision matrix is not positive definite") from None
    return 2.0 * float(np.log(np.diag(L)).sum())


def spring_quadratic(ei, ej, c, mu, values, extents=None) -> float:
    """sum_e c_e (Z_e - mu_e)^2 with Z_e = (v_j - v_i) / (e_i + e_j)."""
    v = np.asarray(values, dtype=np.float64)
    if extents is None:
        z = v[ej] - v[ei]
    else:
        e = np.asarray(extents, dtype=np.float64)
        z = (v[ej] - v[ei]) / (e[ei] + e[ej])
    return float(np.sum(np.asarray(c) * (z - mu) ** 2))


def axis_log_density(n: int, ei, ej, c, mu, values, extents=None) -> float:
    """Gaussian log density of one axis of a connected spring network.

    Positions and extents are measured in units of the geometric-mean extent,
    so the value is invariant to translation and joint rescaling. The
    quadratic is taken about the least-squares mean, which drops the residual
    stress that rest values inconsistent around a cycle leave behind; for
    consistent rest values it equals the spring sum.
    """
    if n < 2:
        return 0.0
    values = np.asarray(values, dtype=np.float64)
    if extents is not None:
        extents = np.asarray(extents, dtype=np.float64)
        unit = math.exp(float(np.mean(np.log(extents))))
        values, extents = values / unit, extents / unit
    free, mean, Lam, _ = gaussian_form(n, ei, ej, c, mu, extents)
    d = values[free] - values[n - 1] - mean
    return 0.5 * logdet_pd(Lam) - 0.5 * float(d @ Lam @ d) - 0.5 * (n - 1) * LOG_2PI


@dataclass
class Configuration:
    """Per-node placement: top-left corner (x, y) and pixel extents (sx, sy)."""

    x: np.ndarray
    y: np.ndarray
    sx: np.ndarray
    sy: np.ndarray

    def __post_init__(self):
        for name in ("x", "y", "sx", "sy"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))

    def transformed(self, scale: float = 1.0, dx: float = 0.0, dy: float = 0.0) -> "Configuration":
        return Configuration(self.x * scale + dx, self.y * scale + dy, self.sx * scale, self.sy * scale)


def log_likelihood(srn: Srn, config: Configuration, breakdown: bool = False):
    """GMRF log-likelihood of a configuration covering every node.

    The sum over axes of 1/2 log|Lambda| - 1/2 sum_e c_e (Z_e - mu_e)^2 minus
    the Gaussian constant (n-1)/2 log(2 pi) per axis, i.e. an exact
    log density of the anchored relative coordinates (see axis_log_density
    for rest values that disagree around a cycle).
    """
    n = len(srn)
    arrays = (config.x, config.y, config.sx, config.sy)
    if any(len(a) != n for a in arrays):
        raise ValueError(f"configuration covers {len(config.x)} nodes, network has {n}")
    if not all(np.all(np.isfinite(a)) for a in arrays) or np.any(config.sx <= 0) or np.any(config.sy <= 0):
        raise ValueError("configuration must be finite with positive extents")
    precision_matrix(srn, "s")  # connectivity check
    ei, ej, c, mu = srn.edge_arrays()
    parts = {
        "x": axis_log_density(n, ei, ej, c[:, 0], mu[:, 0], config.x, config.sx),
        "y": axis_log_density(n, ei, ej, c[:, 1], mu[:, 1], config.y, config.sy),
        "s": axis_log_density(n, ei, ej, c[:, 2], mu[:, 2], np.log(config.sx)),
    }
    total = sum(parts.values())
    return (total, parts) if breakdown else total


# ---------------------------------------------------------------------------
# Gaussian form of a spring network (sampling, marginals)
# ---------------------------------------------------------------------------


def gaussian_form(n: int, ei, ej, c, mu, extents=None, anchor: int | None = None):
    """Mean and precision of the free coordinates (anchor held at 0).

    The quadratic sum_e w_e (v_j - v_i - t_e)^2 with w_e = c_e/(e_i+e_j)^2 and
    t_e = mu_e (e_i+e_j) expands to v'Lv - 2b'v + const; the mean is L^-1 b.
    Returns (free node indices, mean, precision, residual stress at the mean).
    """
    anchor = n - 1 if anchor is None else anchor
    if extents is None:
        w = np.asarray(c, dtype=np.float64)
        t = np.asarray(mu, dtype=np.float64)
    else:
        e = np.asarray(extents, dtype=np.float64)
        span = e[ei] + e[ej]
        w = np.asarray(c) / span**2
        t = np.asarray(mu) * span
    L = np.zeros((n, n))
    np.add.at(L, (ei, ej), -w)
    np.add.at(L, (ej, ei), -w)
    np.add.at(L, (ei, ei), w)
    np.add.at(L, (ej, ej), w)
    b = np.zeros(n)
    np.add.at(b, ej, w * t)
    np.add.at(b, ei, -w * t)
    free = np.flatnonzero(np.arange(n) != anchor)
    Lf = L[np.ix_(free, free)]
    bf = b[free]
    if len(free) == 0:
        return free, np.zeros(0), Lf, 0.0
    mean = np.linalg.solve(Lf, bf)
    full = np.zeros(n)
    full[free] = mean
    residual = float(np.sum(w * (full[ej] - full[ei] - t) ** 2))
    return free, mean, Lf, residual


def sample_gaussian_form(mean: np.ndarray, precision: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    if len(mean) == 0:
        return mean.copy()
    L = np.linalg.cholesky(precision)
    z = rng.standard_normal(len(mean))
    from scipy.linalg import solve_triangular

    return mean + solve_triangular(L.T, z, lower=False)


# ---------------------------------------------------------------------------
# Exact convex estimation (verification oracle)
# ---------------------------------------------------------------------------


@dataclass
class ConvexSolution:
    nodes: tuple[int, ...]
    pairs: list[tuple[int, int]]
    variance: np.ndarray
    c: np.ndarray
    bound: np.ndarray
    objective: float
    grad_norm: float
    sweeps: int


def convex_objective(n: int, pi, pj, c, var, lam) -> float:
    Lam = anchored_laplacian(n, pi, pj, c)
    return -0.5 * logdet_pd(Lam) + 0.5 * float(np.sum(c * (var + lam)))


def laplacian_mle(n: int, pi, pj, var, lam: float, tol: float = 1e-8, max_sweeps: int = 20000):
    """Minimize -1/2 log|Lambda(c)| + 1/2 sum c_ij (Var_ij + lam) over c >= 0.

    Exact coordinate minimization: with r = a'Lambda^-1 a for a = e_i - e_j,
    the one-dimensional optimum moves c_ij by 1/(Var+lam) - 1/r, clipped at
    c_ij >= 0, and Lambda^-1 is refreshed by Sherman-Morrison. Stops when the
    projected gradient norm drops below ``tol``.
    """
    pi = np.asarray(pi, dtype=np.int64)
    pj = np.asarray(pj, dtype=np.int64)
    var = np.asarray(var, dtype=np.float64)
    target = 1.0 / (var + lam)
    graph = coo_matrix((np.ones(len(pi)), (pi, pj)), shape=(n, n))
    if n > 1 and connected_components(graph, directed=False)[0] > 1:
        raise SingularPrecisionError("pair support graph is disconnected; log-determinant is unbounded")
    c = 0.5 * target
    anchor = n - 1
    A = np.zeros((len(pi), n - 1))
    for e, (i, j) in enumerate(zip(pi, pj)):
        if i != anchor:
            A[e, i if i < anchor else i - 1] += 1.0
        if j != anchor:
            A[e, j if j < anchor else j - 1] -= 1.0
    grad_norm = math.inf
    for sweep in range(1, max_sweeps + 1):
        Sigma = np.linalg.inv(anchored_laplacian(n, pi, pj, c))
        for e in range(len(c)):
            a = A[e]
            Sa = Sigma @ a
            r = float(a @ Sa)
            delta = max(-c[e], target[e] - 1.0 / r)
            if delta != 0.0:
                c[e] += delta
                Sigma -= np.outer(Sa, Sa) * (delta / (1.0 + delta * r))
        Sigma = np.linalg.inv(anchored_laplacian(n, pi, pj, c))
        r_all = np.einsum("ei,ij,ej->e", A, Sigma, A)
        grad = 0.5 * (var + lam) - 0.5 * r_all
        proj = np.where(c > 0, grad, np.minimum(grad, 0.0))
        grad_norm = float(np.linalg.norm(proj))
        if grad_norm <= tol:
            return c, grad_norm, sweep
    raise ConvergenceError(f"coordinate descent stalled at projected-gradient norm {grad_norm:.3e}")


def solve_convex_exact(stats: PairStats, lam: float, nodes: Sequence[int] | None = None,
                       axis: str = "combined", min_support: int = 1, tol: float = 1e-8,
                       max_sweeps: int = 20000) -> ConvexSolution:
    """Exact L1-regularized spring estimate on a small instance (<= 15 nodes)."""
    if lam <= 0:
        raise ValueError("lambda must be positive")
    if nodes is None:
        lo, hi = stats.pairs(min_support)
        nodes = sorted(set(lo.tolist()) | set(hi.tolist()))
    nodes = tuple(sorted(int(w) for w in nodes))
    if len(nodes) > 15:
        raise ValueError("the exact solver is limited to 15 nodes")
    index = {w: k for k, w in enumerate(nodes)}
    pairs, var = [], []
    for a in range(len(nodes)):
        for b in range(a + 1, len(nodes)):
            i, j = nodes[a], nodes[b]
            if stats.count(i, j) < min_support:
                continue
            v = stats.pair_var(i, j)
            pairs.append((i, j))
            var.append(float(v.sum()) if axis == "combined" else float(v[_axis_index(axis)]))
    var = np.array(var)
    pi = np.array([index[i] for i, _ in pairs], dtype=np.int64)
    pj = np.array([index[j] for _, j in pairs], dtype=np.int64)
    c, gnorm, sweeps = laplacian_mle(len(nodes), pi, pj, var, lam, tol, max_sweeps)
    obj = convex_objective(len(nodes), pi, pj, c, var, lam)
    return ConvexSolution(nodes, pairs, var, c, 1.0 / (var + lam), obj, gnorm, sweeps)
