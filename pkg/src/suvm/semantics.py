"""Parts clustering (CIPC) and the global positional embedding (GPE) of an SRN."""

from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .spatial import UnionFind
from .srn import PairStats, Srn

log = logging.getLogger(__name__)

EXCLUSIVE = "exclusive"
STABLE = "stable"


@dataclass(frozen=True)
class CipcTolerances:
    exclusion_frac: float = 0.05  # co-occurrence cap as a fraction of min occurrences
    geometric_tol: float = 0.15  # per-axis rest-value agreement (Z units, log scale)
    min_shared: int = 2  # shared SRN neighbours for rule (i)
    stable_quantile: float = 0.1  # rule (ii): lowest decile of retained edge variances
    min_shared_stable: int = 1


@dataclass
class CipcGraph:
    nodes: tuple[int, ...]
    edges: list[tuple[int, int, str]]
    part_of: dict[int, int]
    parts: list[tuple[int, ...]]
    exclusive_groups: list[tuple[int, ...]]  # rule-(i) components, singletons included

    @property
    def n_parts(self) -> int:
        return len(self.parts)

    def group_of(self) -> dict[int, int]:
        return {w: g for g, members in enumerate(self.exclusive_groups) for w in members}

    def part_groups(self, part: int) -> list[tuple[int, ...]]:
        members = set(self.parts[part])
        return [g for g in self.exclusive_groups if g[0] in members]


def _relations_agree(srn: Srn, u: int, v: int, shared, tol: float) -> bool:
    for w in shared:
        _, mu_u = srn.edge(u, w).oriented(u)
        _, mu_v = srn.edge(v, w).oriented(v)
        if np.any(np.abs(mu_u - mu_v) > tol):
            return False
    return True


def cipc_build(srn: Srn, stats: PairStats, tol: CipcTolerances = CipcTolerances()) -> CipcGraph:
    """Join substitutable viewlets (rule i) and stably coupled ones (rule ii)."""
    nodes = srn.nodes
    nb = srn.neighbors()
    edges: list[tuple[int, int, str]] = []

    for a, u in enumerate(nodes):
        for v in nodes[a + 1:]:
            if srn.edge(u, v) is not None:
                continue
            shared = sorted(nb[u] & nb[v])
            if len(shared) < tol.min_shared:
                continue
            cap = tol.exclusion_frac * min(stats.occurrences[u], stats.occurrences[v])
            if stats.cooccurrence(u, v) > cap:
                continue
            if _relations_agree(srn, u, v, shared, tol.geometric_tol):
                edges.append((u, v, EXCLUSIVE))

    if srn.edges:
        cutoff = float(np.quantile([e.variance for e in srn.edges], tol.stable_quantile))
        for e in srn.edges:
            if e.variance > cutoff:
                continue
            shared = sorted(nb[e.i] & nb[e.j])
            if len(shared) >= tol.min_shared_stable and _relations_agree(srn, e.i, e.j, shared, tol.geometric_tol):
                edges.append((e.i, e.j, STABLE))

    index = {w: k for k, w in enumerate(nodes)}

    def components(kinds):
        uf = UnionFind(len(nodes))
        for u, v, kind in edges:
            if kind in kinds:
                uf.union(index[u], index[v])
        return [tuple(nodes[k] for k in g) for g in uf.groups()]

    parts = components({EXCLUSIVE, STABLE})
    part_of = {w: p for p, members in enumerate(parts) for w in members}
    return CipcGraph(nodes, sorted(edges), part_of, parts, components({EXCLUSIVE}))


# ---------------------------------------------------------------------------
# Global positional embedding
# ---------------------------------------------------------------------------


@dataclass
class GpeEmbedding:
    nodes: tuple[int, ...]
    x: np.ndarray  # window widths
    y: np.ndarray  # window heights
    scale: np.ndarray  # relative to the anchor
    stress: float
    converged: bool = True
    sweeps: int = 0
    history: list[float] = field(default_factory=list, repr=False)

    def index(self, word: int) -> int:
        return self.nodes.index(word)

    def position(self, word: int) -> tuple[float, float, float]:
        k = self.index(word)
        return float(self.x[k]), float(self.y[k]), float(self.scale[k])


def _axis_problems(srn: Srn, log_scale: np.ndarray | None):
    """(weights, targets) per axis for sum_e w_e (v_j - v_i - t_e)^2."""
    ei, ej, c, mu = srn.edge_arrays()
    out = {"s": (c[:, 2], mu[:, 2])}
    if log_scale is not None:
        span = np.exp(log_scale[ei]) + np.exp(log_scale[ej])
        out["x"] = (c[:, 0] / span**2, mu[:, 0] * span)
        out["y"] = (c[:, 1] / span**2, mu[:, 1] * span)
    return ei, ej, out


def _stress(ei, ej, w, t, v) -> float:
    return float(np.sum(w * (v[ej] - v[ei] - t) ** 2))


def _bfs_init(n, ei, ej, t, anchor) -> np.ndarray:
    adj = [[] for _ in range(n)]
    for e, (i, j) in enumerate(zip(ei, ej)):
        adj[i].append((j, t[e]))
        adj[j].append((i, -t[e]))
    v = np.zeros(n)
    seen = np.zeros(n, dtype=bool)
    seen[anchor] = True
    queue = deque([anchor])
    while queue:
        a = queue.popleft()
        for b, off in adj[a]:
            if not seen[b]:
                seen[b] = True
                v[b] = v[a] + off
                queue.append(b)
    return v


def _gauss_seidel(n, ei, ej, w, t, v, anchor, max_iters, tol):
    """Re-place each node at its weighted least-squares optimum given its neighbours."""
    inc = [[] for _ in range(n)]
    for e, (i, j) in enumerate(zip(ei, ej)):
        inc[i].append((j, w[e], -t[e]))
        inc[j].append((i, w[e], t[e]))
    stress = _stress(ei, ej, w, t, v)
    # rounding allowance for the monotonicity check
    slack = 1e-12 * float(np.sum(w)) * (1.0 + float(np.abs(t).max(initial=0.0))) ** 2
    history = [stress]
    converged = False
    sweeps = 0
    for sweeps in range(1, max_iters + 1):
        for a in range(n):
            if a == anchor or not inc[a]:
                continue
            num = sum(wt * (v[b] + off) for b, wt, off in inc[a])
            den = sum(wt for _, wt, _ in inc[a])
            v[a] = num / den
        new = _stress(ei, ej, w, t, v)
        assert new <= stress * (1 + 1e-12) + slack, "stress increased during a sweep"
        history.append(new)
        if stress - new <= tol * max(stress, 1e-300) or new == 0.0:
            converged = True
            stress = new
            break
        stress = new
    return v, stress, converged, sweeps, history


def gpe_embed(srn: Srn, stats: PairStats | None = None, max_iters: int = 20000, tol: float = 1e-13,
              init: str | dict | None = "bfs", seed: int = 0) -> GpeEmbedding:
    """Embed every viewlet at a global position and scale.

    Log-scales are solved first; positions then follow from
    X_j - X_i ~ mu_ij (S_i + S_j) with weights c / (S_i + S_j)^2. The frame
    is canonical: anchor (last node) at the origin with unit scale.
    ``stats`` overrides the rest values with the accumulated pair means.
    ``init`` is "bfs", "random" or a dict of starting arrays keyed by axis.
    """
    if not srn.is_connected():
        raise ValueError("GPE needs a connected spring network")
    if stats is not None:
        from .srn import SpringEdge

        srn = Srn(srn.nodes, [SpringEdge(e.i, e.j, e.c, tuple(stats.pair_mean(e.i, e.j)), e.variance, e.n)
                              for e in srn.edges])
    n = len(srn)
    anchor = n - 1
    rng = np.random.default_rng(seed)

    def start(axis, t, ei, ej):
        if isinstance(init, dict) and axis in init:
            v = np.array(init[axis], dtype=np.float64)
        elif init == "random":
            v = rng.normal(0.0, 3.0, n)
        else:
            v = _bfs_init(n, ei, ej, t, anchor)
        return v - v[anchor]

    total_stress = 0.0
    converged = True
    sweeps = 0
    history: list[float] = []
    ei, ej, probs = _axis_problems(srn, None)
    w, t = probs["s"]
    ls, st, ok, sw, hist = _gauss_seidel(n, ei, ej, w, t, start("s", t, ei, ej), anchor, max_iters, tol)
    total_stress += st
    converged &= ok
    sweeps += sw
    history += hist
    ei, ej, probs = _axis_problems(srn, ls)
    coords = {}
    for axis in ("x", "y"):
        w, t = probs[axis]
        v, st, ok, sw, hist = _gauss_seidel(n, ei, ej, w, t, start(axis, t, ei, ej), anchor, max_iters, tol)
        coords[axis] = v
        total_stress += st
        converged &= ok
        sweeps += sw
        history += hist
    if not converged:
        log.warning("GPE stopped after %d sweeps without reaching tolerance; returning best embedding", sweeps)
    return GpeEmbedding(srn.nodes, coords["x"], coords["y"], np.exp(ls), total_stress, converged, sweeps, history)


def gpe_least_squares(srn: Srn) -> GpeEmbedding:
    """Direct dense solve of the same three problems (reference for small networks)."""
    n = len(srn)
    anchor = n - 1
    free = np.arange(n) != anchor

    def solve(ei, ej, w, t):
        A = np.zeros((len(ei), n))
        A[np.arange(len(ei)), ej] = 1.0
        A[np.arange(len(ei)), ei] -= 1.0
        sw = np.sqrt(w)
        sol, *_ = np.linalg.lstsq(A[:, free] * sw[:, None], t * sw, rcond=None)
        v = np.zeros(n)
        v[free] = sol
        return v, _stress(ei, ej, w, t, v)

    ei, ej, probs = _axis_problems(srn, None)
    ls, s_stress = solve(ei, ej, *probs["s"])
    ei, ej, probs = _axis_problems(srn, ls)
    x, x_stress = solve(ei, ej, *probs["x"])
    y, y_stress = solve(ei, ej, *probs["y"])
    return GpeEmbedding(srn.nodes, x, y, np.exp(ls), s_stress + x_stress + y_stress)


def canonicalize(emb: GpeEmbedding) -> GpeEmbedding:
    """Anchor at the origin with unit scale (positions rescaled accordingly)."""
    k = len(emb.nodes) - 1
    s = emb.scale[k]
    return GpeEmbedding(emb.nodes, (emb.x - emb.x[k]) / s, (emb.y - emb.y[k]) / s, emb.scale / s, emb.stress,
                        emb.converged, emb.sweeps, emb.history)


def similarity_align(src: np.ndarray, dst: np.ndarray):
    """Least-squares similarity (rotation, uniform scale, translation) mapping src onto dst.

    Returns the aligned copy of src and the RMSE to dst.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    ms, md = src.mean(0), dst.mean(0)
    a, b = src - ms, dst - md
    U, sig, Vt = np.linalg.svd(a.T @ b)
    d = np.sign(np.linalg.det(U @ Vt)) or 1.0
    D = np.diag([1.0] * (src.shape[1] - 1) + [d])
    R = U @ D @ Vt
    scale = float(np.sum(sig * np.diag(D)) / np.sum(a**2)) if np.sum(a**2) > 0 else 1.0
    aligned = a @ R * scale + md
    return aligned, float(np.sqrt(np.mean(np.sum((aligned - dst) ** 2, axis=1))))


# ---------------------------------------------------------------------------
# Part regions and exports
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PartRegion:
    part: int
    members: tuple[int, ...]
    x: float  # mean top-left corner
    y: float
    scale_min: float
    scale_max: float
    scale_mean: float
    spread: float  # RMS distance of member corners from the mean

    @property
    def center(self) -> tuple[float, float]:
        return self.x + 0.5 * self.scale_mean, self.y + 0.5 * self.scale_mean


def part_regions(emb: GpeEmbedding, cipc: CipcGraph) -> dict[int, PartRegion]:
    if set(emb.nodes) != set(cipc.nodes):
        raise ValueError("embedding and parts graph cover different viewlets")
    out = {}
    for p, members in enumerate(cipc.parts):
        idx = [emb.index(w) for w in members]
        xs, ys, ss = emb.x[idx], emb.y[idx], emb.scale[idx]
        mx, my = float(xs.mean()), float(ys.mean())
        spread = float(np.sqrt(np.mean((xs - mx) ** 2 + (ys - my) ** 2)))
        out[p] = PartRegion(p, tuple(members), mx, my, float(ss.min()), float(ss.max()), float(ss.mean()), spread)
    return out


def _palette(n: int) -> list[str]:
    cols = []
    for k in range(max(n, 1)):
        h = (k * 0.618033988749895) % 1.0
        r, g, b = (int(255 * (0.5 + 0.45 * math.cos(2 * math.pi * (h + off)))) for off in (0.0, 1 / 3, 2 / 3))
        cols.append(f"#{r:02x}{g:02x}{b:02x}")
    return cols


def embedding_svg(emb: GpeEmbedding, cipc: CipcGraph | None = None, size: int = 600) -> str:
    """Scatter of embedded viewlets: position, marker radius ~ scale, colour = part."""
    xs, ys = emb.x, emb.y
    lo = np.array([xs.min(), ys.min()]) - 1.0
    hi = np.array([xs.max(), ys.max()]) + 1.0
    span = max(float((hi - lo).max()), 1e-9)
    k = size / span
    colors = _palette(cipc.n_parts if cipc else 1)
    lines = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
             f'viewBox="0 0 {size} {size}">', f'<rect width="{size}" height="{size}" fill="white"/>']
    for n, w in enumerate(emb.nodes):
        part = cipc.part_of[w] if cipc else 0
        cx, cy = (xs[n] - lo[0]) * k, (ys[n] - lo[1]) * k
        r = max(2.0, 4.0 * float(emb.scale[n]))
        lines.append(f'<circle class="viewlet" data-word="{w}" data-part="{part}" cx="{cx:.2f}" cy="{cy:.2f}" '
                     f'r="{r:.2f}" fill="{colors[part % len(colors)]}" fill-opacity="0.8"/>')
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


def embedding_table(emb: GpeEmbedding, cipc: CipcGraph | None = None) -> str:
    rows = ["word  part          X          Y      scale"]
    for n, w in enumerate(emb.nodes):
        part = cipc.part_of[w] if cipc else -1
        rows.append(f"{w:4d}  {part:4d}  {emb.x[n]:9.4f}  {emb.y[n]:9.4f}  {emb.scale[n]:9.4f}")
    rows.append(f"stress {emb.stress:.6g}")
    return "\n".join(rows) + "\n"
