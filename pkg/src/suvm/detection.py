"""Object detection (grouping viewlet detections) and part localization."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components, dijkstra
from scipy.stats import chi2

from .dictionary import DetectionSet, VisualDictionary, WordDetection, scan_image
from .generative import Exemplar, SuvModel, exemplar_log_likelihood
from .imaging import DEFAULT_RATIO

CHI2_99_3DOF = float(chi2.ppf(0.99, 3))


@dataclass(frozen=True)
class DetectionParams:
    stride: int = 8
    ratio: float = DEFAULT_RATIO
    distance_percentile: float | None = 99.0  # assignment cutoff; None keeps every window
    chi2_threshold: float = CHI2_99_3DOF
    min_parts: int = 3
    max_hops: int = 2  # non-adjacent viewlets related through the embedding
    nms_iou: float | None = 0.5
    word_nms_iou: float | None = 0.3  # per-word suppression of overlapping windows before grouping
    max_layers: int | None = None


@dataclass
class ObjectDetection:
    box: tuple[float, float, float, float]  # x0, y0, x1, y1 in base pixels
    members: DetectionSet  # one representative per viewlet
    parts: tuple[int, ...]
    score: float
    breakdown: dict = field(default_factory=dict)
    support: DetectionSet | None = None  # every grouped detection

    @property
    def n_parts(self) -> int:
        return len(self.parts)

    def to_json(self) -> dict:
        return {"box": [round(float(v), 4) for v in self.box], "score": float(self.score),
                "parts": [int(p) for p in self.parts], "members": [int(w) for w in self.members.word]}


def box_iou(a, b) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


# ---------------------------------------------------------------------------
# Pair relations
# ---------------------------------------------------------------------------


@dataclass
class RelationTable:
    """Rest values and per-axis precisions for every related viewlet pair.

    Arrays are indexed by local viewlet index and oriented row -> column.
    Springs give (mu, c); pairs up to ``max_hops`` apart use the offsets
    implied by the embedding and the summed compliance of the shortest path.
    """

    mu: np.ndarray  # n x n x 3
    prec: np.ndarray  # n x n x 3, zero where unrelated
    is_edge: np.ndarray  # n x n
    reach: tuple[float, float]
    max_log_ratio: float


def relation_table(model: SuvModel, max_hops: int = 2) -> RelationTable:
    cache = model.__dict__.setdefault("_relations", {})
    if max_hops in cache:
        return cache[max_hops]
    srn, gpe = model.srn, model.gpe
    n = len(srn)
    mu = np.zeros((n, n, 3))
    prec = np.zeros((n, n, 3))
    is_edge = np.zeros((n, n), dtype=bool)
    ei, ej, c, m = srn.edge_arrays()
    mu[ei, ej], mu[ej, ei] = m, -m
    prec[ei, ej], prec[ej, ei] = c, c
    is_edge[ei, ej] = is_edge[ej, ei] = True
    if max_hops > 1:
        comp = np.zeros((n, n, 3))  # summed compliance along the BFS path
        with np.errstate(divide="ignore"):
            edge_comp = np.where(c > 0, 1.0 / c, np.inf)
        adj = [[] for _ in range(n)]
        for e, (i, j) in enumerate(zip(ei, ej)):
            adj[i].append((j, e))
            adj[j].append((i, e))
        S = gpe.scale
        for src in range(n):
            depth = {src: 0}
            acc = {src: np.zeros(3)}
            queue = deque([src])
            while queue:
                a = queue.popleft()
                if depth[a] == max_hops:
                    continue
                for b, e in adj[a]:
                    if b not in depth:
                        depth[b] = depth[a] + 1
                        acc[b] = acc[a] + edge_comp[e]
                        queue.append(b)
            for b, d in depth.items():
                if d >= 2:
                    comp[src, b] = acc[b]
        far = (comp[..., 0] > 0) & ~is_edge
        i, j = np.nonzero(far)
        span = S[i] + S[j]
        mu[i, j, 0] = (gpe.x[j] - gpe.x[i]) / span
        mu[i, j, 1] = (gpe.y[j] - gpe.y[i]) / span
        mu[i, j, 2] = np.log(S[j] / S[i])
        prec[i, j] = 1.0 / comp[i, j]
    related = prec[..., 0] > 0
    if related.any():
        sd = np.sqrt(1.0 / np.where(related[..., None], prec, 1.0))
        rx = float(np.max(np.abs(mu[..., 0]) + 4 * sd[..., 0], where=related, initial=0.0))
        ry = float(np.max(np.abs(mu[..., 1]) + 4 * sd[..., 1], where=related, initial=0.0))
        rs = float(np.max(np.abs(mu[..., 2]) + 4 * sd[..., 2], where=related, initial=0.0))
    else:
        rx = ry = rs = 0.0
    table = RelationTable(mu, prec, is_edge, (max(rx, 1.0), max(ry, 1.0)), rs)
    cache[max_hops] = table
    return table


def pair_residuals(table: RelationTable, li, lj, x, y, sx, sy, I, J) -> np.ndarray:
    """Precision-weighted squared deviation of (Zx, Zy, log Zs) from rest, per pair."""
    a, b = li[I], li[J]
    z = np.stack([(x[J] - x[I]) / (sx[I] + sx[J]), (y[J] - y[I]) / (sy[I] + sy[J]), np.log(sx[J] / sx[I])], 1)
    return np.sum(table.prec[a, b] * (z - table.mu[a, b]) ** 2, axis=1)


def pairwise_compatibility(det_i: WordDetection, det_j: WordDetection, model: SuvModel,
                           threshold: float = CHI2_99_3DOF) -> tuple[float, bool]:
    """Spring residual of two detections whose words share an SRN edge."""
    edge = model.srn.edge(det_i.word, det_j.word)
    if edge is None or det_i.word == det_j.word:
        raise ValueError(f"words {det_i.word} and {det_j.word} share no spring")
    c, mu = edge.oriented(det_i.word)
    z = np.array([(det_j.x - det_i.x) / (det_i.sx + det_j.sx), (det_j.y - det_i.y) / (det_i.sy + det_j.sy),
                  math.log(det_j.sx / det_i.sx)])
    r = float(np.sum(c * (z - mu) ** 2))
    return r, r <= threshold


# ---------------------------------------------------------------------------
# Grouping
# ---------------------------------------------------------------------------


def _best_members(model: SuvModel, dets: DetectionSet) -> np.ndarray:
    """Lowest-distance detection per viewlet, then per exclusive group."""
    group_of = model.cipc.group_of()
    best: dict[int, int] = {}
    order = np.lexsort((np.arange(len(dets)), dets.distance))
    for k in order:
        g = group_of[int(dets.word[k])]
        if g not in best:
            best[g] = int(k)
    return np.array(sorted(best.values()), dtype=np.int64)


def _group_detection(model: SuvModel, dets: DetectionSet) -> ObjectDetection:
    pick = _best_members(model, dets)
    members = dets[pick]
    ex = Exemplar((), members.word, members.x, members.y, members.sx, members.sy, 1.0, None, members.distance)
    score, parts = exemplar_log_likelihood(model, ex)
    box = (float(members.x.min()), float(members.y.min()), float((members.x + members.sx).max()),
           float((members.y + members.sy).max()))
    covered = tuple(sorted({model.cipc.part_of[int(w)] for w in members.word}))
    return ObjectDetection(box, members, covered, float(score), parts, dets)


def _expand(starts, ends):
    lengths = ends - starts
    total = int(lengths.sum())
    rows = np.repeat(np.arange(len(starts)), lengths)
    offsets = np.arange(total) - np.repeat(np.cumsum(lengths) - lengths, lengths)
    return rows, np.repeat(starts, lengths) + offsets


def compatible_pairs(dets: DetectionSet, li: np.ndarray, table: RelationTable, threshold: float):
    """All compatible (i, j) detection pairs, found per related word pair.

    Partners of a query are looked up in a grid over the other word's
    detections, centred on the rest offset and sized by the spring tolerance,
    so the work per query is bounded by the local density of one word.
    """
    by_word = {int(w): np.flatnonzero(li == w) for w in np.unique(li)}
    out_i, out_j = [], []
    scale = math.sqrt(threshold)
    for a, qa in by_word.items():
        for b, tb in by_word.items():
            if b <= a or table.prec[a, b, 0] <= 0:
                continue
            mu, prec = table.mu[a, b], table.prec[a, b]
            tol = scale / np.sqrt(prec)  # per-axis half-width in Z units
            r_hi, r_lo = math.exp(mu[2] + tol[2]), math.exp(mu[2] - tol[2])
            # predicted partner corner; the partner extent is only known to lie
            # in [r_lo, r_hi] times the query's, which widens the search box
            span_x = dets.sx[qa] * (1.0 + r_hi)
            span_y = dets.sy[qa] * (1.0 + r_hi)
            px = dets.x[qa] + mu[0] * span_x
            py = dets.y[qa] + mu[1] * span_y
            hx = tol[0] * span_x + abs(mu[0]) * dets.sx[qa] * (r_hi - r_lo)
            hy = tol[1] * span_y + abs(mu[1]) * dets.sy[qa] * (r_hi - r_lo)
            cell_x = max(float(hx.max()), 1e-9)
            cell_y = max(float(hy.max()), 1e-9)
            kx = np.floor(dets.x[tb] / cell_x).astype(np.int64)
            ky = np.floor(dets.y[tb] / cell_y).astype(np.int64)
            x0, y0 = kx.min() - 2, ky.min() - 2
            span = int(ky.max() - y0 + 3)
            keys = (kx - x0) * span + (ky - y0)
            order = np.argsort(keys, kind="stable")
            sk = keys[order]
            qx = np.floor(px / cell_x).astype(np.int64) - x0
            qy = np.floor(py / cell_y).astype(np.int64) - y0
            for dx in (-1, 0, 1):
                for dy in (-1, 0, 1):
                    cy = qy + dy
                    valid = (cy >= 0) & (cy < span) & (qx + dx >= 0)
                    q = np.where(valid, (qx + dx) * span + cy, -1)
                    lo = np.searchsorted(sk, q, side="left")
                    hi = np.where(valid, np.searchsorted(sk, q, side="right"), lo)
                    rows, pos = _expand(lo, hi)
                    if len(rows):
                        out_i.append(qa[rows])
                        out_j.append(tb[order[pos]])
    if not out_i:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty
    I, J = np.concatenate(out_i), np.concatenate(out_j)
    ok = pair_residuals(table, li, li, dets.x, dets.y, dets.sx, dets.sy, I, J) <= threshold
    return I[ok], J[ok]


def group_detections(dets: DetectionSet, model: SuvModel, params: DetectionParams = DetectionParams()):
    """Compatibility graph over viewlet detections and its qualifying components.

    Returns (detections, (I, J) compatible pairs).
    """
    table = relation_table(model, params.max_hops)
    local = np.full(int(max(dets.word.max(initial=0), max(model.viewlets)) + 1), -1, dtype=np.int64)
    local[list(model.viewlets)] = np.arange(len(model.viewlets))
    li = local[dets.word] if len(dets) else np.zeros(0, dtype=np.int64)
    keep = li >= 0
    dets, li = dets.select(keep), li[keep]
    n = len(dets)
    if n < 2:
        return [], (np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64))
    I, J = compatible_pairs(dets, li, table, params.chi2_threshold)
    graph = coo_matrix((np.ones(len(I)), (I, J)), shape=(n, n))
    ncomp, labels = connected_components(graph, directed=False)
    part_of = np.array([model.cipc.part_of[w] for w in model.viewlets])
    parts_per = part_of[li]
    order = np.argsort(labels, kind="stable")
    bounds = np.searchsorted(labels[order], np.arange(ncomp + 1))
    out = []
    for lab in range(ncomp):
        idx = order[bounds[lab]:bounds[lab + 1]]
        if len(idx) < 2 or len(np.unique(parts_per[idx])) < params.min_parts:
            continue
        out.append(_group_detection(model, dets[idx]))
    out.sort(key=lambda d: (-d.score, d.box))
    return out, (I, J)


def _grid_step(v: np.ndarray) -> float | None:
    u = np.unique(v)
    if len(u) < 2:
        return None
    step = float(np.diff(u).min())
    k = np.rint((u - u[0]) / step)
    return step if np.allclose(u[0] + k * step, u, atol=1e-6 * (1.0 + abs(u).max())) else None


def _layer_local_best(dets: DetectionSet, iou_threshold: float) -> np.ndarray:
    """Mask of windows no overlapping same-word neighbour in their scan grid beats.

    Applies to groups of equal-size windows (one pyramid layer) lying on a
    regular lattice; anything else passes through untouched.
    """
    keep = np.ones(len(dets), dtype=bool)
    key = np.stack([dets.layer.astype(np.float64), dets.sx, dets.sy], 1)
    _, group = np.unique(key, axis=0, return_inverse=True)
    group = group.ravel()
    for g in np.unique(group):
        idx = np.flatnonzero(group == g)
        if len(idx) < 2:
            continue
        x, y = dets.x[idx], dets.y[idx]
        stx, sty = _grid_step(x), _grid_step(y)
        if stx is None or sty is None:
            continue
        col = np.rint((x - x.min()) / stx).astype(np.int64)
        row = np.rint((y - y.min()) / sty).astype(np.int64)
        W, H = col.max() + 1, row.max() + 1
        if W * H > 4 * len(idx) + 64:
            continue  # too sparse for a dense lattice
        word = np.full((H, W), -1, dtype=np.int64)
        rank = np.full((H, W), np.iinfo(np.int64).max, dtype=np.int64)
        order = np.lexsort((idx, dets.distance[idx]))
        r = np.empty(len(idx), dtype=np.int64)
        r[order] = np.arange(len(idx))
        word[row, col] = dets.word[idx]
        rank[row, col] = r
        sx, sy = float(dets.sx[idx[0]]), float(dets.sy[idx[0]])
        beaten = np.zeros((H, W), dtype=bool)
        rx, ry = int(sx // stx), int(sy // sty)
        for dy in range(-ry, ry + 1):
            for dx in range(-rx, rx + 1):
                if dx == 0 and dy == 0:
                    continue
                ox, oy = max(sx - abs(dx) * stx, 0.0), max(sy - abs(dy) * sty, 0.0)
                inter = ox * oy
                if inter / (2 * sx * sy - inter) <= iou_threshold:
                    continue
                # neighbour at (row + dy, col + dx)
                ys0, ys1 = max(0, -dy), min(H, H - dy)
                xs0, xs1 = max(0, -dx), min(W, W - dx)
                if ys0 >= ys1 or xs0 >= xs1:
                    continue
                here_w = word[ys0:ys1, xs0:xs1]
                nb_w = word[ys0 + dy:ys1 + dy, xs0 + dx:xs1 + dx]
                nb_r = rank[ys0 + dy:ys1 + dy, xs0 + dx:xs1 + dx]
                beaten[ys0:ys1, xs0:xs1] |= (nb_w == here_w) & (nb_r < rank[ys0:ys1, xs0:xs1])
        keep[idx] = ~beaten[row, col]
    return keep


def suppress_word_duplicates(dets: DetectionSet, iou_threshold: float = 0.3) -> DetectionSet:
    """Keep, per word, the best-matching window of every overlapping cluster.

    Windows beaten by an overlapping same-word neighbour of their own scan
    lattice go first; the rest are suppressed greedily by assignment distance.
    Survivors are hashed by log2-extent level on a grid of that level's largest
    extent (overlap above the threshold bounds the level gap).
    """
    if len(dets) == 0:
        return dets
    dets = dets.select(_layer_local_best(dets, iou_threshold))
    span = max(1, math.ceil(-0.5 * math.log2(max(iou_threshold, 1e-12))))
    keep = []
    ext = np.maximum(dets.sx, dets.sy)
    levels = np.floor(np.log2(ext)).astype(np.int64)
    for w in np.unique(dets.word):
        idx = np.flatnonzero(dets.word == w)
        idx = idx[np.lexsort((idx, dets.distance[idx]))]
        grids: dict[int, dict[tuple[int, int], list[int]]] = {}
        for k in idx:
            x0, y0, sx, sy = dets.x[k], dets.y[k], dets.sx[k], dets.sy[k]
            box = (x0, y0, x0 + sx, y0 + sy)
            lev = int(levels[k])
            clash = False
            for lv in range(lev - span, lev + span + 1):
                grid = grids.get(lv)
                if not grid:
                    continue
                cell = 2.0 ** (lv + 1)
                r = int(math.ceil(max(ext[k], cell) / cell))
                cx, cy = int(x0 // cell), int(y0 // cell)
                for gx in range(cx - r, cx + r + 1):
                    for gy in range(cy - r, cy + r + 1):
                        for m in grid.get((gx, gy), ()):
                            other = (dets.x[m], dets.y[m], dets.x[m] + dets.sx[m], dets.y[m] + dets.sy[m])
                            if box_iou(box, other) > iou_threshold:
                                clash = True
                                break
                        if clash:
                            break
                    if clash:
                        break
                if clash:
                    break
            if not clash:
                cell = 2.0 ** (lev + 1)
                grids.setdefault(lev, {}).setdefault((int(x0 // cell), int(y0 // cell)), []).append(int(k))
                keep.append(int(k))
    return dets[np.sort(np.array(keep, dtype=np.int64))]


def viewlet_detections(image: np.ndarray, model: SuvModel, dictionary: VisualDictionary,
                       params: DetectionParams = DetectionParams()) -> DetectionSet:
    cutoff = dictionary.cutoff(params.distance_percentile)
    dets = scan_image(image, dictionary, params.stride, params.ratio, cutoff, params.max_layers)
    dets = dets.select(np.isin(dets.word, model.viewlets))
    if params.word_nms_iou is not None and len(dets):
        dets = suppress_word_duplicates(dets, params.word_nms_iou)
    return dets


def detect_in_detections(dets: DetectionSet, model: SuvModel,
                         params: DetectionParams = DetectionParams()) -> list[ObjectDetection]:
    found, _ = group_detections(dets, model, params)
    if params.nms_iou is not None:
        found = suppress_duplicates(found, params.nms_iou)
    return found


def detect_objects(image: np.ndarray, model: SuvModel, dictionary: VisualDictionary,
                   params: DetectionParams = DetectionParams()) -> list[ObjectDetection]:
    """Scan, keep viewlet words, group compatible detections, emit part-rich groups."""
    return detect_in_detections(viewlet_detections(image, model, dictionary, params), model, params)


def suppress_duplicates(dets: list[ObjectDetection], iou_threshold: float = 0.5) -> list[ObjectDetection]:
    """Greedy non-maximum suppression by score (ties: box coordinates)."""
    kept: list[ObjectDetection] = []
    for d in sorted(dets, key=lambda d: (-d.score, d.box)):
        if all(box_iou(d.box, k.box) <= iou_threshold for k in kept):
            kept.append(d)
    return kept


# ---------------------------------------------------------------------------
# Part localization
# ---------------------------------------------------------------------------


@dataclass
class PartLocalization:
    part: int
    present: bool
    box: tuple[float, float, float, float] | None
    votes: int
    dispersion: float  # median vote distance from the fused box, relative to its size


def geometric_median(points: np.ndarray, weights=None, iters: int = 200, tol: float = 1e-9) -> np.ndarray:
    """Weighted Weiszfeld iteration."""
    pts = np.asarray(points, dtype=np.float64)
    wts = np.ones(len(pts)) if weights is None else np.asarray(weights, dtype=np.float64)
    z = np.median(pts, axis=0)
    for _ in range(iters):
        d = np.linalg.norm(pts - z, axis=1)
        on = d < 1e-12
        if np.any(on):
            hit = pts[on][0]
            # stop on a data point when it is the optimum
            others = ~on
            if not others.any():
                return hit
            g = np.sum(wts[others, None] * (pts[others] - hit) / d[others, None], axis=0)
            if np.linalg.norm(g) <= wts[on].sum():
                return hit
            d = np.maximum(d, 1e-12)
        w = wts / d
        new = (pts * w[:, None]).sum(0) / w.sum()
        if np.linalg.norm(new - z) <= tol * (1.0 + np.linalg.norm(z)):
            return new
        z = new
    return z


def path_conductance(model: SuvModel, part: int) -> np.ndarray:
    """Per viewlet, 1 / (series compliance 1/c of the cheapest spring path to the part)."""
    n = len(model.srn)
    ei, ej, c, _ = model.srn.edge_arrays()
    if len(ei) == 0:
        return np.ones(n)
    comp = 2.0 / (c[:, 0] + c[:, 1])
    graph = coo_matrix((comp, (ei, ej)), shape=(n, n)).tocsr()
    src = [model.index(w) for w in model.cipc.parts[part]]
    R = dijkstra(graph, directed=False, indices=src, min_only=True)
    out = np.ones(n)  # unreachable or inside the part: uniform
    ok = np.isfinite(R) & (R > 0)
    out[ok] = 1.0 / R[ok]
    inside = np.zeros(n, dtype=bool)
    inside[src] = True
    if ok.any():
        out[inside] = out[ok].max() * 10.0
    return out


def part_box(model: SuvModel, part: int) -> tuple[float, float, float, float]:
    """Union of the part's viewlet windows in embedding units."""
    idx = [model.index(w) for w in model.cipc.parts[part]]
    g = model.gpe
    return (float(g.x[idx].min()), float(g.y[idx].min()), float((g.x[idx] + g.scale[idx]).max()),
            float((g.y[idx] + g.scale[idx]).max()))


def localize_part(members: DetectionSet, model: SuvModel, part: int) -> PartLocalization:
    """Every member votes for the part box through the embedding.

    Votes fuse by a geometric median weighted with the spring conductance
    between the voter and the part, so distant viewlets count less.
    """
    if not 0 <= part < model.cipc.n_parts:
        raise ValueError(f"unknown part {part}")
    px0, py0, px1, py1 = part_box(model, part)
    votes = []
    weights = []
    g = model.gpe
    conductance = path_conductance(model, part)
    for d in members:
        if d.word not in model.srn._index:
            continue
        k = model.index(d.word)
        weights.append(conductance[k])
        ux, uy = d.sx / g.scale[k], d.sy / g.scale[k]
        votes.append((d.x + (px0 - g.x[k]) * ux, d.y + (py0 - g.y[k]) * uy,
                      d.x + (px1 - g.x[k]) * ux, d.y + (py1 - g.y[k]) * uy))
    if not votes:
        return PartLocalization(part, False, None, 0, math.inf)
    votes = np.array(votes)
    fused = geometric_median(votes, weights)
    size = max(fused[2] - fused[0], fused[3] - fused[1], 1e-9)
    disp = float(np.median(np.linalg.norm(votes - fused, axis=1)) / size)
    return PartLocalization(part, True, tuple(float(v) for v in fused), len(votes), disp)
