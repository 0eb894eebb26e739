"""Spatial hashing of multi-scale detections and a small union-find."""

from __future__ import annotations

import numpy as np

LEVEL_WIDTH = 0.05  # log-extent bin of one hashing level


class UnionFind:
    def __init__(self, size: int):
        self.parent = list(range(size))
        self.rank = [0] * size

    def find(self, a: int) -> int:
        parent = self.parent
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    def union(self, a: int, b: int) -> bool:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return False
        if self.rank[ra] < self.rank[rb]:
            ra, rb = rb, ra
        self.parent[rb] = ra
        if self.rank[ra] == self.rank[rb]:
            self.rank[ra] += 1
        return True

    def groups(self) -> list[list[int]]:
        out: dict[int, list[int]] = {}
        for i in range(len(self.parent)):
            out.setdefault(self.find(i), []).append(i)
        return sorted(out.values(), key=lambda g: g[0])


def _expand(starts: np.ndarray, ends: np.ndarray):
    """Row ids and flat positions for the ragged ranges [starts, ends)."""
    lengths = ends - starts
    total = int(lengths.sum())
    if total == 0:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
    rows = np.repeat(np.arange(len(starts)), lengths)
    offsets = np.arange(total) - np.repeat(np.cumsum(lengths) - lengths, lengths)
    return rows, np.repeat(starts, lengths) + offsets


def _level_pairs(xa, ya, xb, yb, cx, cy):
    """Candidate (a, b) index pairs whose grid cells are within one cell."""
    kbx = np.floor(xb / cx).astype(np.int64)
    kby = np.floor(yb / cy).astype(np.int64)
    span = int(kby.max() - kby.min() + 3) if len(kby) else 1
    key_b = (kbx - kbx.min() + 1) * span + (kby - kby.min() + 1)
    order = np.argsort(key_b, kind="stable")
    sorted_keys = key_b[order]
    kax = np.floor(xa / cx).astype(np.int64) - kbx.min() + 1
    kay = np.floor(ya / cy).astype(np.int64) - kby.min() + 1
    out_a, out_b = [], []
    for dx in (-1, 0, 1):
        for dy in (-1, 0, 1):
            qx, qy = kax + dx, kay + dy
            valid = (qy >= 0) & (qy < span)
            q = np.where(valid, qx * span + qy, -1)
            lo = np.searchsorted(sorted_keys, q, side="left")
            hi = np.searchsorted(sorted_keys, q, side="right")
            hi = np.where(valid, hi, lo)
            rows, pos = _expand(lo, hi)
            out_a.append(rows)
            out_b.append(order[pos])
    return np.concatenate(out_a), np.concatenate(out_b)


def neighbor_pairs(x, y, ex, ey, reach_x: float, reach_y: float, max_log_ratio: float = np.inf):
    """Index pairs (i < j) with |dx| <= reach_x*(ex_i+ex_j), same for y, and
    |log(ex_j/ex_i)| <= max_log_ratio.

    Detections are hashed per log-extent level; each level pair uses a grid whose
    cell is the largest admissible offset, so every query touches a 3x3 block
    of cells and the work stays linear in the number of detections for
    bounded density.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    ex = np.asarray(ex, dtype=np.float64)
    ey = np.asarray(ey, dtype=np.float64)
    n = len(x)
    if n < 2:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
    level_key = np.floor(np.log(ex) / LEVEL_WIDTH).astype(np.int64)
    levels, inverse = np.unique(level_key, return_inverse=True)
    order = np.argsort(inverse, kind="stable")
    bounds = np.searchsorted(inverse[order], np.arange(len(levels) + 1))
    members = [order[bounds[li]:bounds[li + 1]] for li in range(len(levels))]
    I, J = [], []
    for a in range(len(levels)):
        for b in range(a, len(levels)):
            if (levels[b] - levels[a] - 1) * LEVEL_WIDTH > max_log_ratio:
                break
            ia, ib = members[a], members[b]
            cx = reach_x * (ex[ia].max() + ex[ib].max())
            cy = reach_y * (ey[ia].max() + ey[ib].max())
            if cx <= 0 or cy <= 0:
                continue
            ra, rb = _level_pairs(x[ia], y[ia], x[ib], y[ib], cx, cy)
            gi, gj = ia[ra], ib[rb]
            keep = ((np.abs(x[gj] - x[gi]) <= reach_x * (ex[gi] + ex[gj]))
                    & (np.abs(y[gj] - y[gi]) <= reach_y * (ey[gi] + ey[gj]))
                    & (np.abs(np.log(ex[gj] / ex[gi])) <= max_log_ratio))
            if a == b:
                keep &= gi < gj
            gi, gj = gi[keep], gj[keep]
            lo, hi = np.minimum(gi, gj), np.maximum(gi, gj)
            I.append(lo)
            J.append(hi)
    if not I:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
    return np.concatenate(I), np.concatenate(J)
