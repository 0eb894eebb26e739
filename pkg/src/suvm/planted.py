"""Planted models, planted dictionaries and rendered synthetic corpora with ground truth."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .dictionary import VisualDictionary, assign_words
from .generative import SuvModel, paste_windows, sample_exemplar
from .imaging import GradientField, HogParams, fit_pca, save_image, window_descriptors
from .semantics import CipcGraph, GpeEmbedding, canonicalize
from .srn import SpringEdge, Srn


@dataclass
class Layout:
    """Viewlet placements in embedding units plus the part structure.

    ``parts`` lists, per part, its exclusive groups (tuples of substitutable viewlets).
    """

    positions: dict[int, tuple[float, float, float]]  # word -> (X, Y, S)
    parts: list[list[tuple[int, ...]]]
    edges: list[tuple[int, int, tuple[float, float, float]]]  # (i, j, c)

    def rest(self, i: int, j: int) -> tuple[float, float, float]:
        xi, yi, si = self.positions[i]
        xj, yj, sj = self.positions[j]
        return ((xj - xi) / (si + sj), (yj - yi) / (si + sj), float(np.log(sj / si)))


def model_from_layout(layout: Layout, window=(32, 32), appearance_mean=None, appearance_var=None,
                      mean_patches=None, inclusion_prob: float = 0.9, seed: int = 0) -> SuvModel:
    nodes = tuple(sorted(layout.positions))
    edges = [SpringEdge(min(i, j), max(i, j), tuple(map(float, c)), layout.rest(min(i, j), max(i, j)))
             for i, j, c in layout.edges]
    srn = Srn(nodes, edges)
    index = {w: k for k, w in enumerate(nodes)}
    parts = [tuple(sorted(w for g in groups for w in g)) for groups in layout.parts]
    order = sorted(range(len(parts)), key=lambda p: index[parts[p][0]])
    parts = [parts[p] for p in order]
    groups = sorted((tuple(sorted(g)) for groups in layout.parts for g in groups), key=lambda g: index[g[0]])
    cipc = CipcGraph(nodes, [], {w: p for p, ws in enumerate(parts) for w in ws}, parts, groups)
    X = np.array([layout.positions[w][0] for w in nodes])
    Y = np.array([layout.positions[w][1] for w in nodes])
    S = np.array([layout.positions[w][2] for w in nodes])
    gpe = canonicalize(GpeEmbedding(nodes, X, Y, S, 0.0))
    rng = np.random.default_rng(seed)
    if appearance_mean is None:
        appearance_mean = rng.normal(0.0, 1.0, (len(nodes), 8))
    if appearance_var is None:
        appearance_var = np.full(len(nodes), 0.01)
    return SuvModel(srn, cipc, gpe, window, appearance_mean, appearance_var, mean_patches, inclusion_prob,
                    {"planted": True})


def chain_layout(stiffness: float = 50.0, seed: int = 0) -> Layout:
    """20 viewlets, 15 parts, 24 springs, max degree 3.

    A serpentine chain of single viewlets with four two-variant parts spliced
    in, ending in a triangle whose closing pair is a stiff, slightly shifted
    couple (one part).
    """
    rng = np.random.default_rng(seed)
    # part slots along a snake path on a 4 x 4 grid, 1.3 window spacing
    slots = [(c if r % 2 == 0 else 3 - c, r) for r in range(4) for c in range(4)][:15]
    names = ["S10", "S1", "a", "S2", "S3", "b", "S4", "S5", "c", "S6", "S7", "d", "S8", "S9", "T"]
    positions: dict[int, tuple[float, float, float]] = {}
    parts: list[list[tuple[int, ...]]] = []
    word_of: dict[str, list[int]] = {}
    next_id = 0
    for name, (cx, cy) in zip(names, slots):
        S = float(np.exp(rng.uniform(np.log(0.85), np.log(1.15))))
        X, Y = 1.3 * cx + rng.uniform(-0.1, 0.1), 1.3 * cy + rng.uniform(-0.1, 0.1)
        if name in "abcd":
            ids = [next_id, next_id + 1]
            for w in ids:
                positions[w] = (X, Y, S)
            parts.append([tuple(ids)])
        elif name == "T":
            ids = [next_id, next_id + 1]
            positions[ids[0]] = (X, Y, S)
            positions[ids[1]] = (X + 0.12, Y + 0.06, S * 1.05)
            parts.append([(ids[0],), (ids[1],)])
        else:
            ids = [next_id]
            positions[ids[0]] = (X, Y, S)
            parts.append([(ids[0],)])
        word_of[name] = ids
        next_id += len(ids)
    c = (stiffness, stiffness, stiffness)
    half = tuple(v / 2 for v in c)
    stiff = tuple(v * 10 for v in c)
    edges = []
    for a, b in zip(names[:-1], names[1:]):
        if b == "T":
            continue
        for u in word_of[a]:
            for v in word_of[b]:
                edges.append((u, v, c))
    t1, t2 = word_of["T"]
    s9 = word_of["S9"][0]
    edges += [(s9, t1, half), (s9, t2, half), (t1, t2, stiff)]
    return Layout(positions, parts, edges)


def grid_layout(rows: int = 3, cols: int = 3, spacing: float = 1.25, variant_parts=(0, 4, 8),
                stiffness=(100.0, 156.0), scale_stiffness: float = 100.0, seed: int = 0) -> Layout:
    """Grid of parts joined to their 4-neighbours; some parts have two exclusive variants."""
    rng = np.random.default_rng(seed)
    positions: dict[int, tuple[float, float, float]] = {}
    parts = []
    ids_of = []
    nid = 0
    for p in range(rows * cols):
        r, cc = divmod(p, cols)
        X, Y = spacing * cc, spacing * r
        S = float(np.exp(rng.uniform(np.log(0.92), np.log(1.08))))
        ids = [nid, nid + 1] if p in variant_parts else [nid]
        for w in ids:
            positions[w] = (X, Y, S)
        parts.append([tuple(ids)])
        ids_of.append(ids)
        nid += len(ids)
    edges = []
    for p in range(rows * cols):
        r, cc = divmod(p, cols)
        for q in ([p + 1] if cc + 1 < cols else []) + ([p + cols] if r + 1 < rows else []):
            for u in ids_of[p]:
                for v in ids_of[q]:
                    cxy = float(rng.uniform(*stiffness))
                    edges.append((u, v, (cxy, cxy, scale_stiffness)))
    return Layout(positions, parts, edges)


def scatter_layout(n_parts: int = 9, extent: float = 4.5, variant_parts=(0, 4, 8), degree: int = 3,
                   stiffness=(250.0, 400.0), scale_stiffness: float = 150.0, seed: int = 0,
                   max_tries: int = 10000) -> Layout:
    """Irregular non-overlapping part placement joined to nearest neighbours.

    Distinct pairwise offsets make relations word-specific, unlike a lattice
    where every neighbour pair looks alike.
    """
    rng = np.random.default_rng(seed)
    placed: list[tuple[float, float, float]] = []
    for _ in range(max_tries):
        if len(placed) == n_parts:
            break
        S = float(np.exp(rng.uniform(np.log(0.8), np.log(1.25))))
        X, Y = rng.uniform(0.0, extent, 2)
        if all(max(abs(X - x), abs(Y - y)) >= max(S, s) + 0.15 for x, y, s in placed):
            placed.append((float(X), float(Y), S))
    else:
        raise RuntimeError("could not place parts")
    if len(placed) < n_parts:
        raise RuntimeError("could not place parts")
    centers = np.array([(x + s / 2, y + s / 2) for x, y, s in placed])
    dist = np.linalg.norm(centers[:, None] - centers[None], axis=2)
    pairs = set()
    for p in range(n_parts):
        for q in np.argsort(dist[p])[1:degree]:
            pairs.add((min(p, int(q)), max(p, int(q))))
    # connect stragglers through their nearest outside neighbour
    while True:
        comp = {0}
        grow = True
        while grow:
            grow = False
            for a, b in pairs:
                if (a in comp) != (b in comp):
                    comp |= {a, b}
                    grow = True
        if len(comp) == n_parts:
            break
        inside, outside = sorted(comp), [p for p in range(n_parts) if p not in comp]
        sub = dist[np.ix_(inside, outside)]
        a, b = np.unravel_index(np.argmin(sub), sub.shape)
        pairs.add((min(inside[a], outside[b]), max(inside[a], outside[b])))
    positions: dict[int, tuple[float, float, float]] = {}
    parts, ids_of = [], []
    nid = 0
    for p, pos in enumerate(placed):
        ids = [nid, nid + 1] if p in variant_parts else [nid]
        for w in ids:
            positions[w] = pos
        parts.append([tuple(ids)])
        ids_of.append(ids)
        nid += len(ids)
    edges = []
    for p, q in sorted(pairs):
        for u in ids_of[p]:
            for v in ids_of[q]:
                cxy = float(rng.uniform(*stiffness))
                edges.append((u, v, (cxy, cxy, scale_stiffness)))
    return Layout(positions, parts, edges)


# ---------------------------------------------------------------------------
# Textures and planted dictionaries
# ---------------------------------------------------------------------------


def smooth_textures(n: int, size: int = 32, sigma: float = 3.0, seed: int = 0) -> np.ndarray:
    """Distinct smooth random patches with values in [30, 225]."""
    rng = np.random.default_rng(seed)
    out = np.empty((n, size, size))
    for k in range(n):
        t = gaussian_filter(rng.normal(size=(size, size)), sigma, mode="wrap")
        t = (t - t.min()) / max(t.max() - t.min(), 1e-12)
        out[k] = 30.0 + 195.0 * t
    return out


def _jittered_descriptors(patch, window, hog: HogParams, count, rng, background, max_shift, max_log_scale,
                          noise):
    w, h = window
    pad = 2 * max(w, h)
    xs, ys, fields = [], [], []
    rows = []
    for _ in range(count):
        f = float(np.exp(rng.uniform(-max_log_scale, max_log_scale)))
        pw, ph = max(int(round(w * f)), 1), max(int(round(h * f)), 1)
        canvas = np.full((h + 2 * pad, w + 2 * pad), background)
        dx, dy = rng.integers(-max_shift, max_shift + 1, 2)
        paste_windows(canvas, [patch], [(pad + (w - pw) // 2 + int(dx), pad + (h - ph) // 2 + int(dy), pw, ph)])
        if noise > 0:
            canvas = canvas + rng.normal(0.0, noise, canvas.shape)
        field_ = GradientField(canvas, hog)
        rows.append(window_descriptors(field_, np.array([pad]), np.array([pad]), window)[0])
    return np.array(rows)


def planted_dictionary(patches: np.ndarray, window=(32, 32), hog: HogParams = HogParams(), samples: int = 40,
                       pca_dim: int = 32, background: float = 128.0, max_shift: int = 2,
                       max_log_scale: float = 0.087, noise: float = 2.0, seed: int = 0) -> VisualDictionary:
    """Dictionary whose words are the given patches (viewlets, distractors) plus a blank word.

    Centroids are mean descriptors of jittered renders, so assignment tolerates
    the pyramid's scale steps and the scan stride.
    """
    rng = np.random.default_rng(seed)
    blank = np.full(patches.shape[1:], background)
    allp = np.concatenate([patches, blank[None]])
    raw = [_jittered_descriptors(p, window, hog, samples, rng, background, max_shift, max_log_scale, noise)
           for p in allp]
    X = np.concatenate(raw)
    labels = np.repeat(np.arange(len(allp)), samples)
    pca = fit_pca(X, min(pca_dim, X.shape[1], len(X) - 1))
    Y = pca.project(X)
    centroids = np.stack([Y[labels == k].mean(0) for k in range(len(allp))])
    words, dist = assign_words(Y, centroids)
    sq = np.sum((Y - centroids[labels]) ** 2, axis=1)
    var = np.array([max(sq[labels == k].mean() / Y.shape[1], 1e-12) for k in range(len(allp))])
    counts = np.bincount(words, minlength=len(allp))
    return VisualDictionary(centroids, pca, window, counts, var, allp, np.percentile(dist, np.arange(101)), hog)


# ---------------------------------------------------------------------------
# Synthetic corpora
# ---------------------------------------------------------------------------


@dataclass
class Instance:
    box: tuple[float, float, float, float]
    words: list[int]
    parts: list[int]
    scale: float
    windows: list[tuple[float, float, float, float]]  # x, y, w, h per placed viewlet
    part_boxes: dict[int, tuple[float, float, float, float]] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"label": "object", "box": [round(v, 4) for v in self.box], "scale": self.scale,
                "words": self.words, "parts": self.parts,
                "part_boxes": {str(k): [round(v, 4) for v in b] for k, b in self.part_boxes.items()}}


@dataclass
class SynthImage:
    image: np.ndarray
    instances: list[Instance]


@dataclass(frozen=True)
class SynthConfig:
    n_images: int = 200
    instances: tuple[int, int] = (1, 3)
    scales: tuple[float, float] = (0.5, 1.5)
    base_scale: float = 2.0  # pixels per canonical window pixel at scale 1
    omit_fraction: float = 0.2
    distractors: int = 2  # random background-word patches per image
    noise: float = 2.0
    background: float = 128.0
    shuffle: bool = False  # permute viewlets among an instance's windows (no valid geometry left)
    seed: int = 0


def _place(ex, origin):
    x0, y0, _, _ = ex.box
    return ex.translated(origin[0] - x0, origin[1] - y0)


def synth_image(model: SuvModel, cfg: SynthConfig, rng: np.random.Generator, distractor_patches=None,
                n_instances: int | None = None) -> SynthImage:
    """Instances in a left-to-right row separated by at least one window, optional distractors."""
    if n_instances is None:
        n_instances = int(rng.integers(cfg.instances[0], cfg.instances[1] + 1))
    w_px = model.window[0]
    margin = int(np.ceil(0.5 * w_px * cfg.base_scale * cfg.scales[1]))
    exemplars = []
    for _ in range(n_instances):
        s = float(np.exp(rng.uniform(np.log(cfg.scales[0]), np.log(cfg.scales[1]))))
        ex = sample_exemplar(model, s * cfg.base_scale, rng)
        if cfg.shuffle:
            ex = replace(ex, words=rng.permutation(ex.words))
        exemplars.append(ex)
    cursor = float(margin)
    placed = []
    prev_gap = 0.0
    for ex in exemplars:
        gap = float(ex.sx.max())
        cursor += max(gap, prev_gap) if placed else 0.0
        e = _place(ex, (cursor, float(margin)))
        placed.append(e)
        cursor = e.box[2]
        prev_gap = gap
    width = int(np.ceil(cursor)) + margin
    height = int(np.ceil(max(e.box[3] for e in placed))) + margin
    if distractor_patches is not None and cfg.distractors:
        band = int(np.ceil(w_px * cfg.base_scale))
        height += band  # distractors live in a strip below the objects
    canvas = np.full((height, width), cfg.background)
    instances = []
    for e in placed:
        x0 = np.floor(e.x).astype(int)
        y0 = np.floor(e.y).astype(int)
        ww = np.maximum(np.rint(e.sx).astype(int), 1)
        hh = np.maximum(np.rint(e.sy).astype(int), 1)
        order = np.argsort(-(ww * hh), kind="stable")
        paste_windows(canvas, [model.mean_patches[model.index(int(e.words[k]))] for k in order],
                      [(int(x0[k]), int(y0[k]), int(ww[k]), int(hh[k])) for k in order])
        box = (float(x0.min()), float(y0.min()), float((x0 + ww).max()), float((y0 + hh).max()))
        part_boxes = {}
        for k, w in enumerate(e.words):
            p = model.cipc.part_of[int(w)]
            b = (float(x0[k]), float(y0[k]), float(x0[k] + ww[k]), float(y0[k] + hh[k]))
            if p in part_boxes:
                o = part_boxes[p]
                b = (min(o[0], b[0]), min(o[1], b[1]), max(o[2], b[2]), max(o[3], b[3]))
            part_boxes[p] = b
        instances.append(Instance(box, [int(w) for w in e.words], [int(p) for p in e.parts], float(e.scale),
                                  [(float(x0[k]), float(y0[k]), float(ww[k]), float(hh[k]))
                                   for k in range(len(e))], part_boxes))
    if distractor_patches is not None and cfg.distractors:
        size = int(np.ceil(w_px * cfg.base_scale * 0.75))
        top = height - band + (band - size) // 2
        slots = max((width - size) // (size + 4), 1)
        for k in rng.choice(slots, size=min(cfg.distractors, slots), replace=False):
            patch = distractor_patches[int(rng.integers(len(distractor_patches)))]
            paste_windows(canvas, [patch], [(int(k) * (size + 4) + 2, top, size, size)])
    if cfg.noise > 0:
        canvas = canvas + rng.normal(0.0, cfg.noise, canvas.shape)
    return SynthImage(np.clip(canvas, 0.0, 255.0), instances)


def synth_corpus(model: SuvModel, cfg: SynthConfig = SynthConfig(), distractor_patches=None):
    rng = np.random.default_rng(cfg.seed)
    return [synth_image(model, cfg, rng, distractor_patches) for _ in range(cfg.n_images)]


def write_corpus(directory, images: list[SynthImage], category: str = "object") -> Path:
    """PNG files plus truth.json (boxes in base pixels)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for k, im in enumerate(images):
        name = f"img_{k:04d}.png"
        save_image(directory / name, im.image)
        entries.append({"file": name, "width": int(im.image.shape[1]), "height": int(im.image.shape[0]),
                        "objects": [dict(inst.to_json(), label=category) for inst in im.instances]})
    path = directory / "truth.json"
    path.write_text(json.dumps({"categories": [category], "images": entries}, indent=1))
    return path


def detection_fixture(seed: int = 0, texture_sigma: float = 3.0, n_distractors: int = 4):
    """Grid model with textured viewlets, its planted dictionary and the distractor patches."""
    layout = scatter_layout(seed=seed)
    n = len(layout.positions)
    textures = smooth_textures(n + n_distractors, 32, texture_sigma, seed)
    dictionary = planted_dictionary(textures, (32, 32), seed=seed)
    model = model_from_layout(layout, (32, 32), dictionary.centroids[:n], dictionary.word_variance[:n],
                              textures[:n], inclusion_prob=0.8)
    return model, dictionary, textures[n:]


