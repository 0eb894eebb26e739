"""From per-image word detections to category models: pairs, springs, components, parts, embedding."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .detection import suppress_word_duplicates
from .dictionary import DetectionSet, VisualDictionary, scan_image
from .generative import SuvModel
from .imaging import DEFAULT_RATIO
from .semantics import CipcTolerances, canonicalize, cipc_build, gpe_embed
from .srn import PairStats, SpringEdge, giant_components, matched_threshold, sparsify

log = logging.getLogger(__name__)


class NoCategoryError(RuntimeError):
    """No connected spring component reached the minimum size."""


@dataclass(frozen=True)
class LearnConfig:
    lam: float = 1.0
    variance_threshold: float = 0.1
    min_support: int = 20
    min_component: int = 3
    radius: float | None = 3.0  # pair window in Z units; None keeps every co-detected pair
    word_nms_iou: float | None = 0.3  # collapse overlapping same-word windows of a dense scan
    max_edges: int | None = None
    inclusion_prob: float = 0.9
    gpe_max_iters: int = 20000
    cipc: CipcTolerances = field(default_factory=CipcTolerances)


@dataclass
class LearnResult:
    stats: PairStats
    edges: list[SpringEdge]
    models: list[SuvModel]

    @property
    def edge_set(self) -> set[tuple[int, int]]:
        return {(e.i, e.j) for e in self.edges}


def accumulate(per_image: Iterable[DetectionSet], k: int, radius: float | None = None) -> PairStats:
    stats = PairStats(k)
    for dets in per_image:
        stats.push_image(dets, radius)
    return stats


def _appearance(nodes: Sequence[int], dictionary: VisualDictionary | None):
    if dictionary is None:
        return np.zeros((len(nodes), 1)), np.ones(len(nodes)), None
    idx = list(nodes)
    patches = dictionary.mean_patches[idx] if dictionary.mean_patches is not None else None
    return dictionary.centroids[idx], dictionary.word_variance[idx], patches


def models_from_stats(stats: PairStats, cfg: LearnConfig = LearnConfig(),
                      dictionary: VisualDictionary | None = None, window=(32, 32)) -> LearnResult:
    """Sparsify, split into giant components and build one model per component."""
    edges = sparsify(stats, cfg.lam, cfg.variance_threshold, cfg.min_support, cfg.max_edges)
    log.info("sparsified to %d springs (threshold %.4g, lambda %.4g, c_min %.4g)", len(edges),
             cfg.variance_threshold, cfg.lam, 1.0 / (cfg.variance_threshold + cfg.lam))
    comps = giant_components(edges, min_size=cfg.min_component)
    if not comps:
        raise NoCategoryError(f"no spring component with at least {cfg.min_component} viewlets")
    if dictionary is not None:
        window = dictionary.window
    models = []
    for idx, srn in enumerate(comps):
        cipc = cipc_build(srn, stats, cfg.cipc)
        gpe = canonicalize(gpe_embed(srn, max_iters=cfg.gpe_max_iters))
        mean, var, patches = _appearance(srn.nodes, dictionary)
        models.append(SuvModel(srn, cipc, gpe, window, mean, var, patches, cfg.inclusion_prob,
                               {"component": idx, "n_images": int(stats.n_images)}))
        log.info("component %d: %d viewlets, %d springs, %d parts", idx, len(srn), len(srn.edges),
                 cipc.n_parts)
    return LearnResult(stats, edges, models)


def learn_from_detections(per_image: Iterable[DetectionSet], k: int, cfg: LearnConfig = LearnConfig(),
                          dictionary: VisualDictionary | None = None, window=(32, 32)) -> LearnResult:
    return models_from_stats(accumulate(per_image, k, cfg.radius), cfg, dictionary, window)


def learn_from_images(images: Iterable[np.ndarray], dictionary: VisualDictionary,
                      cfg: LearnConfig = LearnConfig(), stride: int = 8, ratio: float = DEFAULT_RATIO,
                      distance_percentile: float | None = None) -> LearnResult:
    """Scan every image densely and learn from the resulting word detections."""
    cutoff = dictionary.cutoff(distance_percentile)

    def scans():
        for im in images:
            dets = scan_image(im, dictionary, stride, ratio, cutoff)
            if cfg.word_nms_iou is not None and len(dets):
                dets = suppress_word_duplicates(dets, cfg.word_nms_iou)
            yield dets

    return learn_from_detections(scans(), dictionary.k, cfg, dictionary)


def threshold_report(cfg: LearnConfig) -> str:
    c_min = 1.0 / (cfg.variance_threshold + cfg.lam)
    return (f"variance threshold {cfg.variance_threshold:g}, lambda {cfg.lam:g}: smallest kept stiffness "
            f"{c_min:.4g} (threshold for c_target={c_min:.4g} is {matched_threshold(c_min, cfg.lam):.4g})")


def edge_f1(learned: set[tuple[int, int]], truth: set[tuple[int, int]]) -> float:
    norm = lambda s: {(min(a, b), max(a, b)) for a, b in s}
    learned, truth = norm(learned), norm(truth)
    tp = len(learned & truth)
    if tp == 0:
        return 0.0
    p, r = tp / len(learned), tp / len(truth)
    return 2 * p * r / (p + r)
