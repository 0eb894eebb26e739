import xml.etree.ElementTree as ET

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from suvm.dictionary import DetectionSet
from suvm.semantics import (
    CipcTolerances,
    canonicalize,
    cipc_build,
    embedding_svg,
    embedding_table,
    gpe_embed,
    gpe_least_squares,
    part_regions,
    similarity_align,
)
from suvm.srn import PairStats, SpringEdge, Srn

from conftest import random_srn, srns

# word 0 and 1 (and 4 in the triple case) are substitutes; 2 and 3 are shared neighbours
REST = {2: (1.0, 0.0, 0.0), 3: (0.0, 1.0, 0.0)}


def _substitutes(variants=(0, 1), shift=0.0, together=0):
    edges = []
    for k, v in enumerate(variants):
        for w, mu in REST.items():
            mu = (mu[0] + (shift if k else 0.0), mu[1], mu[2])
            edges.append(SpringEdge(min(v, w), max(v, w), (20.0,) * 3,
                                    mu if v < w else tuple(-m for m in mu), variance=0.05 + 0.001 * len(edges)))
    nodes = tuple(sorted(set(variants) | set(REST)))
    stats = PairStats(max(nodes) + 1)
    for n in range(60):
        words = [variants[n % len(variants)], 2, 3]
        if n < together:
            words.append(variants[(n + 1) % len(variants)])
        stats.push_image(DetectionSet(words, np.arange(len(words)) * 40.0, np.zeros(len(words)),
                                      np.full(len(words), 20.0), np.full(len(words), 20.0)))
    return Srn(nodes, edges), stats


def test_exclusive_substitutes_form_one_part():
    srn, stats = _substitutes()
    g = cipc_build(srn, stats)
    assert g.part_of[0] == g.part_of[1]
    assert g.part_of[2] != g.part_of[3] != g.part_of[0]
    assert (0, 1) in {tuple(sorted(e[:2])) for e in g.edges}
    assert g.group_of()[0] == g.group_of()[1]


def test_three_variants_merge():
    srn, stats = _substitutes((0, 1, 4))
    g = cipc_build(srn, stats)
    assert len({g.part_of[w] for w in (0, 1, 4)}) == 1
    assert g.n_parts == 3


def test_frequent_cooccurrence_blocks_merge():
    srn, stats = _substitutes(together=30)
    assert cipc_build(srn, stats).part_of[0] != cipc_build(srn, stats).part_of[1]


def test_geometric_disagreement_blocks_merge():
    srn, stats = _substitutes(shift=0.3)
    g = cipc_build(srn, stats)
    assert g.part_of[0] != g.part_of[1]
    loose = cipc_build(srn, stats, CipcTolerances(geometric_tol=0.5))
    assert loose.part_of[0] == loose.part_of[1]


def test_stable_pair_merges():
    # 0 and 1 sit almost on top of each other, tied by the stiffest spring, both anchored to 2
    edges = [SpringEdge(0, 1, (500.0,) * 3, (0.05, 0.0, 0.0), variance=0.001),
             SpringEdge(0, 2, (20.0,) * 3, (1.0, 0.0, 0.0), variance=0.05),
             SpringEdge(1, 2, (20.0,) * 3, (0.95, 0.0, 0.0), variance=0.06),
             SpringEdge(2, 3, (20.0,) * 3, (0.0, 1.0, 0.0), variance=0.07)]
    g = cipc_build(Srn((0, 1, 2, 3), edges), PairStats(4))
    assert g.part_of[0] == g.part_of[1]
    assert g.exclusive_groups == [(0,), (1,), (2,), (3,)]
    assert g.part_groups(g.part_of[0]) == [(0,), (1,)]


@settings(max_examples=30, deadline=None)
@given(srns(2, 8))
def test_cipc_partitions_nodes(srn):
    stats = PairStats(len(srn))
    g = cipc_build(srn, stats)
    flat = sorted(w for p in g.parts for w in p)
    assert flat == sorted(srn.nodes)
    assert sorted(w for grp in g.exclusive_groups for w in grp) == flat
    again = cipc_build(srn, stats)
    assert again.parts == g.parts and again.edges == g.edges


# -- embedding -------------------------------------------------------------------


def _edge(i, j, mu, c=10.0):
    return SpringEdge(i, j, (c, c, c), mu)


def test_chain_embeds_exactly():
    srn = Srn((0, 1, 2), [_edge(0, 1, (0.5, 0.0, 0.0)), _edge(1, 2, (0.5, 0.0, 0.0))])
    emb = canonicalize(gpe_embed(srn))
    np.testing.assert_allclose(emb.x - emb.x[0], [0.0, 1.0, 2.0], atol=1e-12)
    np.testing.assert_allclose(emb.y, 0.0, atol=1e-12)
    np.testing.assert_allclose(emb.scale, 1.0)
    assert emb.stress == pytest.approx(0.0, abs=1e-20)
    assert emb.converged


def test_contradictory_triangle_matches_least_squares():
    srn = Srn((0, 1, 2), [_edge(0, 1, (0.5, 0.1, 0.1), 10.0), _edge(1, 2, (0.5, -0.2, 0.0), 30.0),
                          _edge(0, 2, (0.7, 0.0, 0.3), 5.0)])
    emb, ref = gpe_embed(srn), gpe_least_squares(srn)
    for a in ("x", "y", "scale"):
        np.testing.assert_allclose(getattr(emb, a), getattr(ref, a), atol=1e-6)
    assert emb.stress == pytest.approx(ref.stress, rel=1e-6)
    assert emb.stress > 0


def _satisfiable(srn, rng):
    X, Y = rng.normal(0, 2, len(srn)), rng.normal(0, 2, len(srn))
    S = np.exp(rng.normal(0, 0.3, len(srn)))
    return Srn(srn.nodes, [SpringEdge(e.i, e.j, e.c, ((X[e.j] - X[e.i]) / (S[e.i] + S[e.j]),
                                                      (Y[e.j] - Y[e.i]) / (S[e.i] + S[e.j]), np.log(S[e.j] / S[e.i])))
                           for e in srn.edges])


@settings(max_examples=25, deadline=None)
@given(srns(3, 8), st.integers(0, 1000))
def test_embedding_independent_of_start(srn, seed):
    srn = _satisfiable(srn, np.random.default_rng(seed))
    a = canonicalize(gpe_embed(srn))
    b = canonicalize(gpe_embed(srn, init="random", seed=seed))
    for name in ("x", "y", "scale"):
        np.testing.assert_allclose(getattr(a, name), getattr(b, name), rtol=1e-6, atol=1e-6)


def _exemplar_stats(model, n, seed):
    from suvm.generative import sample_exemplar
    from suvm.srn import accumulate_pairs

    rng = np.random.default_rng(seed)
    images = []
    for _ in range(n):
        ex = sample_exemplar(model, float(np.exp(rng.uniform(-0.5, 0.5))), rng, origin=tuple(rng.uniform(0, 400, 2)))
        images.append(DetectionSet(ex.words, ex.x, ex.y, ex.sx, ex.sy))
    return accumulate_pairs(images, len(model.srn))


def test_planted_layout_recovered():
    from suvm.planted import grid_layout, model_from_layout

    lay = grid_layout()
    assert len(lay.positions) == 12
    model = model_from_layout(lay)
    emb = canonicalize(gpe_embed(model.srn, _exemplar_stats(model, 300, 0)))
    truth = np.array([lay.positions[w][:2] for w in emb.nodes])
    _, rmse = similarity_align(np.column_stack([emb.x, emb.y]), truth)
    assert rmse <= 0.05
    # parts cluster: intra-part spread below the spacing between part centroids
    regions = part_regions(emb, model.cipc)
    centres = np.array([[r.x, r.y] for r in regions.values()])
    gaps = np.linalg.norm(centres[:, None] - centres[None], axis=2)
    assert max(r.spread for r in regions.values()) < gaps[gaps > 0].min()


def test_stats_override_rest_values():
    srn = Srn((0, 1), [_edge(0, 1, (0.5, 0.0, 0.0))])
    stats = PairStats(2)
    stats.push_samples([0] * 3, [1] * 3, np.array([[0.25] * 3, [0.0] * 3, [0.0] * 3]))
    emb = canonicalize(gpe_embed(srn, stats))
    assert emb.x[1] - emb.x[0] == pytest.approx(0.5)


def test_disconnected_rejected():
    with pytest.raises(ValueError):
        gpe_embed(random_srn(np.random.default_rng(0), 5, connected=False, extra=1))


def test_similarity_align_recovers_transform():
    rng = np.random.default_rng(0)
    P = rng.normal(size=(12, 2))
    th = 0.7
    R = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    Q = 2.5 * P @ R.T + [3.0, -1.0]
    aligned, rmse = similarity_align(P, Q)
    assert rmse < 1e-10
    np.testing.assert_allclose(aligned, Q, atol=1e-10)
    _, mirrored = similarity_align(P * [1, -1], Q)
    assert mirrored > 0.1


# -- regions and exports -----------------------------------------------------------------


def test_part_regions():
    srn, stats = _substitutes()
    g = cipc_build(srn, stats)
    emb = canonicalize(gpe_embed(srn))
    regions = part_regions(emb, g)
    assert len(regions) == g.n_parts
    for p, r in regions.items():
        idx = [emb.index(w) for w in r.members]
        assert r.scale_min <= emb.scale[idx].min() + 1e-12 and emb.scale[idx].max() <= r.scale_max + 1e-12
        if len(r.members) == 1:
            assert (r.x, r.y, r.spread) == (emb.x[idx[0]], emb.y[idx[0]], 0.0)
    merged = regions[g.part_of[0]]
    assert merged.spread == pytest.approx(0.0, abs=1e-9)  # both substitutes embed at the same spot


def test_svg_and_table():
    srn, stats = _substitutes((0, 1, 4))
    g = cipc_build(srn, stats)
    emb = canonicalize(gpe_embed(srn))
    root = ET.fromstring(embedding_svg(emb, g))
    circles = [c for c in root.iter() if c.tag.endswith("circle") and c.get("class") == "viewlet"]
    assert len(circles) == len(srn)
    assert {int(c.get("data-word")): int(c.get("data-part")) for c in circles} == g.part_of
    table = embedding_table(emb, g)
    assert len(table.strip().splitlines()) == len(srn) + 2
