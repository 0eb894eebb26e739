import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from suvm.detection import DetectionParams, detect_objects
from suvm.eval import (
    GroundTruth,
    MetricsReport,
    confusion_matrix,
    iou,
    match_detections,
    match_image,
    metrics_from_counts,
    threshold_sweep,
)
from suvm.planted import (
    Layout,
    SynthConfig,
    model_from_layout,
    planted_dictionary,
    scatter_layout,
    smooth_textures,
    synth_corpus,
)


def test_perfect_and_empty():
    truths = [[(0, 0, 10, 10), (20, 20, 30, 30)], [(5, 5, 15, 15)]]
    rep = match_detections([[(b, 1.0) for b in t] for t in truths], truths)
    assert (rep.tp, rep.fp, rep.fn) == (3, 0, 0)
    assert rep.precision == rep.recall == 1.0
    rep = match_detections([[]], [[(k, 0, k + 1, 1) for k in range(0, 10, 2)]])
    assert (rep.tp, rep.fn, rep.recall) == (0, 5, 0.0)
    assert rep.precision == 1.0  # nothing claimed
    with pytest.raises(ValueError):
        match_detections([[]], [])


def _optimal_tp(dets, truths, thr):
    best = 0
    for perm in itertools.permutations(range(len(truths)), min(len(dets), len(truths))):
        for chosen in itertools.combinations(range(len(dets)), len(perm)):
            best = max(best, sum(iou(dets[d][0], truths[t]) >= thr for d, t in zip(chosen, perm)))
    return best


def test_small_instance_matches_exhaustive_assignment():
    truths = [(0, 0, 10, 10), (30, 0, 40, 10)]
    dets = [((1, 0, 11, 10), 0.9), ((30, 1, 40, 11), 0.8), ((6, 0, 16, 10), 0.7)]  # last one overlaps < 0.5
    tp, fp, fn, match = match_image(dets, truths, 0.5)
    assert tp == _optimal_tp(dets, truths, 0.5) == 2
    assert (fp, fn) == (1, 0)
    assert match == [0, 1, -1]


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000))
def test_greedy_matches_oracle_on_separated_truths(seed):
    # truths far apart: each detection can overlap at most one truth, where greedy is optimal
    rng = np.random.default_rng(seed)
    truths = [(100.0 * k, 0.0, 100.0 * k + 20, 20.0) for k in range(3)]
    dets = []
    for _ in range(int(rng.integers(0, 5))):
        t = truths[int(rng.integers(3))]
        off = rng.uniform(-12, 12, 2)
        dets.append(((t[0] + off[0], t[1] + off[1], t[2] + off[0], t[3] + off[1]), float(rng.random())))
    assert match_image(dets, truths)[0] == _optimal_tp(dets, truths, 0.5)


def test_permutation_stable():
    truths = [[(0, 0, 10, 10)]]
    dets = [((0, 0, 10, 10), 0.5), ((1, 0, 11, 10), 0.5), ((0, 1, 10, 11), 0.5)]
    runs = {match_image(list(p), truths[0])[:3] for p in itertools.permutations(dets)}
    assert runs == {(1, 2, 0)}
    claimed = {match_image(list(p), truths[0])[3][list(p).index(dets[0])] for p in itertools.permutations(dets)}
    assert claimed == {0}  # equal scores: lowest box coordinates go first


def _sweep_case(seed=0):
    rng = np.random.default_rng(seed)
    truth, dets = [], []
    for _ in range(15):
        t = [tuple(np.array([50.0 * k, 0, 50.0 * k + 30, 30])) for k in range(int(rng.integers(0, 4)))]
        d = [(tuple(np.array(b) + rng.normal(0, 4, 4)), float(rng.random())) for b in t if rng.random() < 0.8]
        d += [((500.0, 500.0, 530.0, 530.0), float(rng.random())) for _ in range(int(rng.integers(0, 2)))]
        truth.append(t)
        dets.append(d)
    return dets, truth


def test_threshold_sweep():
    dets, truth = _sweep_case()
    scores = [s for d in dets for _, s in d]
    cuts = [max(scores) + 1, 0.8, 0.5, 0.2, min(scores) - 1]
    curve = threshold_sweep(dets, truth, cuts)
    assert curve[0].recall == 0.0 and curve[0].tp == 0
    assert curve[-1].recall == match_detections(dets, truth).recall
    for point, cut in zip(curve, cuts):
        tp = fp = fn = 0
        for d, t in zip(dets, truth):
            a, b, c, _ = match_image([x for x in d if x[1] >= cut], t)
            tp, fp, fn = tp + a, fp + b, fn + c
        assert (point.tp, point.fp, point.fn) == (tp, fp, fn)
    assert all(a.recall <= b.recall for a, b in zip(curve, curve[1:]))


@settings(max_examples=50)
@given(st.integers(0, 500), st.integers(0, 500), st.integers(0, 500))
def test_report_consistency(tp, fp, fn):
    rep = MetricsReport(tp, fp, fn)
    assert 0.0 <= rep.precision <= 1.0 and 0.0 <= rep.recall <= 1.0
    if tp + fp:
        assert rep.precision == tp / (tp + fp)
    if tp + fn:
        assert rep.recall == tp / (tp + fn)
    back = rep.to_json()
    assert back["tp"] == tp and back["fp"] == fp


def test_counts_must_be_valid():
    with pytest.raises(ValueError):
        MetricsReport(-1, 0, 0)
    with pytest.raises(ValueError):
        metrics_from_counts(10, 0, 5)


def test_ground_truth_validation(tmp_path):
    good = {"categories": ["a"], "images": [{"file": "x.png", "width": 50, "height": 40,
                                             "objects": [{"label": "a", "box": [1, 2, 30, 40]}]}]}
    path = tmp_path / "truth.json"
    path.write_text(json.dumps(good))
    gt = GroundTruth.load(path)
    assert gt.boxes() == [[(1.0, 2.0, 30.0, 40.0)]] and gt.files == ["x.png"]
    for bad in ({"label": "b", "box": [1, 2, 3, 4]}, {"label": "a", "box": [1, 2, 60, 4]},
                {"label": "a", "box": [5, 5, 5, 9]}):
        with pytest.raises(ValueError):
            GroundTruth(["a"], [{"file": "x.png", "width": 50, "height": 40, "objects": [bad]}])


# -- confusion matrices ------------------------------------------------------------------


def test_confusion_degenerate_cases():
    cm = confusion_matrix(["a", "b", "c"], ["A", "never", "C"], [[1, 2], [3], []],
                          lambda m, im: [] if m == "never" else [im])
    assert cm.flagged == ["c"]
    assert np.all(np.isnan(cm.matrix[2]))
    np.testing.assert_array_equal(cm.matrix[:2, 1], 0.0)
    assert cm.to_json()["matrix"][2] == [None, None, None]
    with pytest.raises(ValueError):
        confusion_matrix(["a"], [1, 2], [[]], lambda m, im: [])


def _shift(layout, by):
    return Layout({w + by: p for w, p in layout.positions.items()},
                  [[tuple(w + by for w in g) for g in part] for part in layout.parts],
                  [(i + by, j + by, c) for i, j, c in layout.edges])


@pytest.mark.slow
def test_two_planted_categories_near_diagonal():
    a, b = scatter_layout(seed=0), scatter_layout(seed=1)
    na, nb = len(a.positions), len(b.positions)
    textures = smooth_textures(na + nb, 32, 3.0, seed=11)
    dictionary = planted_dictionary(textures, (32, 32), seed=11)
    C, V = dictionary.centroids, dictionary.word_variance
    models = [model_from_layout(a, (32, 32), C[:na], V[:na], textures[:na], inclusion_prob=0.8),
              model_from_layout(_shift(b, na), (32, 32), C[na:na + nb], V[na:na + nb], textures[na:],
                                inclusion_prob=0.8)]
    cfg = SynthConfig(n_images=6, instances=(1, 1), distractors=0, seed=3)
    queries = [[im.image for im in synth_corpus(m, cfg)] for m in models]
    params = DetectionParams(stride=4, ratio=2**-0.25, min_parts=4)
    cm = confusion_matrix(["a", "b"], models, queries, lambda m, im: detect_objects(im, m, dictionary, params))
    assert np.all(np.diag(cm.matrix) >= 0.9)
    assert cm.matrix[0, 1] <= 0.1 and cm.matrix[1, 0] <= 0.1
    assert math.isfinite(cm.matrix.sum())
