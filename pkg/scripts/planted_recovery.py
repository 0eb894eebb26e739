"""Learn from exemplars of the planted chain model and compare with the truth.

    python scripts/planted_recovery.py --exemplars 500 --seeds 5
"""

import argparse
import math

import numpy as np

from suvm.dictionary import DetectionSet
from suvm.generative import sample_exemplar
from suvm.learn import LearnConfig, edge_f1, learn_from_detections
from suvm.planted import chain_layout, model_from_layout
from suvm.semantics import similarity_align


def run(n: int, seed: int, threshold: float):
    layout = chain_layout()
    model = model_from_layout(layout)
    rng = np.random.default_rng(seed)
    per_image = []
    for _ in range(n):
        s = float(np.exp(rng.uniform(math.log(0.5), math.log(2.0))))
        ex = sample_exemplar(model, s, rng, origin=tuple(rng.uniform(0, 400, 2)))
        per_image.append(DetectionSet(ex.words, ex.x, ex.y, ex.sx, ex.sy))
    res = learn_from_detections(per_image, len(layout.positions),
                                LearnConfig(variance_threshold=threshold, radius=None))
    truth = {(min(i, j), max(i, j)) for i, j, _ in layout.edges}
    g = res.models[0].gpe
    _, rmse = similarity_align(np.column_stack([g.x, g.y]), np.array([layout.positions[w][:2] for w in g.nodes]))
    return edge_f1(res.edge_set, truth), res.models[0].cipc.n_parts, len(layout.parts), rmse


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--exemplars", type=int, default=500)
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--threshold", type=float, default=0.09)
    args = ap.parse_args()
    print("seed  edge_f1  parts  gpe_rmse")
    for seed in range(args.seeds):
        f1, parts, want, rmse = run(args.exemplars, seed, args.threshold)
        print(f"{seed:4d}  {f1:7.3f}  {parts:2d}/{want:<2d}  {rmse:8.4f}")


if __name__ == "__main__":
    main()
