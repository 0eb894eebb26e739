"""Error of omitted-part localization for different spring stiffness.

Centre distance between the voted box and the true part box, in canonical
window widths at the exemplar's scale.

    python scripts/localization_floor.py --exemplars 20
"""

import argparse

import numpy as np

from suvm.dictionary import DetectionSet
from suvm.detection import localize_part
from suvm.generative import sample_exemplar
from suvm.planted import model_from_layout, scatter_layout


def errors(model, n, seed):
    rng = np.random.default_rng(seed)
    out = []
    centre = lambda b: np.array([b[0] + b[2], b[1] + b[3]]) / 2
    for _ in range(n):
        ex = sample_exemplar(model, 2.0, rng, words=[g[0] for g in model.cipc.exclusive_groups])
        for p in range(model.cipc.n_parts):
            own = np.isin(ex.words, model.cipc.parts[p])
            truth = (ex.x[own].min(), ex.y[own].min(), (ex.x + ex.sx)[own].max(), (ex.y + ex.sy)[own].max())
            rest = ~own
            loc = localize_part(DetectionSet(ex.words[rest], ex.x[rest], ex.y[rest], ex.sx[rest], ex.sy[rest]),
                                model, p)
            out.append(np.linalg.norm(centre(loc.box) - centre(truth)) / (ex.scale * model.window[0]))
    return np.array(out)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--exemplars", type=int, default=20)
    ap.add_argument("--seed", type=int, default=3)
    args = ap.parse_args()
    print("xy stiffness      scale   median   p90")
    for xy, sc in (((250.0, 400.0), 150.0), ((400.0, 800.0), 300.0), ((1200.0, 1600.0), 600.0)):
        model = model_from_layout(scatter_layout(stiffness=xy, scale_stiffness=sc), inclusion_prob=1.0)
        e = errors(model, args.exemplars, args.seed)
        print(f"{xy[0]:5.0f}-{xy[1]:<5.0f}  {sc:10.0f}  {np.median(e):7.3f}  {np.quantile(e, 0.9):5.3f}")


if __name__ == "__main__":
    main()
