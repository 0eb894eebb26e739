"""Render a synthetic corpus from the planted scatter model, detect, and score.

    python scripts/closed_loop.py --n-images 200
"""

import argparse
import time

from suvm.detection import DetectionParams, detect_objects
from suvm.eval import match_detections, threshold_sweep
from suvm.planted import SynthConfig, detection_fixture, synth_corpus


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n-images", type=int, default=200)
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--shuffle", action="store_true", help="permute viewlets inside every instance")
    ap.add_argument("--min-parts", type=int, default=4)
    args = ap.parse_args()
    model, dictionary, distractors = detection_fixture(0)
    params = DetectionParams(stride=4, ratio=2**-0.25, min_parts=args.min_parts)
    t0 = time.perf_counter()
    corpus = synth_corpus(model, SynthConfig(n_images=args.n_images, seed=args.seed, shuffle=args.shuffle),
                          distractors)
    t1 = time.perf_counter()
    found = [[(d.box, d.score) for d in detect_objects(im.image, model, dictionary, params)] for im in corpus]
    t2 = time.perf_counter()
    truth = [[inst.box for inst in im.instances] for im in corpus]
    rep = match_detections(found, truth)
    print(f"images {len(corpus)}  instances {sum(map(len, truth))}  detections {sum(map(len, found))}")
    print(f"precision {rep.precision:.3f}  recall {rep.recall:.3f}  (tp {rep.tp}, fp {rep.fp}, fn {rep.fn})")
    print(f"synthesis {t1 - t0:.1f}s  detection {t2 - t1:.1f}s ({(t2 - t1) / len(corpus):.2f}s per image)")
    scores = sorted({s for d in found for _, s in d})
    if scores:
        for point in threshold_sweep(found, truth, scores[:: max(len(scores) // 8, 1)]):
            print(f"  score >= {point.threshold:9.3f}: P {point.precision:.3f} R {point.recall:.3f}")


if __name__ == "__main__":
    main()
