"""Command-line entry point: dict, learn, detect, localize, synth, eval, viz."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import __version__
from .config import RunConfig
from .detection import detect_objects, localize_part, viewlet_detections, detect_in_detections
from .dictionary import build_dictionary
from .eval import GroundTruth, match_detections, metrics_from_counts, threshold_sweep
from .imaging import InputError, iter_corpus, list_images, load_image
from .learn import NoCategoryError, learn_from_images, threshold_report
from .modelfile import ModelFile, ModelFileError

EXIT_OK, EXIT_USAGE, EXIT_NO_CATEGORY, EXIT_IO = 0, 2, 3, 4
FAILURE_QUOTA = 0.5  # fraction of unreadable images tolerated before aborting

log = logging.getLogger("suvm")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# Config plumbing
# ---------------------------------------------------------------------------

# flag dest -> dotted config path
FLAG_PATHS = {
    "seed": "seed",
    "k": "dictionary.k", "window": "dictionary.window", "n_patches": "dictionary.n_patches",
    "pca_dim": "dictionary.pca_dim",
    "stride": ("dictionary.stride", "detect.stride"), "pyramid_ratio": ("dictionary.ratio", "detect.ratio"),
    "distance_cutoff": "detect.distance_percentile",
    "lam": "learn.lam", "variance_threshold": "learn.variance_threshold", "min_support": "learn.min_support",
    "min_component": "learn.min_component", "radius": "learn.radius", "inclusion_prob": "learn.inclusion_prob",
    "chi2": "detect.chi2_threshold", "min_parts": "detect.min_parts", "max_hops": "detect.max_hops",
    "nms": "detect.nms_iou", "word_nms": "detect.word_nms_iou",
    "layout": "synth.layout", "n_images": "synth.n_images", "noise": "synth.noise",
    "iou": "iou",
}


def resolve_config(args) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        try:
            cfg = RunConfig.load(args.config)
        except OSError as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
        except (ValueError, TypeError) as exc:
            raise UsageError(f"bad config {args.config}: {exc}") from exc
    overrides = {}
    for dest, paths in FLAG_PATHS.items():
        value = getattr(args, dest, None)
        if value is None:
            continue
        for p in (paths if isinstance(paths, tuple) else (paths,)):
            overrides[p] = value
    return cfg.override(overrides)


def _load_model_file(path) -> ModelFile:
    if path is None or not Path(path).is_file():
        raise UsageError(f"model file not found: {path}")
    try:
        return ModelFile.load(path)
    except ModelFileError as exc:
        raise UsageError(f"{path}: {exc}") from exc


def _corpus(directory) -> list[Path]:
    try:
        paths = list_images(directory)
    except InputError as exc:
        raise UsageError(str(exc)) from exc
    if not paths:
        raise UsageError(f"no images in {directory}")
    return paths


def _read_corpus(paths):
    failures: list = []
    images = [im for _, _, im in iter_corpus(paths, failures)]
    for path, why in failures:
        log.warning("unreadable image %s: %s", path, why)
    if len(failures) > FAILURE_QUOTA * len(paths):
        raise OSError(f"{len(failures)} of {len(paths)} images unreadable")
    return images, failures


def _write_json(path, data) -> None:
    text = json.dumps(data, indent=1, sort_keys=True)
    if path in (None, "-"):
        sys.stdout.write(text + "\n")
    else:
        Path(path).write_text(text + "\n")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_dict(args) -> int:
    cfg = resolve_config(args)
    paths = _corpus(args.corpus)
    images, failures = _read_corpus(paths)
    if not images:
        raise OSError("no readable images")
    dc = cfg.dictionary
    d = build_dictionary(images, dc.k, dc.window, dc.n_patches, cfg.seed, dc.pca_dim, dc.ratio, dc.max_iters,
                         dc.tol, dc.hog)
    meta = {"kind": "dictionary", "version": __version__, "images": [p.name for p in paths],
            "unreadable": [f for f, _ in failures], "patches": int(d.counts.sum()),
            "explained_variance": float(d.pca.explained_variance_ratio.sum())}
    digest = ModelFile(cfg.to_dict(), d, [], meta).save(args.output)
    print(f"dictionary: {d.k} words, {d.dim}-dim, {meta['patches']} patches -> {args.output} (sha256 {digest})")
    return EXIT_OK


def cmd_learn(args) -> int:
    cfg = resolve_config(args)
    dict_file = _load_model_file(args.dictionary)
    d = dict_file.dictionary
    if d is None:
        raise UsageError(f"{args.dictionary} holds no dictionary")
    if d.pca.input_dim != d.hog.dim(d.window):
        raise UsageError("dictionary descriptor dimension does not match its window")
    paths = _corpus(args.corpus)
    images, failures = _read_corpus(paths)
    print(threshold_report(cfg.learn))
    try:
        result = learn_from_images(images, d, cfg.learn, cfg.dictionary.stride, cfg.dictionary.ratio)
    except NoCategoryError as exc:
        print(f"no category discovered: {exc}", file=sys.stderr)
        return EXIT_NO_CATEGORY
    meta = {"kind": "model", "version": __version__, "images": [p.name for p in paths],
            "unreadable": [f for f, _ in failures], "springs": len(result.edges),
            "dictionary_sha256": ModelFile(dict_file.config, d, [], dict_file.meta).checksum()}
    digest = ModelFile(cfg.to_dict(), d, result.models, meta).save(args.output)
    for k, m in enumerate(result.models):
        print(f"model {k}: {len(m.viewlets)} viewlets, {len(m.srn.edges)} springs, {m.cipc.n_parts} parts")
    print(f"-> {args.output} (sha256 {digest})")
    return EXIT_OK


def _detect_image(path, mf: ModelFile, params, model_index):
    image = load_image(path)
    found = []
    for k, model in enumerate(mf.models):
        if model_index is None or k == model_index:
            found += [(k, det) for det in detect_objects(image, model, mf.dictionary, params)]
    return image, found


def _detect_job(job):
    path, raw, params, model_index = job
    _, found = _detect_image(path, ModelFile.from_bytes(raw), params, model_index)
    return [dict(det.to_json(), model=k) for k, det in found]


def _image_paths(items) -> list[Path]:
    paths = []
    for item in items:
        p = Path(item)
        if p.is_dir():
            paths += list_images(p)
        elif p.is_file():
            paths.append(p)
        else:
            raise UsageError(f"no such image: {p}")
    return paths


def cmd_detect(args) -> int:
    cfg = resolve_config(args)
    mf = _load_model_file(args.model)
    if not mf.models:
        raise UsageError(f"{args.model} holds no category model")
    paths = _image_paths(args.images)
    if args.jobs > 1 and not args.overlay_dir:
        raw = mf.to_bytes()
        with ProcessPoolExecutor(args.jobs) as pool:
            results = list(pool.map(_detect_job, [(p, raw, cfg.detect, args.model_index) for p in paths]))
    else:
        results = []
        if args.overlay_dir:
            from .viz import write_overlay

            Path(args.overlay_dir).mkdir(parents=True, exist_ok=True)
        for p in paths:
            image, found = _detect_image(p, mf, cfg.detect, args.model_index)
            results.append([dict(det.to_json(), model=k) for k, det in found])
            if args.overlay_dir:
                model = mf.models[args.model_index or 0]
                write_overlay(Path(args.overlay_dir) / f"{p.stem}_overlay.png", image,
                              [det for k, det in found if k == (args.model_index or 0)], model)
    entries = [{"file": p.name, "detections": r} for p, r in zip(paths, results)]
    _write_json(args.output, {"config": cfg.to_dict(), "model_sha256": mf.checksum(), "images": entries})
    total = sum(len(r) for r in results)
    print(f"{total} detections in {len(paths)} images", file=sys.stderr)
    return EXIT_OK


def cmd_localize(args) -> int:
    cfg = resolve_config(args)
    mf = _load_model_file(args.model)
    k = args.model_index or 0
    if k >= len(mf.models):
        raise UsageError(f"model index {k} out of range")
    model = mf.models[k]
    if not 0 <= args.part < model.cipc.n_parts:
        raise UsageError(f"part {args.part} not in 0..{model.cipc.n_parts - 1}")
    entries = []
    for p in _image_paths(args.images):
        image = load_image(p)
        found = detect_in_detections(viewlet_detections(image, model, mf.dictionary, cfg.detect), model,
                                     cfg.detect)
        locs = []
        for det in found:
            loc = localize_part(det.support if det.support is not None else det.members, model, args.part)
            locs.append({"object_box": [float(v) for v in det.box], "present": loc.present,
                         "box": None if loc.box is None else [float(v) for v in loc.box],
                         "votes": loc.votes, "dispersion": loc.dispersion if loc.present else None})
        entries.append({"file": p.name, "part": args.part, "localizations": locs})
    _write_json(args.output, {"config": cfg.to_dict(), "model_sha256": mf.checksum(), "images": entries})
    return EXIT_OK


def cmd_synth(args) -> int:
    from .planted import SynthConfig, detection_fixture, synth_corpus, write_corpus

    cfg = resolve_config(args)
    s = cfg.synth
    if s.layout != "scatter":
        raise UsageError(f"only the scatter layout can be rendered, not {s.layout!r}")
    model, d, distractors = detection_fixture(cfg.seed)
    model.inclusion_prob = s.inclusion_prob
    sc = SynthConfig(n_images=s.n_images, instances=tuple(s.instances), scales=tuple(s.scales),
                     base_scale=s.base_scale, distractors=s.distractors, noise=s.noise, seed=cfg.seed)
    out = Path(args.output)
    images = synth_corpus(model, sc, distractors)
    truth = write_corpus(out, images)
    data = json.loads(truth.read_text())
    data["config"] = cfg.to_dict()
    truth.write_text(json.dumps(data, indent=1))
    ModelFile(cfg.to_dict(), d, [model], {"kind": "planted", "version": __version__}).save(out / "planted.suvm")
    tuned = cfg.override({"detect.stride": 4, "detect.ratio": 2.0 ** -0.25, "detect.min_parts": 4})
    (out / "detect_config.json").write_text(tuned.to_json())
    n_obj = sum(len(im.instances) for im in images)
    print(f"{len(images)} images, {n_obj} instances -> {out} (planted model: {out / 'planted.suvm'})")
    return EXIT_OK


def _scored(entries, model_index=None):
    out = {}
    for e in entries:
        dets = [d for d in e["detections"] if model_index is None or d.get("model", 0) == model_index]
        out[e["file"]] = [(tuple(d["box"]), float(d["score"])) for d in dets]
    return out


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    if args.tp is not None:
        if args.fp is None or args.positives is None:
            raise UsageError("--tp needs --fp and --positives")
        report = metrics_from_counts(args.tp, args.fp, args.positives)
    else:
        if not args.detections or not args.truth:
            raise UsageError("eval needs --detections and --truth (or --tp/--fp/--positives)")
        truth = GroundTruth.load(args.truth)
        det = json.loads(Path(args.detections).read_text())
        scored = _scored(det["images"], args.model_index)
        missing = [f for f in truth.files if f not in scored]
        if missing:
            raise UsageError(f"detections missing for {len(missing)} truth images (first: {missing[0]})")
        dets = [scored[f] for f in truth.files]
        boxes = truth.boxes(args.label)
        report = match_detections(dets, boxes, cfg.iou)
        if args.thresholds:
            report.curve = [vars(p) for p in threshold_sweep(dets, boxes, args.thresholds, cfg.iou)]
    sys.stdout.write(report.table())
    if args.output:
        _write_json(args.output, dict(report.to_json(), config=cfg.to_dict()))
    return EXIT_OK


def cmd_viz(args) -> int:
    from .imaging import save_image
    from .semantics import embedding_table
    from .viz import word_montage, write_embedding_svg

    mf = _load_model_file(args.model)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    for k, model in enumerate(mf.models):
        write_embedding_svg(out / f"model_{k}_gpe.svg", model)
        (out / f"model_{k}_gpe.txt").write_text(embedding_table(model.gpe, model.cipc))
    if mf.dictionary is not None and mf.dictionary.mean_patches is not None:
        save_image(out / "words.png", word_montage(mf.dictionary.mean_patches))
    (out / "config.json").write_text(json.dumps(mf.config, indent=1, sort_keys=True))
    print(f"{len(mf.models)} embedding map(s) -> {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _pair(text: str) -> tuple[int, int]:
    parts = text.lower().replace("x", ",").split(",")
    if len(parts) != 2:
        raise argparse.ArgumentTypeError("expected W,H")
    return int(parts[0]), int(parts[1])


def _optional_float(text: str):
    return None if text.lower() in ("none", "off") else float(text)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="suvm", description=__doc__)
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON run config; flags override it")
        p.add_argument("--seed", type=int)

    def scan_flags(p):
        p.add_argument("--stride", type=int)
        p.add_argument("--pyramid-ratio", type=float)

    def detect_flags(p):
        scan_flags(p)
        p.add_argument("--distance-cutoff", type=_optional_float, help="assignment-distance percentile, or off")
        p.add_argument("--chi2", type=float)
        p.add_argument("--min-parts", type=int)
        p.add_argument("--max-hops", type=int)
        p.add_argument("--nms", type=_optional_float)
        p.add_argument("--word-nms", type=_optional_float)
        p.add_argument("--model-index", type=int)

    p = sub.add_parser("dict", help="learn a visual dictionary from a corpus directory")
    common(p)
    scan_flags(p)
    p.add_argument("corpus")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--k", type=int)
    p.add_argument("--window", type=_pair)
    p.add_argument("--n-patches", type=int)
    p.add_argument("--pca-dim", type=int)
    p.set_defaults(func=cmd_dict)

    p = sub.add_parser("learn", help="learn category models from a corpus and a dictionary")
    common(p)
    scan_flags(p)
    p.add_argument("corpus")
    p.add_argument("-d", "--dictionary", required=True)
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--lam", type=float)
    p.add_argument("--variance-threshold", type=float)
    p.add_argument("--min-support", type=int)
    p.add_argument("--min-component", type=int)
    p.add_argument("--radius", type=_optional_float)
    p.add_argument("--inclusion-prob", type=float)
    p.set_defaults(func=cmd_learn)

    p = sub.add_parser("detect", help="detect object instances")
    common(p)
    detect_flags(p)
    p.add_argument("images", nargs="+")
    p.add_argument("-m", "--model", required=True)
    p.add_argument("-o", "--output", default="-")
    p.add_argument("--overlay-dir")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("localize", help="localize one part inside detected instances")
    common(p)
    detect_flags(p)
    p.add_argument("images", nargs="+")
    p.add_argument("-m", "--model", required=True)
    p.add_argument("--part", type=int, required=True)
    p.add_argument("-o", "--output", default="-")
    p.set_defaults(func=cmd_localize)

    p = sub.add_parser("synth", help="render a synthetic corpus with ground truth and its planted model")
    common(p)
    p.add_argument("output")
    p.add_argument("--layout")
    p.add_argument("--n-images", type=int)
    p.add_argument("--noise", type=float)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("eval", help="score detections against ground truth")
    common(p)
    p.add_argument("--detections")
    p.add_argument("--truth")
    p.add_argument("--label")
    p.add_argument("--iou", type=float)
    p.add_argument("--thresholds", type=float, nargs="*")
    p.add_argument("--model-index", type=int)
    p.add_argument("--tp", type=int)
    p.add_argument("--fp", type=int)
    p.add_argument("--positives", type=int)
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("viz", help="export embedding maps and word montages")
    p.add_argument("-m", "--model", required=True)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_viz)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"suvm {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, InputError) as exc:
        print(f"suvm {args.command}: I/O failure: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
