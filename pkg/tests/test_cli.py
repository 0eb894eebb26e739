import json
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from suvm.cli import EXIT_IO, EXIT_NO_CATEGORY, EXIT_OK, EXIT_USAGE, main
from suvm.imaging import save_image
from suvm.modelfile import ModelFile, file_checksum


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert main(["synth", str(out), "--n-images", "4", "--seed", "2"]) == EXIT_OK
    return out


def _noise_corpus(directory, n=4, size=96, seed=0):
    directory.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    for k in range(n):
        save_image(directory / f"n{k}.png", rng.uniform(0, 255, (size, size)))
    return directory


def test_missing_model_is_usage_error(tmp_path, capsys):
    img = _noise_corpus(tmp_path / "c", 1) / "n0.png"
    assert main(["detect", str(img), "-m", str(tmp_path / "nope.suvm")]) == EXIT_USAGE
    assert "not found" in capsys.readouterr().err


def test_empty_corpus_is_usage_error(tmp_path):
    (tmp_path / "empty").mkdir()
    assert main(["dict", str(tmp_path / "empty"), "-o", str(tmp_path / "d.suvm")]) == EXIT_USAGE


def test_unreadable_images(tmp_path, capsys):
    corpus = _noise_corpus(tmp_path / "c", 3)
    (corpus / "broken.png").write_bytes(b"not an image")
    args = ["dict", str(corpus), "-o", str(tmp_path / "d.suvm"), "--k", "4", "--n-patches", "100", "--pca-dim", "8"]
    assert main(args) == EXIT_OK
    unreadable = ModelFile.load(tmp_path / "d.suvm").meta["unreadable"]
    assert len(unreadable) == 1 and str(unreadable[0]).endswith("broken.png")
    bad = tmp_path / "bad"
    bad.mkdir()
    for k in range(2):
        (bad / f"b{k}.png").write_bytes(b"junk")
    assert main(["dict", str(bad), "-o", str(tmp_path / "e.suvm")]) == EXIT_IO


def test_dictionary_deterministic_and_noise_learns_nothing(tmp_path):
    corpus = _noise_corpus(tmp_path / "c", 4)
    args = ["dict", str(corpus), "--k", "8", "--n-patches", "400", "--pca-dim", "16", "--seed", "3"]
    assert main(args + ["-o", str(tmp_path / "a.suvm")]) == EXIT_OK
    assert main(args + ["-o", str(tmp_path / "b.suvm")]) == EXIT_OK
    assert file_checksum(tmp_path / "a.suvm") == file_checksum(tmp_path / "b.suvm")
    code = main(["learn", str(corpus), "-d", str(tmp_path / "a.suvm"), "-o", str(tmp_path / "m.suvm")])
    assert code == EXIT_NO_CATEGORY
    assert not (tmp_path / "m.suvm").exists()


def test_synth_detect_eval_roundtrip(synth_dir, tmp_path):
    truth = json.loads((synth_dir / "truth.json").read_text())
    assert len(truth["images"]) == 4 and "config" in truth
    dets = tmp_path / "dets.json"
    code = main(["detect", str(synth_dir), "-m", str(synth_dir / "planted.suvm"),
                 "--config", str(synth_dir / "detect_config.json"), "-o", str(dets)])
    assert code == EXIT_OK
    out = json.loads(dets.read_text())
    assert out["config"]["detect"]["stride"] == 4
    assert [e["file"] for e in out["images"]] == [im["file"] for im in truth["images"]]
    report = tmp_path / "report.json"
    assert main(["eval", "--detections", str(dets), "--truth", str(synth_dir / "truth.json"), "-o", str(report),
                 "--thresholds", "-1000000.0", "1e9"]) == EXIT_OK
    rep = json.loads(report.read_text())
    assert rep["precision"] >= 0.9 and rep["recall"] >= 0.8
    assert rep["curve"][1]["recall"] == 0.0 and "config" in rep


def test_localize_command(synth_dir, tmp_path):
    out = tmp_path / "loc.json"
    first = sorted(synth_dir.glob("*.png"))[0]
    assert main(["localize", str(first), "-m", str(synth_dir / "planted.suvm"), "--part", "0",
                 "--config", str(synth_dir / "detect_config.json"), "-o", str(out)]) == EXIT_OK
    entry = json.loads(out.read_text())["images"][0]
    assert entry["part"] == 0 and entry["localizations"]
    assert all(loc["present"] for loc in entry["localizations"])
    assert main(["localize", str(first), "-m", str(synth_dir / "planted.suvm"), "--part", "99"]) == EXIT_USAGE


def test_batch_keeps_input_order(synth_dir, tmp_path):
    rng = np.random.default_rng(0)
    names = [f"t{k:03d}.png" for k in rng.permutation(100)]
    for name in names:
        save_image(tmp_path / name, rng.uniform(0, 255, (36, 36)))
    out = tmp_path / "d.json"
    assert main(["detect", *[str(tmp_path / n) for n in names], "-m", str(synth_dir / "planted.suvm"),
                 "-o", str(out)]) == EXIT_OK
    assert [e["file"] for e in json.loads(out.read_text())["images"]] == names


def test_flags_override_config_file(synth_dir, tmp_path):
    cfg = json.loads((synth_dir / "detect_config.json").read_text())
    cfg["detect"]["min_parts"] = 9
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    img = sorted(synth_dir.glob("*.png"))[0]
    out = tmp_path / "d.json"
    for extra, expect in (([], 9), (["--min-parts", "5"], 5)):
        assert main(["detect", str(img), "-m", str(synth_dir / "planted.suvm"), "--config", str(path),
                     "-o", str(out), *extra]) == EXIT_OK
        assert json.loads(out.read_text())["config"]["detect"]["min_parts"] == expect
    path.write_text("{not json")
    assert main(["detect", str(img), "-m", str(synth_dir / "planted.suvm"), "--config", str(path)]) == EXIT_USAGE


def test_viz_writes_marker_per_viewlet(synth_dir, tmp_path):
    assert main(["viz", "-m", str(synth_dir / "planted.suvm"), "-o", str(tmp_path / "viz")]) == EXIT_OK
    model = ModelFile.load(synth_dir / "planted.suvm").models[0]
    root = ET.parse(tmp_path / "viz" / "model_0_gpe.svg").getroot()
    circles = [c for c in root.iter() if c.tag.endswith("circle")]
    assert len(circles) == len(model.viewlets)
    assert {int(c.get("data-part")) for c in circles} == set(range(model.cipc.n_parts))
    assert (tmp_path / "viz" / "words.png").exists()
    assert "detect" in json.loads((tmp_path / "viz" / "config.json").read_text())


def test_eval_from_counts(capsys, tmp_path):
    out = tmp_path / "r.json"
    assert main(["eval", "--tp", "2965", "--fp", "54", "--positives", "3306", "-o", str(out)]) == EXIT_OK
    rep = json.loads(out.read_text())
    assert round(100 * rep["precision"], 1) == 98.2
    assert round(100 * rep["recall"], 1) == 89.7
    assert main(["eval", "--tp", "3"]) == EXIT_USAGE
