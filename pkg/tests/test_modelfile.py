import struct

import numpy as np
import pytest

from suvm.config import RunConfig
from suvm.modelfile import MAGIC, VERSION, ModelFile, ModelFileError, file_checksum


@pytest.fixture(scope="module")
def container(fixture_model):
    model, dictionary, _ = fixture_model
    return ModelFile(RunConfig().to_dict(), dictionary, [model, model], {"kind": "test", "note": "two copies"})


def _arrays(obj, prefix=""):
    """Every ndarray reachable through dataclass fields, keyed by path."""
    out = {}
    if isinstance(obj, np.ndarray):
        out[prefix] = obj
    elif hasattr(obj, "__dataclass_fields__"):
        for name in obj.__dataclass_fields__:
            out.update(_arrays(getattr(obj, name), f"{prefix}.{name}"))
    elif isinstance(obj, (list, tuple)):
        for k, v in enumerate(obj):
            out.update(_arrays(v, f"{prefix}[{k}]"))
    return out


def test_roundtrip_bit_identical(container, tmp_path):
    raw = container.to_bytes()
    assert raw[:4] == MAGIC
    back = ModelFile.from_bytes(raw)
    assert back.to_bytes() == raw
    assert back.config == container.config and back.meta == container.meta
    for ours, theirs in ((container.dictionary, back.dictionary), (container.models[0], back.models[0])):
        a, b = _arrays(ours), _arrays(theirs)
        assert a.keys() == b.keys() and a
        for key in a:
            assert a[key].dtype == b[key].dtype and a[key].tobytes() == b[key].tobytes(), key
    m0, m1 = container.models[0], back.models[0]
    assert m0.srn.edges == m1.srn.edges
    assert m0.cipc.parts == m1.cipc.parts and m0.cipc.exclusive_groups == m1.cipc.exclusive_groups
    digest = container.save(tmp_path / "m.suvm")
    assert digest == file_checksum(tmp_path / "m.suvm") == container.checksum()
    assert ModelFile.load(tmp_path / "m.suvm").checksum() == digest


def test_version_mismatch_rejected(container):
    raw = bytearray(container.to_bytes())
    fmt_offset = len(MAGIC)
    raw[fmt_offset:fmt_offset + 4] = struct.pack("<I", VERSION + 1)
    with pytest.raises(ModelFileError, match="version"):
        ModelFile.from_bytes(bytes(raw))


def test_corruption_detected(container):
    raw = bytearray(container.to_bytes())
    raw[len(raw) // 2] ^= 0xFF
    with pytest.raises(ModelFileError, match="checksum"):
        ModelFile.from_bytes(bytes(raw))
    with pytest.raises(ModelFileError, match="magic"):
        ModelFile.from_bytes(b"ABCD" + bytes(raw[4:]))
    with pytest.raises(ModelFileError):
        ModelFile.from_bytes(b"SUVM")


def test_json_export(container):
    view = container.to_json()
    assert view["format"] == {"magic": "SUVM", "version": VERSION}
    tags = [s["tag"] for s in view["sections"]]
    assert tags == ["CONF", "DICT", "MODL", "MODL", "META"]
