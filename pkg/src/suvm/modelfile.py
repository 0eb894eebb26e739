"""Binary model container.

Layout (little-endian)::

    magic "SUVM" | u32 version | u32 section count
    per section: 4-byte tag | u64 payload length | payload | 32-byte sha256 of payload
    trailer: 32-byte sha256 of every preceding byte

A payload is a u32-length-prefixed JSON manifest followed by the raw arrays it
references (``{"__array__": k}``), each stored as a u32-prefixed JSON header
``[dtype, shape]`` and its C-order bytes. Tags: CONF (run config), DICT
(visual dictionary), MODL (one per category model), META (free-form).
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dictionary import VisualDictionary
from .generative import SuvModel
from .imaging import HogParams, PcaProjection
from .semantics import CipcGraph, GpeEmbedding
from .srn import SpringEdge, Srn

MAGIC = b"SUVM"
VERSION = 1
_HEAD = struct.Struct("<4sII")
_SECTION = struct.Struct("<4sQ")
_U32 = struct.Struct("<I")


class ModelFileError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Payload codec
# ---------------------------------------------------------------------------


def _encode_payload(tree) -> bytes:
    arrays: list[np.ndarray] = []

    def strip(obj):
        if isinstance(obj, np.ndarray):
            arrays.append(obj)
            return {"__array__": len(arrays) - 1}
        if isinstance(obj, dict):
            return {str(k): strip(v) for k, v in obj.items()}
        if isinstance(obj, (list, tuple)):
            return [strip(v) for v in obj]
        if isinstance(obj, np.generic):
            return obj.item()
        return obj

    manifest = json.dumps(strip(tree), sort_keys=True, separators=(",", ":")).encode()
    out = io.BytesIO()
    out.write(_U32.pack(len(manifest)))
    out.write(manifest)
    for a in arrays:
        a = np.ascontiguousarray(a)
        dt = a.dtype.newbyteorder("<") if a.dtype.byteorder == ">" else a.dtype
        head = json.dumps([dt.str, list(a.shape)]).encode()
        out.write(_U32.pack(len(head)))
        out.write(head)
        out.write(a.astype(dt, copy=False).tobytes())
    return out.getvalue()


def _decode_payload(buf: bytes):
    view = memoryview(buf)
    (n,) = _U32.unpack_from(view, 0)
    manifest = json.loads(bytes(view[4:4 + n]))
    pos = 4 + n
    arrays = []
    while pos < len(buf):
        (h,) = _U32.unpack_from(view, pos)
        dtype, shape = json.loads(bytes(view[pos + 4:pos + 4 + h]))
        pos += 4 + h
        dt = np.dtype(dtype)
        size = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        arrays.append(np.frombuffer(bytes(view[pos:pos + size]), dtype=dt).reshape(shape).copy())
        pos += size

    def fill(obj):
        if isinstance(obj, dict):
            if set(obj) == {"__array__"}:
                return arrays[obj["__array__"]]
            return {k: fill(v) for k, v in obj.items()}
        if isinstance(obj, list):
            return [fill(v) for v in obj]
        return obj

    return fill(manifest)


# ---------------------------------------------------------------------------
# Object trees
# ---------------------------------------------------------------------------


def dictionary_tree(d: VisualDictionary) -> dict:
    return {
        "centroids": d.centroids, "window": list(d.window), "counts": d.counts, "word_variance": d.word_variance,
        "mean_patches": d.mean_patches, "distance_quantiles": d.distance_quantiles,
        "pca": {"mean": d.pca.mean, "basis": d.pca.basis, "explained_variance": d.pca.explained_variance,
                "explained_variance_ratio": d.pca.explained_variance_ratio},
        "hog": {"cell": d.hog.cell, "bins": d.hog.bins, "block": d.hog.block, "clip": d.hog.clip, "eps": d.hog.eps},
    }


def dictionary_from_tree(t: dict) -> VisualDictionary:
    return VisualDictionary(t["centroids"], PcaProjection(**t["pca"]), tuple(t["window"]), t["counts"],
                            t["word_variance"], t["mean_patches"], t["distance_quantiles"], HogParams(**t["hog"]))


def model_tree(m: SuvModel) -> dict:
    E = m.srn.edges
    return {
        "nodes": np.array(m.srn.nodes, dtype=np.int64),
        "edges": {"i": np.array([e.i for e in E], dtype=np.int64), "j": np.array([e.j for e in E], dtype=np.int64),
                  "c": np.array([e.c for e in E], dtype=np.float64).reshape(-1, 3),
                  "mu": np.array([e.mu for e in E], dtype=np.float64).reshape(-1, 3),
                  "variance": np.array([e.variance for e in E], dtype=np.float64),
                  "n": np.array([e.n for e in E], dtype=np.int64)},
        "cipc": {"edges": [[int(u), int(v), k] for u, v, k in m.cipc.edges],
                 "parts": [list(map(int, p)) for p in m.cipc.parts],
                 "groups": [list(map(int, g)) for g in m.cipc.exclusive_groups]},
        "gpe": {"x": m.gpe.x, "y": m.gpe.y, "scale": m.gpe.scale, "stress": float(m.gpe.stress),
                "converged": bool(m.gpe.converged), "sweeps": int(m.gpe.sweeps)},
        "window": list(m.window), "appearance_mean": m.appearance_mean, "appearance_var": m.appearance_var,
        "mean_patches": m.mean_patches, "inclusion_prob": float(m.inclusion_prob), "metadata": m.metadata,
    }


def model_from_tree(t: dict) -> SuvModel:
    nodes = tuple(int(w) for w in t["nodes"])
    e = t["edges"]
    edges = [SpringEdge(int(e["i"][k]), int(e["j"][k]), tuple(float(v) for v in e["c"][k]),
                        tuple(float(v) for v in e["mu"][k]), float(e["variance"][k]), int(e["n"][k]))
             for k in range(len(e["i"]))]
    parts = [tuple(p) for p in t["cipc"]["parts"]]
    cipc = CipcGraph(nodes, [(u, v, k) for u, v, k in t["cipc"]["edges"]],
                     {w: p for p, ws in enumerate(parts) for w in ws}, parts,
                     [tuple(g) for g in t["cipc"]["groups"]])
    g = t["gpe"]
    gpe = GpeEmbedding(nodes, g["x"], g["y"], g["scale"], g["stress"], g["converged"], g["sweeps"])
    return SuvModel(Srn(nodes, edges), cipc, gpe, tuple(t["window"]), t["appearance_mean"], t["appearance_var"],
                    t["mean_patches"], t["inclusion_prob"], t["metadata"])


# ---------------------------------------------------------------------------
# Container
# ---------------------------------------------------------------------------


@dataclass
class ModelFile:
    config: dict
    dictionary: VisualDictionary | None = None
    models: list[SuvModel] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def sections(self) -> list[tuple[bytes, dict]]:
        out = [(b"CONF", self.config)]
        if self.dictionary is not None:
            out.append((b"DICT", dictionary_tree(self.dictionary)))
        out += [(b"MODL", model_tree(m)) for m in self.models]
        out.append((b"META", self.meta))
        return out

    def to_bytes(self) -> bytes:
        secs = self.sections()
        buf = io.BytesIO()
        buf.write(_HEAD.pack(MAGIC, VERSION, len(secs)))
        for tag, tree in secs:
            payload = _encode_payload(tree)
            buf.write(_SECTION.pack(tag, len(payload)))
            buf.write(payload)
            buf.write(hashlib.sha256(payload).digest())
        body = buf.getvalue()
        return body + hashlib.sha256(body).digest()

    @classmethod
    def from_bytes(cls, data: bytes) -> "ModelFile":
        if len(data) < _HEAD.size + 32:
            raise ModelFileError("file too short to be a model file")
        magic, version, count = _HEAD.unpack_from(data, 0)
        if magic != MAGIC:
            raise ModelFileError("not a model file (bad magic)")
        if version != VERSION:
            raise ModelFileError(f"model file format version {version} is not supported (expected {VERSION})")
        body, trailer = data[:-32], data[-32:]
        if hashlib.sha256(body).digest() != trailer:
            raise ModelFileError("model file checksum mismatch (file corrupted)")
        pos = _HEAD.size
        out = cls({})
        for _ in range(count):
            tag, n = _SECTION.unpack_from(data, pos)
            pos += _SECTION.size
            payload = data[pos:pos + n]
            pos += n
            if hashlib.sha256(payload).digest() != data[pos:pos + 32]:
                raise ModelFileError(f"section {tag.decode()} checksum mismatch")
            pos += 32
            tree = _decode_payload(payload)
            if tag == b"CONF":
                out.config = tree
            elif tag == b"DICT":
                out.dictionary = dictionary_from_tree(tree)
            elif tag == b"MODL":
                out.models.append(model_from_tree(tree))
            elif tag == b"META":
                out.meta = tree
            else:
                raise ModelFileError(f"unknown section {tag!r}")
        return out

    def save(self, path) -> str:
        data = self.to_bytes()
        Path(path).write_bytes(data)
        return hashlib.sha256(data).hexdigest()

    @classmethod
    def load(cls, path) -> "ModelFile":
        return cls.from_bytes(Path(path).read_bytes())

    def checksum(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    def to_json(self) -> dict:
        """Inspection view: arrays become nested lists."""
        def plain(obj):
            if isinstance(obj, np.ndarray):
                return obj.tolist()
            if isinstance(obj, dict):
                return {str(k): plain(v) for k, v in obj.items()}
            if isinstance(obj, (list, tuple)):
                return [plain(v) for v in obj]
            if isinstance(obj, np.generic):
                return obj.item()
            return obj

        return {"format": {"magic": MAGIC.decode(), "version": VERSION},
                "sections": [{"tag": tag.decode(), "content": plain(tree)} for tag, tree in self.sections()]}


def file_checksum(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
