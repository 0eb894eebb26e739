"""Visual exports: embedding maps (SVG) and detection overlays (PNG)."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import cv2
import numpy as np

from .detection import ObjectDetection, PartLocalization
from .generative import SuvModel
from .semantics import _palette, embedding_svg


def _rgb(hex_color: str) -> tuple[int, int, int]:
    return tuple(int(hex_color[k:k + 2], 16) for k in (1, 3, 5))


def write_embedding_svg(path, model: SuvModel, size: int = 600) -> Path:
    path = Path(path)
    path.write_text(embedding_svg(model.gpe, model.cipc, size))
    return path


def overlay(image: np.ndarray, detections: Sequence[ObjectDetection], model: SuvModel | None = None,
            parts: Sequence[PartLocalization] = ()) -> np.ndarray:
    """RGB uint8 copy of ``image`` with object boxes, member windows and part boxes."""
    gray = np.clip(np.round(image), 0, 255).astype(np.uint8)
    canvas = cv2.cvtColor(gray, cv2.COLOR_GRAY2RGB)
    colors = _palette(model.cipc.n_parts if model is not None else 1)
    for det in detections:
        if model is not None:
            for d in det.members:
                col = _rgb(colors[model.cipc.part_of[d.word] % len(colors)])
                p0 = (int(round(d.x)), int(round(d.y)))
                p1 = (int(round(d.x + d.sx)), int(round(d.y + d.sy)))
                cv2.rectangle(canvas, p0, p1, col, 1)
        x0, y0, x1, y1 = (int(round(v)) for v in det.box)
        cv2.rectangle(canvas, (x0, y0), (x1, y1), (255, 40, 40), 2)
    for loc in parts:
        if loc.box is not None:
            x0, y0, x1, y1 = (int(round(v)) for v in loc.box)
            cv2.rectangle(canvas, (x0, y0), (x1, y1), (40, 220, 40), 2)
    return canvas


def write_overlay(path, image: np.ndarray, detections, model=None, parts=()) -> Path:
    path = Path(path)
    rgb = overlay(image, detections, model, parts)
    cv2.imwrite(str(path), cv2.cvtColor(rgb, cv2.COLOR_RGB2BGR))
    return path


def word_montage(patches: np.ndarray, cols: int = 16, pad: int = 2) -> np.ndarray:
    """Grid of mean word patches (gray, 0-255)."""
    k, h, w = patches.shape
    rows = -(-k // cols)
    out = np.full((rows * (h + pad) + pad, cols * (w + pad) + pad), 255.0)
    for n in range(k):
        r, c = divmod(n, cols)
        out[pad + r * (h + pad):pad + r * (h + pad) + h, pad + c * (w + pad):pad + c * (w + pad) + w] = patches[n]
    return out
