"""Display-only spoof heatmaps: bilinear-upscaled score maps blended over the face."""

from __future__ import annotations

import io

import numpy as np
from PIL import Image
from PIL.PngImagePlugin import PngInfo

from .model import atomic_write_bytes
from .regions import normalize_score_map


def upscale_bilinear(values: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize with half-pixel centres and edge clamping.

    Display only; the training path uses nearest-neighbour blocks
    (:func:`ssrfcn.regions.upscale_mask`).
    """
    img = Image.fromarray(np.asarray(values, dtype=np.float32), mode="F")
    return np.asarray(img.resize((width, height), Image.Resampling.BILINEAR), dtype=np.float32)


def overlay(pixels: np.ndarray, scores: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """Blend a red-intensity map of the normalized ``scores`` over ``pixels`` (uint8 RGB)."""
    h, w = pixels.shape[:2]
    heat = np.clip(upscale_bilinear(normalize_score_map(scores), h, w), 0.0, 1.0)
    red = np.zeros((h, w, 3), np.float32)
    red[..., 0] = 255.0 * heat
    out = (1.0 - alpha) * pixels.astype(np.float32) + alpha * red
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def save_overlay(pixels: np.ndarray, path, spoofness: float) -> None:
    meta = PngInfo()
    meta.add_text("spoofness", f"{spoofness:.6f}")
    buf = io.BytesIO()
    Image.fromarray(pixels, "RGB").save(buf, format="PNG", pnginfo=meta)
    atomic_write_bytes(path, buf.getvalue())
