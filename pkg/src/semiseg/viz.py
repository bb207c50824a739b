"""PNG input/output: grayscale images, cohort previews, histogram-matching triptychs."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

# overlay colours for LV, MYO, RV
_CLASS_RGB = np.array([[0, 0, 0], [230, 60, 60], [60, 200, 90], [70, 110, 240]], dtype=np.float64)


def load_gray_png(path: str | Path) -> np.ndarray:
    """8-bit grayscale image as floats in [0, 1]."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"image not found: {path}")
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.float64) / 255.0


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def save_gray_png(image: np.ndarray, path: str | Path) -> None:
    Image.fromarray(to_uint8(image), mode="L").save(path)


def triptych(panels: Sequence[np.ndarray], gap: int = 4) -> np.ndarray:
    """Panels side by side on a white background, each top-aligned."""
    h = max(p.shape[0] for p in panels)
    w = sum(p.shape[1] for p in panels) + gap * (len(panels) - 1)
    out = np.ones((h, w))
    x = 0
    for p in panels:
        out[:p.shape[0], x:x + p.shape[1]] = p
        x += p.shape[1] + gap
    return out


def overlay(image: np.ndarray, mask: np.ndarray | None, alpha: float = 0.4) -> np.ndarray:
    rgb = np.repeat(np.asarray(image, dtype=np.float64)[..., None] * 255.0, 3, axis=2)
    if mask is not None:
        fg = mask > 0
        rgb[fg] = (1 - alpha) * rgb[fg] + alpha * _CLASS_RGB[mask[fg]]
    return np.clip(np.rint(rgb), 0, 255).astype(np.uint8)


def save_preview_grid(images: Sequence[np.ndarray], masks: Sequence[np.ndarray | None],
                      path: str | Path, columns: int = 5) -> None:
    """Tile image/mask overlays into one RGB PNG."""
    if not images:
        raise ValueError("no images to preview")
    h, w = images[0].shape
    rows = -(-len(images) // columns)
    canvas = np.full((rows * (h + 2), columns * (w + 2), 3), 255, dtype=np.uint8)
    for i, (im, m) in enumerate(zip(images, masks)):
        r, c = divmod(i, columns)
        canvas[r * (h + 2):r * (h + 2) + h, c * (w + 2):c * (w + 2) + w] = overlay(im, m)
    Image.fromarray(canvas, mode="RGB").save(path)
