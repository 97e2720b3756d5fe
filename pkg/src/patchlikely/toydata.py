"""Desk-scale stand-in corpora.

Full-scale scene datasets are out of reach here, so tests and demos train on
crops of the photographs bundled with scikit-image (real camera images:
faces, animals, buildings, textures).  Crops are augmented with horizontal
flips, brightness scaling (intensity coverage), and 2x horizontal stretching
on half the crops: scene photographs are horizontally dominated (horizons,
layered structure) in a way this small photo set is not, and that anisotropy
is what several of the illusion analyses probe.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from . import data_io
from .numerics import Rng

_COLOR_PHOTOS = ("astronaut", "chelsea", "coffee", "rocket", "cat",
                 "immunohistochemistry")
_GRAY_PHOTOS = ("camera", "moon", "brick", "grass", "gravel")


def _skimage_data():
    try:
        import skimage.data as data
    except ImportError as exc:  # pragma: no cover
        raise ImportError(
            "toydata needs scikit-image (install the 'test' extra)") from exc
    return data


def base_photos() -> list[np.ndarray]:
    """The bundled photographs as (H, W, 3) uint8 arrays."""
    data = _skimage_data()
    photos = [np.asarray(getattr(data, name)()) for name in _COLOR_PHOTOS]
    for name in _GRAY_PHOTOS:
        gray = np.asarray(getattr(data, name)())
        photos.append(np.repeat(gray[:, :, None], 3, axis=2))
    return photos


def reference_photo(name: str = "coffee") -> np.ndarray:
    """One bundled photograph by name, expanded to RGB if grayscale."""
    img = np.asarray(getattr(_skimage_data(), name)())
    if img.ndim == 2:
        img = np.repeat(img[:, :, None], 3, axis=2)
    return np.ascontiguousarray(img[:, :, :3])


def save_photo_corpus(out_dir, count: int = 120, size: int = 96,
                      seed: int = 0, stretch_frac: float = 0.5) -> list[Path]:
    """Write ``count`` random photo crops as PNGs and return their paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    photos = base_photos()
    rng = Rng(seed, stream=77)
    paths = []
    for k in range(count):
        img = photos[int(rng.integers(0, len(photos)))]
        stretch = float(rng.random01((), dtype=np.float64)) < stretch_frac
        w_src = size // 2 if stretch else size
        row = int(rng.integers(0, img.shape[0] - size + 1))
        col = int(rng.integers(0, img.shape[1] - w_src + 1))
        crop = img[row:row + size, col:col + w_src]
        if stretch:
            crop = np.asarray(Image.fromarray(crop).resize((size, size),
                                                           Image.BILINEAR))
        crop = crop.astype(np.float64)
        if int(rng.integers(0, 2)):
            crop = crop[:, ::-1]
        gain = 0.85 + 0.5 * float(rng.random01((), dtype=np.float64))
        crop = np.clip(np.rint(crop * gain), 0, 255).astype(np.uint8)
        path = out_dir / f"crop_{k:04d}.png"
        data_io.save_image(np.ascontiguousarray(crop), path)
        paths.append(path)
    return paths
