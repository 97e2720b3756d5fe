"""Illusion generation by reversible latent-space likelihood manipulation.

Every overlapping patch outside a protected target mask is encoded to its
latent code, nudged along the latent Gaussian density gradient
(z' = z + eta * (-z * exp(-z^2 / 2))), decoded back, and the manipulated
patches are recomposed by per-pixel averaging.  Positive eta raises patch
likelihood (latents shrink toward the origin), negative eta lowers it.
Target pixels are never touched: any patch overlapping the mask is excluded
whole, so the target survives bit-exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import data_io
from .errors import ConfigError, ShapeError
from .flow import FlowParams, flow_forward, flow_inverse
from .training import dequantize_deterministic, quantize

# upper clamp is the center of level 255, so quantization stays in range
_CLAMP_LO = np.float32(-0.5)
_CLAMP_HI = np.float32(127.5 / 256.0)


@dataclass
class ManipulationConfig:
    eta: float
    stride: int = 8
    patch_size: int = 16

    def __post_init__(self) -> None:
        if self.stride < 1:
            raise ConfigError(f"stride must be >= 1, got {self.stride}")
        if self.patch_size < 2:
            raise ConfigError(f"patch_size must be >= 2, got {self.patch_size}")


@dataclass
class GridPatch:
    row: int
    col: int
    values: np.ndarray   # normalized float32 (ps, ps, 3)
    excluded: bool


@dataclass
class PatchGrid:
    image_shape: tuple[int, int]
    patch_size: int
    stride: int
    patches: list[GridPatch]

    def kept(self) -> list[GridPatch]:
        return [p for p in self.patches if not p.excluded]

    def coverage(self) -> np.ndarray:
        """Per-pixel count of covering kept patches."""
        count = np.zeros(self.image_shape, dtype=np.int64)
        ps = self.patch_size
        for p in self.kept():
            count[p.row:p.row + ps, p.col:p.col + ps] += 1
        return count


def load_mask(path, image_shape=None) -> np.ndarray:
    """Mask PNG/PPM -> bool (H, W); any nonzero channel marks a target
    (protected) pixel."""
    mask = data_io.load_image(path).any(axis=2)
    if image_shape is not None and mask.shape != tuple(image_shape[:2]):
        raise ShapeError(f"mask shape {mask.shape} does not match image "
                         f"shape {tuple(image_shape[:2])}")
    return mask


def _axis_positions(extent: int, patch_size: int, stride: int) -> list[int]:
    positions = list(range(0, extent - patch_size + 1, stride))
    last = extent - patch_size
    if positions[-1] != last:
        positions.append(last)  # flush with the image edge
    return positions


def extract_patches(image8: np.ndarray, mask: np.ndarray | None,
                    cfg: ManipulationConfig) -> PatchGrid:
    """Stride-spaced overlapping patches; a patch whose footprint touches any
    masked pixel is marked excluded and will pass through unmodified."""
    image8 = data_io.as_image8(image8)
    h, w = image8.shape[:2]
    ps = cfg.patch_size
    if h < ps or w < ps:
        raise ShapeError(f"image {image8.shape} smaller than patch size {ps}")
    if mask is None:
        mask = np.zeros((h, w), dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (h, w):
        raise ShapeError(f"mask shape {mask.shape} does not match image "
                         f"shape {(h, w)}")
    patches = []
    for r in _axis_positions(h, ps, cfg.stride):
        for c in _axis_positions(w, ps, cfg.stride):
            excluded = bool(mask[r:r + ps, c:c + ps].any())
            values = dequantize_deterministic(image8[r:r + ps, c:c + ps])
            patches.append(GridPatch(row=r, col=c, values=values,
                                     excluded=excluded))
    return PatchGrid(image_shape=(h, w), patch_size=ps, stride=cfg.stride,
                     patches=patches)


def latent_step(z: np.ndarray, eta: float) -> np.ndarray:
    """Elementwise gradient step on the latent Gaussian density:
    z' = z + eta * (-z * exp(-z^2 / 2)).

    For 0 < eta <= 1 every coordinate shrinks toward 0 (equality only at 0);
    for eta < 0 every coordinate grows.
    """
    z = np.asarray(z)
    return z + eta * (-z * np.exp(-(z * z) / 2.0))


def _manipulate_batch(x: np.ndarray, eta: float,
                      params: FlowParams) -> np.ndarray:
    z, _ = flow_forward(x, params)
    x_new = flow_inverse(latent_step(z, eta), params)
    return np.clip(x_new, _CLAMP_LO, _CLAMP_HI)


def manipulate_patch(x: np.ndarray, eta: float,
                     params: FlowParams) -> np.ndarray:
    """Encode, step the latent, decode, and clamp to the valid input range."""
    x = np.asarray(x, dtype=np.float32)
    if x.ndim == 3:
        return _manipulate_batch(x[None], eta, params)[0]
    return _manipulate_batch(x, eta, params)


def recompose(grid: PatchGrid, manipulated, original8: np.ndarray) -> np.ndarray:
    """Average the manipulated kept patches per pixel; pixels covered only by
    excluded patches keep their original values.  Quantization rounds half
    up."""
    original8 = data_io.as_image8(original8)
    if original8.shape[:2] != grid.image_shape:
        raise ShapeError(f"image shape {original8.shape[:2]} does not match "
                         f"grid shape {grid.image_shape}")
    kept = grid.kept()
    manipulated = list(manipulated)
    if len(manipulated) != len(kept):
        raise ShapeError(f"{len(manipulated)} manipulated patches for "
                         f"{len(kept)} kept grid entries")
    h, w = grid.image_shape
    ps = grid.patch_size
    acc = np.zeros((h, w, 3), dtype=np.float64)
    count = np.zeros((h, w, 1), dtype=np.int64)
    for entry, values in zip(kept, manipulated):
        values = np.asarray(values)
        if values.shape != (ps, ps, 3):
            raise ShapeError(f"manipulated patch shape {values.shape} does "
                             f"not match patch size {ps}")
        acc[entry.row:entry.row + ps, entry.col:entry.col + ps] += values
        count[entry.row:entry.row + ps, entry.col:entry.col + ps] += 1
    covered = count[:, :, 0] > 0
    mean = acc / np.maximum(count, 1)
    out = np.where(covered[:, :, None], quantize(mean), original8)
    return out.astype(np.uint8)


def generate_illusion(image8: np.ndarray, mask: np.ndarray | None, eta: float,
                      params: FlowParams,
                      cfg: ManipulationConfig | None = None,
                      chunk: int = 512) -> np.ndarray:
    """Full pipeline: extract, manipulate every kept patch, recompose.

    Masked pixels come back bit-identical to the input, so running the same
    image and mask with opposite-signed eta yields a context pair around an
    unchanged target.
    """
    if cfg is None:
        cfg = ManipulationConfig(eta=eta)
    if cfg.patch_size != params.patch_size:
        raise ConfigError(f"config patch size {cfg.patch_size} differs from "
                          f"model patch size {params.patch_size}")
    grid = extract_patches(image8, mask, cfg)
    kept = grid.kept()
    manipulated = []
    for start in range(0, len(kept), chunk):
        part = kept[start:start + chunk]
        batch = np.stack([p.values for p in part])
        out = _manipulate_batch(batch, eta, params)
        manipulated.extend(out)
    return recompose(grid, manipulated, image8)
