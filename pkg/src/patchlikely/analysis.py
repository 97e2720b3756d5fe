"""Illusion analysis on top of a trained patch model.

An illusion is posed as a *template* (fixed context) plus a *target* region
whose level is swept over all 256 8-bit values.  Scoring every instance
yields a likelihood curve over target values; normalizing it (log-sum-exp)
and accumulating gives the percentile rank of each value, which is the
quantity compared across contexts.  The module also produces NLL heatmaps of
whole images and min/max patch rankings.

Scoring is always done with deterministic dequantization (u = 0.5) so curves
are exactly reproducible.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data_io
from .errors import ConfigError, NumericsError, ShapeError
from .flow import FlowParams, log_likelihood
from .training import dequantize_deterministic

CHANNEL_MODES = ("gray", "hsv_hue", "hsv_saturation", "hsv_value")
TEMPLATE_KINDS = ("contrast", "whites", "hermann_cross")

# fixed-channel levels used when a HSV template varies one channel only;
# hue is on the 0..255 scale mapped to degrees by level/256*360
HSV_FIXED_LEVELS = {"hue": 30, "saturation": 200, "value": 200}


def _check_level(value: int, name: str = "level") -> int:
    value = int(value)
    if not 0 <= value <= 255:
        raise ConfigError(f"{name} must be in 0..255, got {value}")
    return value


# ---------------------------------------------------------------------------
# templates
# ---------------------------------------------------------------------------

@dataclass
class Template:
    """Renderable illusion stimulus; ``render8(target)`` yields the 8-bit
    patch with the target region set to ``target``."""

    kind: str
    channel_mode: str = "gray"
    surround: int | None = None          # contrast
    polarity: str | None = None          # whites: white_bar | black_bar
    patch_size: int = 16
    bar_width: int = 6                   # hermann cross
    hsv_fixed: dict = field(default_factory=lambda: dict(HSV_FIXED_LEVELS))

    def __post_init__(self) -> None:
        if self.kind not in TEMPLATE_KINDS:
            raise ConfigError(f"unknown template kind {self.kind!r}")
        if self.channel_mode not in CHANNEL_MODES:
            raise ConfigError(f"unknown channel mode {self.channel_mode!r}")
        if self.kind == "contrast":
            if self.surround is None:
                raise ConfigError("contrast template needs a surround level")
            _check_level(self.surround, "surround")
        if self.kind == "whites":
            if self.polarity not in ("white_bar", "black_bar"):
                raise ConfigError(
                    f"whites polarity must be white_bar or black_bar, "
                    f"got {self.polarity!r}")
            if self.channel_mode != "gray":
                raise ConfigError("whites template is grayscale only")
        if self.kind == "hermann_cross" and self.channel_mode != "gray":
            raise ConfigError("hermann_cross template is grayscale only")

    # level maps -------------------------------------------------------

    def _levels(self, target: int) -> np.ndarray:
        ps = self.patch_size
        t = _check_level(target, "target")
        if self.kind == "contrast":
            levels = np.full((ps, ps), self.surround, dtype=np.int64)
            lo, hi = ps // 4, ps - ps // 4
            levels[lo:hi, lo:hi] = t
        elif self.kind == "whites":
            third = ps // 3
            ctx_a, ctx_b = (0, 255) if self.polarity == "white_bar" else (255, 0)
            levels = np.full((ps, ps), ctx_b, dtype=np.int64)
            levels[:third, :] = ctx_a
            levels[ps - third:, :] = ctx_a
            lo, hi = ps // 4, ps - ps // 4
            levels[third:ps - third, lo:hi] = t
        else:  # hermann_cross
            levels = np.zeros((ps, ps), dtype=np.int64)
            lo = (ps - self.bar_width) // 2
            hi = lo + self.bar_width
            levels[lo:hi, :] = 255
            levels[:, lo:hi] = 255
            levels[lo:hi, lo:hi] = t
        return levels

    def render8(self, target: int) -> np.ndarray:
        """8-bit RGB rendering at the given target level."""
        levels = self._levels(target)
        if self.channel_mode == "gray":
            return np.repeat(levels.astype(np.uint8)[:, :, None], 3, axis=2)
        fixed = self.hsv_fixed
        maps = {
            "hue": np.full_like(levels, fixed["hue"]),
            "saturation": np.full_like(levels, fixed["saturation"]),
            "value": np.full_like(levels, fixed["value"]),
        }
        maps[self.channel_mode.removeprefix("hsv_")] = levels
        hsv = np.stack([
            maps["hue"] / 256.0 * 360.0,
            maps["saturation"] / 255.0,
            maps["value"] / 255.0,
        ], axis=-1)
        return data_io.hsv_to_rgb(hsv)

    def render(self, target: int) -> np.ndarray:
        """Normalized float rendering (deterministic dequantization)."""
        return dequantize_deterministic(self.render8(target))


def contrast_template(surround: int, channel_mode: str = "gray",
                      **hsv_fixed) -> Template:
    tpl = Template(kind="contrast", channel_mode=channel_mode,
                   surround=surround)
    tpl.hsv_fixed.update(hsv_fixed)
    return tpl


def whites_template(polarity: str) -> Template:
    return Template(kind="whites", polarity=polarity)


def hermann_cross_template(bar_width: int = 6) -> Template:
    return Template(kind="hermann_cross", bar_width=bar_width)


def make_contrast_template(surround: int, target: int,
                           channel_mode: str = "gray") -> np.ndarray:
    """Normalized patch: center square at ``target`` on a uniform surround."""
    return contrast_template(surround, channel_mode).render(target)


def make_whites_template(polarity: str, target: int) -> np.ndarray:
    """Normalized patch: horizontal thirds with the target block interrupting
    the middle bar, flanked by the opposite polarity."""
    return whites_template(polarity).render(target)


def make_hermann_cross_template(target: int) -> np.ndarray:
    """Normalized patch: white cross on black with the bar intersection set
    to ``target``."""
    return hermann_cross_template().render(target)


# ---------------------------------------------------------------------------
# sweeps and ranks
# ---------------------------------------------------------------------------

@dataclass
class TemplateSweep:
    template: Template
    target_values: np.ndarray        # 0..255
    nll: np.ndarray                  # nats, float64
    normalized_likelihood: np.ndarray
    rank: np.ndarray                 # percentile rank in [0, 100]


def _logsumexp(x: np.ndarray) -> float:
    m = float(np.max(x))
    return m + float(np.log(np.sum(np.exp(x - m))))


def likelihood_rank(logp: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Normalize log-likelihoods over the sweep (log-sum-exp, so any common
    offset cancels) and return (normalized_likelihood, percentile rank).

    rank is 100 * cumsum(normalized_likelihood), rescaled by its final
    element so rank[-1] == 100 exactly despite float rounding.
    """
    logp = np.asarray(logp, dtype=np.float64)
    norm = np.exp(logp - _logsumexp(logp))
    norm = norm / norm.sum()
    cum = np.cumsum(norm)
    rank = 100.0 * cum / cum[-1]
    return norm, rank


def sweep_target(template: Template, params: FlowParams) -> TemplateSweep:
    """Score all 256 target levels and derive the normalized likelihood and
    its cumulative percentile rank."""
    targets = np.arange(256)
    patches8 = np.stack([template.render8(int(t)) for t in targets])
    x = dequantize_deterministic(patches8)
    logp = np.asarray(log_likelihood(x, params), dtype=np.float64)
    norm, rank = likelihood_rank(logp)
    return TemplateSweep(template=template, target_values=targets, nll=-logp,
                         normalized_likelihood=norm, rank=rank)


def percentile_rank(sweep: TemplateSweep, value: int) -> float:
    """Percentage of normalized likelihood at or below ``value``."""
    return float(sweep.rank[_check_level(value)])


@dataclass
class ContextComparison:
    """Rank of the same target under two contexts and the predicted
    perceptual direction (higher rank is perceived as the higher value)."""

    target: int
    rank_a: float
    rank_b: float
    perceived_higher: str  # "A" | "B" | "tie"


def compare_contexts(sweep_a: TemplateSweep, sweep_b: TemplateSweep,
                     target: int) -> ContextComparison:
    if sweep_a.template.channel_mode != sweep_b.template.channel_mode:
        raise ConfigError("cannot compare sweeps with different channel modes")
    ra = percentile_rank(sweep_a, target)
    rb = percentile_rank(sweep_b, target)
    if ra > rb:
        direction = "A"
    elif rb > ra:
        direction = "B"
    else:
        direction = "tie"
    return ContextComparison(target=int(target), rank_a=ra, rank_b=rb,
                             perceived_higher=direction)


def sweep_to_csv(sweep: TemplateSweep, path) -> None:
    """Header plus one row per target value (257 lines)."""
    lines = ["target_value,nll_nats,normalized_likelihood,percentile_rank"]
    for i in range(256):
        lines.append(f"{i},{sweep.nll[i]:.6f},"
                     f"{sweep.normalized_likelihood[i]:.9e},{sweep.rank[i]:.6f}")
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# heatmaps
# ---------------------------------------------------------------------------

@dataclass
class NllHeatmap:
    values: np.ndarray   # (grid_h, grid_w) float64
    stride: int
    patch_size: int


def _score_positions(image8: np.ndarray, params: FlowParams,
                     positions: list[tuple[int, int]],
                     chunk: int = 2048) -> np.ndarray:
    ps = params.patch_size
    nll = np.empty(len(positions), dtype=np.float64)
    for start in range(0, len(positions), chunk):
        part = positions[start:start + chunk]
        batch8 = np.stack([image8[r:r + ps, c:c + ps] for r, c in part])
        logp = log_likelihood(dequantize_deterministic(batch8), params)
        nll[start:start + len(part)] = -np.asarray(logp)
    return nll


def nll_heatmap(image8: np.ndarray, params: FlowParams,
                stride: int = 8) -> NllHeatmap:
    """Per-position NLL over the stride-spaced patch grid of an image."""
    image8 = data_io.as_image8(image8)
    if stride < 1:
        raise ConfigError(f"stride must be >= 1, got {stride}")
    ps = params.patch_size
    h, w = image8.shape[:2]
    if h < ps or w < ps:
        raise ShapeError(f"image {image8.shape} smaller than patch size {ps}")
    rows = range(0, h - ps + 1, stride)
    cols = range(0, w - ps + 1, stride)
    positions = [(r, c) for r in rows for c in cols]
    nll = _score_positions(image8, params, positions)
    values = nll.reshape(len(rows), len(cols))
    return NllHeatmap(values=values, stride=stride, patch_size=ps)


def heatmap_to_csv(hm: NllHeatmap, path) -> None:
    lines = [",".join(f"{v:.6f}" for v in row) for row in hm.values]
    Path(path).write_text("\n".join(lines) + "\n")


def heatmap_to_png(hm: NllHeatmap, path) -> None:
    """Grayscale rendering under linear min-max normalization; the scaling
    constants go to a JSON sidecar next to the image."""
    lo = float(hm.values.min())
    hi = float(hm.values.max())
    span = hi - lo if hi > lo else 1.0
    gray = np.rint((hm.values - lo) / span * 255.0).astype(np.uint8)
    data_io.save_image(np.repeat(gray[:, :, None], 3, axis=2), path)
    meta = {
        "normalization": "linear min-max",
        "nll_min": lo,
        "nll_max": hi,
        "rows": int(hm.values.shape[0]),
        "cols": int(hm.values.shape[1]),
        "stride": hm.stride,
        "patch_size": hm.patch_size,
    }
    Path(str(path) + ".json").write_text(json.dumps(meta, sort_keys=True,
                                                    indent=2) + "\n")


# ---------------------------------------------------------------------------
# min-max patches
# ---------------------------------------------------------------------------

@dataclass
class PatchScore:
    row: int
    col: int
    nll: float
    patch8: np.ndarray


def minmax_patches(image8: np.ndarray, params: FlowParams, k: int = 100,
                   stride: int = 1):
    """Score every stride-spaced patch and return the k most and k least
    likely, ties broken by (row, col)."""
    image8 = data_io.as_image8(image8)
    ps = params.patch_size
    h, w = image8.shape[:2]
    if h < ps or w < ps:
        raise ShapeError(f"image {image8.shape} smaller than patch size {ps}")
    rows = range(0, h - ps + 1, stride)
    cols = range(0, w - ps + 1, stride)
    positions = [(r, c) for r in rows for c in cols]
    if len(positions) < k:
        warnings.warn(f"only {len(positions)} patches available, k={k}")
        k = len(positions)
    nll = _score_positions(image8, params, positions)
    pos = np.asarray(positions)

    def take(order, count):
        out = []
        for i in order[:count]:
            r, c = int(pos[i, 0]), int(pos[i, 1])
            out.append(PatchScore(row=r, col=c, nll=float(nll[i]),
                                  patch8=image8[r:r + ps, c:c + ps].copy()))
        return out

    asc = np.lexsort((pos[:, 1], pos[:, 0], nll))
    desc = np.lexsort((pos[:, 1], pos[:, 0], -nll))
    return take(asc, k), take(desc, k)


# ---------------------------------------------------------------------------
# Hermann grid rendering
# ---------------------------------------------------------------------------

def render_hermann_grid(size: int, block: int, bar: int) -> np.ndarray:
    """Black blocks separated by uniformly spaced white bars; each
    block+bar period starts with the block."""
    if block < 1 or bar < 1:
        raise ConfigError(f"block and bar must be positive, got {block}, {bar}")
    period = block + bar
    if size % period:
        raise ConfigError(f"size {size} not divisible by block+bar {period}")
    axis = np.arange(size) % period >= block
    white = axis[:, None] | axis[None, :]
    img = np.where(white, 255, 0).astype(np.uint8)
    return np.repeat(img[:, :, None], 3, axis=2)


def hermann_intersection_positions(size: int, block: int, bar: int,
                                   patch_size: int) -> list[tuple[int, int]]:
    """Top-left corners of patches centered on bar intersections; positions
    whose patch would cross the image edge are dropped."""
    period = block + bar
    centers = [block + bar // 2 + k * period for k in range(size // period)]
    half = patch_size // 2
    valid = [c for c in centers if 0 <= c - half and c - half + patch_size <= size]
    return [(r - half, c - half) for r in valid for c in valid]


def mean_intersection_nll(image8: np.ndarray, params: FlowParams,
                          block: int, bar: int) -> float:
    """Mean model NLL over all intersection-centered patches of a grid."""
    image8 = data_io.as_image8(image8)
    size = image8.shape[0]
    positions = hermann_intersection_positions(size, block, bar,
                                               params.patch_size)
    if not positions:
        raise NumericsError("no intersection-centered patch fits the image")
    return float(_score_positions(image8, params, positions).mean())
