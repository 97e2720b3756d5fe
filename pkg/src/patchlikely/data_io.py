"""Image decoding/encoding, corpus discovery, and color-space conversion.

Images are plain numpy arrays: uint8, shape (H, W, 3), row-major.  Supported
on disk: 8-bit PNG (RGB / RGBA / grayscale; alpha is dropped with a warning)
and binary PPM (P6, maxval 255).
"""

from __future__ import annotations

import warnings
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ImageFormatError

IMAGE_EXTENSIONS = {".png", ".ppm", ".pnm"}

_PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"


def as_image8(arr) -> np.ndarray:
    """Validate and return an (H, W, 3) uint8 image array."""
    arr = np.asarray(arr)
    if arr.dtype != np.uint8:
        raise ImageFormatError(f"image must be uint8, got dtype {arr.dtype}")
    if arr.ndim != 3 or arr.shape[2] != 3 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ImageFormatError(f"image must have shape (H, W, 3), got {arr.shape}")
    return arr


def _png_bit_depth(data: bytes) -> int:
    # IHDR is always first: signature(8) + length(4) + type(4) + w(4) + h(4) + depth(1)
    if len(data) < 25:
        raise ImageFormatError("truncated PNG header")
    return data[24]


def _load_png(path: Path) -> np.ndarray:
    data = path.read_bytes()
    depth = _png_bit_depth(data)
    if depth != 8:
        raise ImageFormatError(f"{path}: unsupported bit depth {depth} (only 8-bit PNG)")
    try:
        with Image.open(path) as img:
            mode = img.mode
            if mode in ("RGBA", "LA"):
                warnings.warn(f"{path}: alpha channel dropped")
            if mode in ("RGB", "RGBA"):
                arr = np.asarray(img.convert("RGB"))
            elif mode in ("L", "LA"):
                gray = np.asarray(img.convert("L"))
                arr = np.repeat(gray[:, :, None], 3, axis=2)
            else:
                raise ImageFormatError(f"{path}: unsupported PNG mode {mode!r}")
    except ImageFormatError:
        raise
    except Exception as exc:
        raise ImageFormatError(f"{path}: cannot decode PNG ({exc})") from exc
    return np.ascontiguousarray(arr, dtype=np.uint8)


def _load_ppm(path: Path) -> np.ndarray:
    data = path.read_bytes()
    if not data.startswith(b"P6"):
        raise ImageFormatError(f"{path}: not a binary PPM (P6) file")

    # header tokens may be separated by whitespace and '#' comments
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ImageFormatError(f"{path}: truncated PPM header")
        fields.append(data[start:pos])
    pos += 1  # single whitespace byte after maxval

    try:
        width, height, maxval = (int(f) for f in fields)
    except ValueError as exc:
        raise ImageFormatError(f"{path}: malformed PPM header") from exc
    if maxval != 255:
        raise ImageFormatError(f"{path}: unsupported PPM maxval {maxval}")
    need = width * height * 3
    payload = data[pos:pos + need]
    if len(payload) != need:
        raise ImageFormatError(f"{path}: PPM payload truncated "
                               f"({len(payload)} of {need} bytes)")
    return np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3).copy()


def load_image(path) -> np.ndarray:
    """Decode a PNG or binary PPM file to an (H, W, 3) uint8 array."""
    path = Path(path)
    if not path.is_file():
        raise ImageFormatError(f"{path}: no such image file")
    head = path.open("rb").read(8)
    if head.startswith(_PNG_SIGNATURE):
        return _load_png(path)
    if head.startswith(b"P6"):
        return _load_ppm(path)
    raise ImageFormatError(f"{path}: unsupported image format (PNG or P6 PPM only)")


def save_image(image, path) -> None:
    """Encode an (H, W, 3) uint8 array as PNG or binary PPM by extension."""
    image = as_image8(image)
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".png":
        Image.fromarray(image, mode="RGB").save(path, format="PNG")
    elif suffix in (".ppm", ".pnm"):
        h, w, _ = image.shape
        with path.open("wb") as fh:
            fh.write(b"P6\n%d %d\n255\n" % (w, h))
            fh.write(image.tobytes())
    else:
        raise ImageFormatError(f"{path}: unsupported output extension {suffix!r}")


def scan_corpus(directory) -> list[Path]:
    """Recursively list image files under ``directory`` in lexicographic
    order, independent of filesystem enumeration order."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"corpus directory not found: {directory}")
    paths = [p for p in directory.rglob("*")
             if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS]
    return sorted(paths, key=lambda p: p.as_posix())


# ---------------------------------------------------------------------------
# HSV conversion (hexcone model)
# ---------------------------------------------------------------------------

def rgb_to_hsv(rgb) -> np.ndarray:
    """8-bit RGB -> (h degrees in [0, 360), s in [0, 1], v in [0, 1]).

    Vectorized over any leading shape; the last axis must be the 3 channels.
    """
    rgb = np.asarray(rgb)
    if rgb.shape[-1] != 3:
        raise ImageFormatError(f"expected trailing channel axis of 3, got {rgb.shape}")
    x = rgb.astype(np.float64) / 255.0
    r, g, b = x[..., 0], x[..., 1], x[..., 2]
    maxc = np.max(x, axis=-1)
    minc = np.min(x, axis=-1)
    delta = maxc - minc
    v = maxc
    s = np.where(maxc > 0, delta / np.where(maxc > 0, maxc, 1.0), 0.0)
    safe = np.where(delta > 0, delta, 1.0)
    h = np.select(
        [delta == 0, maxc == r, maxc == g],
        [0.0,
         np.mod((g - b) / safe, 6.0),
         (b - r) / safe + 2.0],
        default=(r - g) / safe + 4.0,
    ) * 60.0
    h = np.where(h >= 360.0, h - 360.0, h)
    return np.stack([h, s, v], axis=-1)


def hsv_to_rgb(hsv) -> np.ndarray:
    """Inverse of :func:`rgb_to_hsv`; returns uint8 RGB.

    Round-trips 8-bit RGB exactly: hsv_to_rgb(rgb_to_hsv(p)) == p.
    """
    hsv = np.asarray(hsv, dtype=np.float64)
    if hsv.shape[-1] != 3:
        raise ImageFormatError(f"expected trailing channel axis of 3, got {hsv.shape}")
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    h6 = np.mod(h, 360.0) / 60.0
    i = np.floor(h6).astype(np.int64) % 6
    f = h6 - np.floor(h6)
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    rgb = np.stack([r, g, b], axis=-1)
    return np.clip(np.rint(rgb * 255.0), 0, 255).astype(np.uint8)
