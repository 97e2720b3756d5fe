"""Image codecs, HSV conversion, and corpus discovery."""

import struct
import zlib

import numpy as np
import pytest

from patchlikely import data_io
from patchlikely.errors import ImageFormatError
from patchlikely.numerics import Rng


def random_image(seed, h=23, w=31):
    return (Rng(seed).integers(0, 256, size=(h, w, 3))).astype(np.uint8)


def write_png_gray16(path, w=4, h=4):
    """Minimal valid 16-bit grayscale PNG."""
    def chunk(tag, payload):
        data = tag + payload
        return struct.pack(">I", len(payload)) + data + struct.pack(
            ">I", zlib.crc32(data) & 0xFFFFFFFF)

    ihdr = struct.pack(">IIBBBBB", w, h, 16, 0, 0, 0, 0)
    raw = b"".join(b"\x00" + b"\x00\x01" * w for _ in range(h))
    png = (b"\x89PNG\r\n\x1a\n" + chunk(b"IHDR", ihdr)
           + chunk(b"IDAT", zlib.compress(raw)) + chunk(b"IEND", b""))
    path.write_bytes(png)


class TestPpm:
    def test_bitwise_roundtrip(self, tmp_path):
        img = random_image(1)
        path = tmp_path / "img.ppm"
        data_io.save_image(img, path)
        assert np.array_equal(data_io.load_image(path), img)
        second = tmp_path / "img2.ppm"
        data_io.save_image(data_io.load_image(path), second)
        assert path.read_bytes() == second.read_bytes()

    def test_one_pixel(self, tmp_path):
        img = np.array([[[3, 200, 31]]], np.uint8)
        path = tmp_path / "one.ppm"
        data_io.save_image(img, path)
        assert np.array_equal(data_io.load_image(path), img)

    def test_comment_in_header(self, tmp_path):
        path = tmp_path / "c.ppm"
        path.write_bytes(b"P6\n# a comment\n2 1\n255\n" + bytes(6))
        assert data_io.load_image(path).shape == (1, 2, 3)

    def test_truncated_payload_rejected(self, tmp_path):
        path = tmp_path / "t.ppm"
        path.write_bytes(b"P6\n4 4\n255\n" + bytes(10))
        with pytest.raises(ImageFormatError, match="truncated"):
            data_io.load_image(path)

    def test_wrong_maxval_rejected(self, tmp_path):
        path = tmp_path / "m.ppm"
        path.write_bytes(b"P6\n1 1\n65535\n" + bytes(6))
        with pytest.raises(ImageFormatError, match="maxval"):
            data_io.load_image(path)


class TestPng:
    def test_roundtrip(self, tmp_path):
        img = random_image(2)
        path = tmp_path / "img.png"
        data_io.save_image(img, path)
        assert np.array_equal(data_io.load_image(path), img)

    def test_16bit_rejected(self, tmp_path):
        path = tmp_path / "deep.png"
        write_png_gray16(path)
        with pytest.raises(ImageFormatError, match="bit depth"):
            data_io.load_image(path)

    def test_grayscale_expanded(self, tmp_path):
        from PIL import Image
        gray = (Rng(3).integers(0, 256, size=(5, 7))).astype(np.uint8)
        path = tmp_path / "gray.png"
        Image.fromarray(gray, mode="L").save(path)
        img = data_io.load_image(path)
        assert img.shape == (5, 7, 3)
        assert np.array_equal(img[:, :, 0], gray)
        assert np.array_equal(img[:, :, 1], img[:, :, 2])

    def test_alpha_dropped_with_warning(self, tmp_path):
        from PIL import Image
        rgba = (Rng(4).integers(0, 256, size=(4, 4, 4))).astype(np.uint8)
        path = tmp_path / "rgba.png"
        Image.fromarray(rgba, mode="RGBA").save(path)
        with pytest.warns(UserWarning, match="alpha"):
            img = data_io.load_image(path)
        assert np.array_equal(img, rgba[:, :, :3])

    def test_unknown_format_rejected(self, tmp_path):
        path = tmp_path / "junk.png"
        path.write_bytes(b"this is not an image")
        with pytest.raises(ImageFormatError, match="format"):
            data_io.load_image(path)

    def test_missing_file_names_path(self, tmp_path):
        with pytest.raises(ImageFormatError, match="nope.png"):
            data_io.load_image(tmp_path / "nope.png")


class TestScanCorpus:
    def test_empty_dir(self, tmp_path):
        assert data_io.scan_corpus(tmp_path) == []

    def test_recursive_and_sorted(self, tmp_path):
        img = random_image(5, 4, 4)
        (tmp_path / "b").mkdir()
        (tmp_path / "a").mkdir()
        data_io.save_image(img, tmp_path / "b" / "z.png")
        data_io.save_image(img, tmp_path / "a" / "y.ppm")
        data_io.save_image(img, tmp_path / "x.png")
        (tmp_path / "notes.txt").write_text("ignored")
        paths = data_io.scan_corpus(tmp_path)
        rel = [p.relative_to(tmp_path).as_posix() for p in paths]
        assert rel == ["a/y.ppm", "b/z.png", "x.png"]

    def test_missing_dir_rejected(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            data_io.scan_corpus(tmp_path / "absent")


class TestHsv:
    @pytest.mark.parametrize("rgb,want", [
        ((255, 0, 0), (0.0, 1.0, 1.0)),
        ((0, 255, 255), (180.0, 1.0, 1.0)),
        ((0, 255, 0), (120.0, 1.0, 1.0)),
        ((0, 0, 255), (240.0, 1.0, 1.0)),
        ((0, 0, 0), (0.0, 0.0, 0.0)),
        ((255, 255, 255), (0.0, 0.0, 1.0)),
    ])
    def test_reference_colors(self, rgb, want):
        h, s, v = data_io.rgb_to_hsv(np.array(rgb, np.uint8))
        assert (h, s, v) == pytest.approx(want)

    def test_gray_is_unsaturated(self):
        for g in (1, 77, 254):
            h, s, v = data_io.rgb_to_hsv(np.array([g, g, g], np.uint8))
            assert s == 0.0
            assert v == pytest.approx(g / 255.0)

    def test_million_sample_roundtrip_exact(self):
        rng = Rng(6)
        rgb = (rng.integers(0, 256, size=(1_000_000, 3))).astype(np.uint8)
        back = data_io.hsv_to_rgb(data_io.rgb_to_hsv(rgb))
        assert np.array_equal(back, rgb)

    def test_hue_range(self):
        rng = Rng(7)
        rgb = (rng.integers(0, 256, size=(100_000, 3))).astype(np.uint8)
        hsv = data_io.rgb_to_hsv(rgb)
        assert hsv[:, 0].min() >= 0.0 and hsv[:, 0].max() < 360.0
        assert hsv[:, 1].min() >= 0.0 and hsv[:, 1].max() <= 1.0
