"""Template construction, sweep normalization, heatmaps, and grid rendering.

Model-dependent behavior (illusion directions on a trained model) lives in
the acceptance suite; everything here is exact or uses small random models.
"""

import json

import numpy as np
import pytest

from patchlikely import data_io
from patchlikely.analysis import (compare_contexts, contrast_template,
                                  heatmap_to_csv, heatmap_to_png,
                                  hermann_cross_template,
                                  hermann_intersection_positions,
                                  likelihood_rank, make_contrast_template,
                                  make_hermann_cross_template,
                                  make_whites_template, minmax_patches,
                                  nll_heatmap, percentile_rank,
                                  render_hermann_grid, sweep_target,
                                  sweep_to_csv)
from patchlikely.errors import ConfigError, ShapeError
from patchlikely.flow import init_flow_params
from patchlikely.numerics import Rng
from patchlikely.training import quantize


@pytest.fixture(scope="module")
def small_model():
    return init_flow_params(16, 2, 8, Rng(5))


class TestContrastTemplate:
    def test_degenerate_uniform(self):
        patch = make_contrast_template(90, 90, "gray")
        assert np.unique(quantize(patch)).tolist() == [90]

    def test_white_square_on_black(self):
        levels = quantize(make_contrast_template(0, 255, "gray"))
        assert np.all(levels[4:12, 4:12] == 255)
        levels[4:12, 4:12] = 0
        assert np.all(levels == 0)

    def test_center_is_64_pixels(self):
        a = contrast_template(10).render8(200)
        assert int((a[:, :, 0] == 200).sum()) == 64

    def test_hsv_modes_render(self):
        for mode in ("hsv_hue", "hsv_saturation", "hsv_value"):
            patch = make_contrast_template(64, 192, mode)
            assert patch.shape == (16, 16, 3)
            # varied channel differs between center and surround
            assert not np.array_equal(patch[0, 0], patch[8, 8])

    def test_saturation_sweep_uses_fixed_hue_and_value(self):
        tpl = contrast_template(0, "hsv_saturation")
        p8 = tpl.render8(255)
        h, s, v = data_io.rgb_to_hsv(p8[8, 8])
        assert h == pytest.approx(30 / 256 * 360, abs=1.0)
        assert v == pytest.approx(200 / 255, abs=0.01)
        assert s == pytest.approx(1.0, abs=0.01)

    def test_level_out_of_range_rejected(self):
        with pytest.raises(ConfigError):
            make_contrast_template(300, 0)


class TestWhitesTemplate:
    def test_degenerate_target_equals_flanks(self):
        levels = quantize(make_whites_template("white_bar", 255))
        middle = levels[5:11]
        assert np.all(middle == 255)

    def test_polarity_swap_is_negation(self):
        for t in (0, 80, 255):
            a = quantize(make_whites_template("white_bar", 255 - t))
            b = quantize(make_whites_template("black_bar", t))
            assert np.array_equal(a, 255 - b)

    def test_top_third_black_for_white_bar(self):
        levels = quantize(make_whites_template("white_bar", 128))
        assert np.all(levels[:5] == 0)
        assert np.all(levels[11:] == 0)
        assert np.all(levels[5:11, :4] == 255)
        assert np.all(levels[5:11, 12:] == 255)
        assert np.all(levels[5:11, 4:12] == 128)

    def test_bad_polarity_rejected(self):
        with pytest.raises(ConfigError):
            make_whites_template("sideways", 1)


class TestHermannTemplate:
    def test_target_255_is_pure_cross(self):
        levels = quantize(make_hermann_cross_template(255))
        assert set(np.unique(levels)) == {0, 255}
        assert np.all(levels[5:11, :] == 255)
        assert np.all(levels[:, 5:11] == 255)

    def test_black_center_hole(self):
        levels = quantize(make_hermann_cross_template(0))
        assert np.all(levels[5:11, 5:11] == 0)
        assert np.all(levels[5:11, :5] == 255)

    @pytest.mark.parametrize("target", [0, 100, 255])
    def test_corners_black(self, target):
        levels = quantize(make_hermann_cross_template(target))
        for rs, cs in [(slice(0, 5), slice(0, 5)), (slice(0, 5), slice(11, None)),
                       (slice(11, None), slice(0, 5)),
                       (slice(11, None), slice(11, None))]:
            assert np.all(levels[rs, cs] == 0)

    def test_renderers_deterministic(self):
        tpl = hermann_cross_template()
        assert np.array_equal(tpl.render8(77), tpl.render8(77))


class TestSweepMath:
    def test_uniform_scores(self):
        norm, rank = likelihood_rank(np.full(256, -3.25))
        assert np.allclose(norm, 1 / 256)
        want = 100.0 * (np.arange(256) + 1) / 256.0
        assert np.allclose(rank, want, atol=1e-9)
        assert rank[127] == pytest.approx(50.0)

    def test_rank_is_cumulative_sum(self):
        logp = -np.abs(np.linspace(-4, 3, 256)) * 7
        norm, rank = likelihood_rank(logp)
        assert np.allclose(rank, 100 * np.cumsum(norm), atol=1e-9)
        assert rank[-1] == 100.0
        assert np.all(np.diff(rank) >= 0)
        assert abs(norm.sum() - 1.0) < 1e-9

    def test_rank_invariant_under_offset(self):
        logp = np.sin(np.linspace(0, 6, 256)) * 40
        _, rank = likelihood_rank(logp)
        _, shifted = likelihood_rank(logp + 1234.5)
        assert np.allclose(rank, shifted, atol=1e-8)

    def test_sweep_on_model(self, small_model):
        sweep = sweep_target(contrast_template(128, "gray"), small_model)
        assert sweep.nll.shape == (256,)
        assert abs(sweep.normalized_likelihood.sum() - 1.0) < 1e-9
        assert sweep.rank[-1] == 100.0
        assert np.all(np.diff(sweep.rank) >= -1e-12)
        assert percentile_rank(sweep, 255) == 100.0

    def test_percentile_rank_validates_level(self, small_model):
        sweep = sweep_target(contrast_template(128, "gray"), small_model)
        with pytest.raises(ConfigError):
            percentile_rank(sweep, 256)


class TestCompareContexts:
    def test_identical_contexts_tie(self, small_model):
        s = sweep_target(contrast_template(100, "gray"), small_model)
        report = compare_contexts(s, s, 128)
        assert report.perceived_higher == "tie"
        assert report.rank_a == report.rank_b

    def test_antisymmetric(self, small_model):
        a = sweep_target(contrast_template(30, "gray"), small_model)
        b = sweep_target(contrast_template(220, "gray"), small_model)
        fwd = compare_contexts(a, b, 128)
        rev = compare_contexts(b, a, 128)
        assert fwd.rank_a == rev.rank_b and fwd.rank_b == rev.rank_a
        if fwd.perceived_higher == "A":
            assert rev.perceived_higher == "B"

    def test_mixed_channel_modes_rejected(self, small_model):
        a = sweep_target(contrast_template(30, "gray"), small_model)
        b = sweep_target(contrast_template(30, "hsv_value"), small_model)
        with pytest.raises(ConfigError):
            compare_contexts(a, b, 10)


class TestSweepCsv:
    def test_format(self, small_model, tmp_path):
        sweep = sweep_target(contrast_template(50, "gray"), small_model)
        path = tmp_path / "sweep.csv"
        sweep_to_csv(sweep, path)
        lines = path.read_text().splitlines()
        assert len(lines) == 257
        assert lines[0] == "target_value,nll_nats,normalized_likelihood,percentile_rank"
        assert lines[1].startswith("0,")
        assert lines[-1].startswith("255,")


class TestHeatmap:
    def test_uniform_image_constant(self, small_model):
        img = np.full((32, 48, 3), 120, np.uint8)
        hm = nll_heatmap(img, small_model, stride=8)
        assert np.allclose(hm.values, hm.values[0, 0])

    def test_forced_grid_extents(self, small_model):
        img = np.zeros((48, 48, 3), np.uint8)
        hm = nll_heatmap(img, small_model, stride=48 - 16)
        assert hm.values.shape == (2, 2)

    def test_exports(self, small_model, tmp_path):
        rng = Rng(9)
        img = (rng.integers(0, 256, size=(32, 32, 3))).astype(np.uint8)
        hm = nll_heatmap(img, small_model, stride=8)
        png = tmp_path / "hm.png"
        heatmap_to_png(hm, png)
        heatmap_to_csv(hm, tmp_path / "hm.csv")
        rendered = data_io.load_image(png)
        assert rendered.shape == (hm.values.shape[0], hm.values.shape[1], 3)
        meta = json.loads((tmp_path / "hm.png.json").read_text())
        assert meta["normalization"] == "linear min-max"
        assert meta["nll_min"] <= meta["nll_max"]
        rows = (tmp_path / "hm.csv").read_text().splitlines()
        assert len(rows) == hm.values.shape[0]

    def test_undersized_image_rejected(self, small_model):
        with pytest.raises(ShapeError):
            nll_heatmap(np.zeros((8, 8, 3), np.uint8), small_model, stride=1)


class TestMinMax:
    def test_single_patch_is_both_extremes(self, small_model):
        img = np.full((16, 16, 3), 77, np.uint8)
        top, bottom = minmax_patches(img, small_model, k=1, stride=1)
        assert len(top) == len(bottom) == 1
        assert top[0].row == bottom[0].row == 0
        assert top[0].nll == bottom[0].nll

    def test_fewer_than_k_warns_and_returns_all(self, small_model):
        img = np.full((16, 16, 3), 77, np.uint8)
        with pytest.warns(UserWarning, match="only 1 patches"):
            top, bottom = minmax_patches(img, small_model, k=5, stride=1)
        assert len(top) == len(bottom) == 1

    def test_ties_broken_by_position(self, small_model):
        img = np.full((20, 20, 3), 50, np.uint8)  # all patches identical
        top, _ = minmax_patches(img, small_model, k=3, stride=2)
        assert [(p.row, p.col) for p in top] == [(0, 0), (0, 2), (0, 4)]

    def test_top_likely_smoother_than_bottom(self, small_model):
        rng = Rng(10)
        img = np.full((48, 48, 3), 128, np.uint8)
        noise = (rng.integers(0, 256, size=(24, 24, 3))).astype(np.uint8)
        img[24:, 24:] = noise  # one noisy quadrant
        top, bottom = minmax_patches(img, small_model, k=20, stride=4)
        smooth = lambda ps: np.mean([p.patch8.astype(float).std() for p in ps])
        assert smooth(top) < smooth(bottom)


class TestHermannGrid:
    def test_block_count_512(self):
        img = render_hermann_grid(512, 112, 16)
        dark = img[:, :, 0] == 0
        assert dark.sum() == (112 * 4) ** 2  # 4x4 blocks of 112^2... per axis
        assert img.shape == (512, 512, 3)

    def test_half_scale_layout_matches(self):
        hi = render_hermann_grid(512, 112, 16)
        lo = render_hermann_grid(256, 56, 8)
        assert np.array_equal(hi[::2, ::2], lo)

    def test_intersection_center_white(self):
        img = render_hermann_grid(512, 112, 16)
        for r, c in hermann_intersection_positions(512, 112, 16, 16):
            assert img[r + 8, c + 8, 0] == 255

    def test_divisibility_enforced(self):
        with pytest.raises(ConfigError):
            render_hermann_grid(500, 112, 16)

    def test_intersection_positions_inside(self):
        pos = hermann_intersection_positions(256, 56, 8, 16)
        assert len(pos) == 9
        for r, c in pos:
            assert 0 <= r and r + 16 <= 256 and 0 <= c and c + 16 <= 256
