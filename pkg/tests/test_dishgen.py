"""Generator determinism, labeling guarantees, statistics, and file formats."""

import json
import math

import numpy as np
import pytest

from colonyseg import dishgen, evalkit
from colonyseg.dishgen import DishScene, GeneratorParams, generate_dataset, render_image, render_mask, sample_scene
from colonyseg.labels import BACKGROUND, BORDER, BVG_MINUS, BVG_PLUS
from colonyseg.pnm import read_pgm, read_ppm


class TestParams:
    def test_defaults_carry_dataset_priors(self):
        p = GeneratorParams()
        assert p.lambda_plus == pytest.approx(20.357)
        assert p.lambda_minus == pytest.approx(4.726)

    def test_validation(self):
        with pytest.raises(ValueError):
            GeneratorParams(lambda_plus=0)
        with pytest.raises(ValueError):
            GeneratorParams(radius_range=(5.0, 2.0))
        with pytest.raises(ValueError):
            GeneratorParams(p_touch=1.5)
        with pytest.raises(ValueError):
            GeneratorParams(preset="hard")

    def test_radius_scaling_clips_minimum(self):
        lo, hi = GeneratorParams(canvas_size=128).scaled_radius_range()
        assert lo == pytest.approx(2.0)
        assert hi == pytest.approx(12.0 * 128 / 480)


class TestSampleScene:
    def test_fixed_seed_reproduces_scene(self):
        p = GeneratorParams(canvas_size=128)
        a = sample_scene(p, 11)
        b = sample_scene(p, 11)
        assert a.to_json_dict() == b.to_json_dict()

    def test_colonies_inside_dish(self):
        p = GeneratorParams(canvas_size=160)
        for seed in range(5):
            scene = sample_scene(p, seed)
            for c in scene.colonies:
                reach = c.halo_radius if c.kind == BVG_PLUS else c.radius
                d = math.hypot(c.cx - scene.dish_cx, c.cy - scene.dish_cy)
                assert d + reach <= scene.dish_radius

    def test_halo_only_on_bvg_plus(self):
        scene = sample_scene(GeneratorParams(canvas_size=160), 3)
        for c in scene.colonies:
            if c.kind == BVG_PLUS:
                assert c.halo_radius > c.radius
            else:
                assert c.halo_radius is None

    def test_easy_preset_no_touching_no_reflections(self):
        p = GeneratorParams(preset="easy", canvas_size=128)
        for seed in range(100):
            scene = sample_scene(p, seed)
            assert scene.reflections == []
            cs = scene.colonies
            for i in range(len(cs)):
                for j in range(i + 1, len(cs)):
                    d = math.hypot(cs[i].cx - cs[j].cx, cs[i].cy - cs[j].cy)
                    assert d > cs[i].radius + cs[j].radius

    def test_realistic_preset_has_reflections(self):
        scene = sample_scene(GeneratorParams(canvas_size=128), 5)
        assert 2 <= len(scene.reflections) <= 4

    def test_overfull_dish_skips_colonies_without_hanging(self):
        # Far more colonies than fit: placement failures are skipped.
        p = GeneratorParams(canvas_size=64, lambda_plus=300.0, lambda_minus=50.0)
        scene = sample_scene(p, 1)
        assert len(scene.colonies) < 250
        for c in scene.colonies:
            d = math.hypot(c.cx - scene.dish_cx, c.cy - scene.dish_cy)
            assert d + c.radius <= scene.dish_radius

    def test_scene_json_round_trip(self):
        scene = sample_scene(GeneratorParams(canvas_size=128), 17)
        clone = DishScene.from_json_dict(scene.to_json_dict())
        assert clone.to_json_dict() == scene.to_json_dict()


class TestRenderMask:
    def test_empty_scene_all_background(self):
        scene = DishScene(64, 64, 32.0, 32.0, 29.0, [], [], 0.0, 0)
        mask = render_mask(scene)
        assert (mask == BACKGROUND).all()

    def test_well_separated_discs_have_no_border(self):
        from colonyseg.dishgen import Colony

        colonies = [
            Colony(cx=20.0, cy=20.0, radius=5.0, kind=BVG_MINUS),
            Colony(cx=45.0, cy=45.0, radius=5.0, kind=BVG_MINUS),
        ]
        scene = DishScene(64, 64, 32.0, 32.0, 30.0, colonies, [], 0.0, 0)
        mask = render_mask(scene)
        assert (mask == BORDER).sum() == 0
        assert len(evalkit.connected_components(mask, BVG_MINUS)) == 2

    def test_overlapping_discs_are_separated_by_border(self):
        from colonyseg.dishgen import Colony

        colonies = [
            Colony(cx=28.0, cy=32.0, radius=6.0, kind=BVG_PLUS, halo_radius=9.0),
            Colony(cx=38.0, cy=32.0, radius=6.0, kind=BVG_PLUS, halo_radius=9.0),
        ]
        scene = DishScene(64, 64, 32.0, 32.0, 30.0, colonies, [], 0.0, 0)
        mask = render_mask(scene)
        assert (mask == BORDER).sum() > 0
        assert len(evalkit.connected_components(mask, BVG_PLUS)) == 2

    def test_touching_pairs_in_sampled_scenes_stay_separated(self):
        p = GeneratorParams(canvas_size=192, p_touch=0.6)
        for seed in range(30):
            scene = sample_scene(p, 9000 + seed)
            mask = render_mask(scene)
            n_plus, n_minus = evalkit.count_colonies(mask)
            want_plus = sum(1 for c in scene.colonies if c.kind == BVG_PLUS)
            want_minus = sum(1 for c in scene.colonies if c.kind == BVG_MINUS)
            assert (n_plus, n_minus) == (want_plus, want_minus), seed

    def test_colony_pixels_lie_inside_a_disc_of_their_kind(self):
        p = GeneratorParams(canvas_size=160)
        scene = sample_scene(p, 21)
        mask = render_mask(scene)
        for kind in (BVG_PLUS, BVG_MINUS):
            for r, c in np.argwhere(mask == kind):
                inside = any(
                    col.kind == kind
                    and math.hypot(c - col.cx, r - col.cy) <= col.radius
                    for col in scene.colonies
                )
                assert inside

    def test_every_colony_contributes_pixels(self):
        p = GeneratorParams(canvas_size=160)
        for seed in range(10):
            scene = sample_scene(p, 400 + seed)
            mask = render_mask(scene)
            for col in scene.colonies:
                if col.radius < 2.0:
                    continue
                rr = np.arange(max(int(col.cy) - 15, 0), min(int(col.cy) + 16, 160))
                cc = np.arange(max(int(col.cx) - 15, 0), min(int(col.cx) + 16, 160))
                region = mask[np.ix_(rr, cc)]
                assert (region == col.kind).any()


class TestRenderImage:
    def test_default_size(self):
        img = render_image(sample_scene(GeneratorParams(), 1))
        assert img.shape == (480, 480, 3)
        assert img.dtype == np.uint8

    def test_empty_scene_flat_agar(self):
        scene = DishScene(96, 96, 48.0, 48.0, 44.0, [], [], 0.0, 0)
        img = render_image(scene)
        yy, xx = np.mgrid[0:96, 0:96]
        inside = np.hypot(xx - 48.0, yy - 48.0) <= 40.0
        inner = img[inside]
        assert (inner == inner[0]).all()
        np.testing.assert_array_equal(inner[0], dishgen.AGAR_RGB)

    def test_halo_darker_than_agar_darker_than_colony(self):
        p = GeneratorParams(canvas_size=192, noise_level=0.0, preset="easy")
        scene = sample_scene(p, 8)
        img = render_image(scene).astype(np.float64)
        mask = render_mask(scene)
        yy, xx = np.mgrid[0:192, 0:192]
        halo_sel = np.zeros((192, 192), dtype=bool)
        for c in scene.colonies:
            if c.kind != BVG_PLUS:
                continue
            d = np.hypot(xx - c.cx, yy - c.cy)
            halo_sel |= (d >= c.radius + 1.0) & (d <= c.halo_radius - 0.5)
        assert halo_sel.any()
        dish = np.hypot(xx - scene.dish_cx, yy - scene.dish_cy) <= scene.dish_radius - 2
        agar_sel = dish & (mask == BACKGROUND) & ~halo_sel
        for c in scene.colonies:
            d = np.hypot(xx - c.cx, yy - c.cy)
            agar_sel &= d > (c.halo_radius or c.radius) + 1.0
        colony_sel = mask != BACKGROUND
        mean = lambda sel: img[sel].mean()
        assert mean(halo_sel) < mean(agar_sel) < mean(colony_sel)

    def test_deterministic_given_scene(self):
        scene = sample_scene(GeneratorParams(canvas_size=128), 33)
        np.testing.assert_array_equal(render_image(scene), render_image(scene))


class TestStatistics:
    def test_poisson_means_near_priors(self):
        p = GeneratorParams(canvas_size=128)
        n_plus, n_minus = [], []
        for seed in range(400):
            scene = sample_scene(p, 50_000 + seed)
            n_plus.append(sum(1 for c in scene.colonies if c.kind == BVG_PLUS))
            n_minus.append(sum(1 for c in scene.colonies if c.kind == BVG_MINUS))
        assert 19.3 <= np.mean(n_plus) <= 21.4
        assert 4.49 <= np.mean(n_minus) <= 4.97


class TestGenerateDataset:
    def test_writes_expected_files(self, tmp_path):
        params = GeneratorParams(canvas_size=96)
        manifest = generate_dataset(params, 3, 7, tmp_path)
        assert manifest["count"] == 3
        for i in range(3):
            assert (tmp_path / f"image_{i:03d}.ppm").exists()
            assert (tmp_path / f"mask_{i:03d}.pgm").exists()
            assert (tmp_path / f"scene_{i:03d}.json").exists()
        assert (tmp_path / "manifest.json").exists()

    def test_regeneration_is_byte_identical(self, tmp_path):
        params = GeneratorParams(canvas_size=96)
        a = tmp_path / "a"
        b = tmp_path / "b"
        generate_dataset(params, 4, 7, a)
        generate_dataset(params, 4, 7, b)
        for name in sorted(p.name for p in a.iterdir()):
            assert (a / name).read_bytes() == (b / name).read_bytes(), name

    def test_manifest_counts_match_count_colonies(self, tmp_path):
        params = GeneratorParams(canvas_size=96)
        manifest = generate_dataset(params, 5, 3, tmp_path)
        for entry in manifest["images"]:
            mask = read_pgm(tmp_path / entry["mask"])
            n_plus, n_minus = evalkit.count_colonies(mask)
            assert entry["n_bvg_plus"] == n_plus
            assert entry["n_bvg_minus"] == n_minus

    def test_masks_only_hold_labels_0_to_3(self, tmp_path):
        generate_dataset(GeneratorParams(canvas_size=96), 2, 1, tmp_path)
        mask = read_pgm(tmp_path / "mask_000.pgm")
        assert set(np.unique(mask)) <= {0, 1, 2, 3}

    def test_background_dominates(self, tmp_path):
        params = GeneratorParams(canvas_size=128)
        generate_dataset(params, 12, 5, tmp_path)
        total = 0
        background = 0
        for i in range(12):
            mask = read_pgm(tmp_path / f"mask_{i:03d}.pgm")
            total += mask.size
            background += (mask == BACKGROUND).sum()
        assert background / total > 0.95  # full-scale margin checked at 480

    def test_n_below_one_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            generate_dataset(GeneratorParams(), 0, 0, tmp_path)

    def test_scene_json_loads(self, tmp_path):
        generate_dataset(GeneratorParams(canvas_size=96), 1, 9, tmp_path)
        payload = json.loads((tmp_path / "scene_000.json").read_text())
        scene = DishScene.from_json_dict(payload)
        mask = read_pgm(tmp_path / "mask_000.pgm")
        np.testing.assert_array_equal(render_mask(scene), mask)


class TestPNMFormats:
    def test_ppm_round_trip(self, tmp_path):
        img = np.random.default_rng(0).integers(0, 256, size=(10, 12, 3), dtype=np.uint8)
        path = tmp_path / "x.ppm"
        from colonyseg.pnm import write_ppm

        write_ppm(path, img)
        np.testing.assert_array_equal(read_ppm(path), img)

    def test_pgm_round_trip(self, tmp_path):
        img = np.random.default_rng(1).integers(0, 4, size=(7, 9), dtype=np.uint8)
        path = tmp_path / "x.pgm"
        from colonyseg.pnm import write_pgm

        write_pgm(path, img)
        np.testing.assert_array_equal(read_pgm(path), img)

    def test_reader_accepts_comments(self, tmp_path):
        path = tmp_path / "c.pgm"
        path.write_bytes(b"P5\n# a comment\n3 2\n255\n" + bytes(6))
        np.testing.assert_array_equal(read_pgm(path), np.zeros((2, 3), np.uint8))

    def test_files_parse_under_pillow(self, tmp_path):
        PIL = pytest.importorskip("PIL.Image")
        params = GeneratorParams(canvas_size=96)
        generate_dataset(params, 1, 2, tmp_path)
        with PIL.open(tmp_path / "image_000.ppm") as im:
            rgb = np.asarray(im.convert("RGB"))
        np.testing.assert_array_equal(rgb, read_ppm(tmp_path / "image_000.ppm"))
        with PIL.open(tmp_path / "mask_000.pgm") as im:
            gray = np.asarray(im)
        np.testing.assert_array_equal(gray, read_pgm(tmp_path / "mask_000.pgm"))
