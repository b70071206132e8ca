import numpy as np
import pytest
from PIL import Image

from wsinr.data import (
    ImagePyramid,
    SyntheticSpec,
    WindowSampler,
    build_pyramid,
    denormalize_coords,
    generate_synthetic,
    level_index,
    load_mask_png,
    load_png,
    load_slide,
    normalize_coords,
    owned_region,
    pixel_to_coords,
    read_manifest,
    sample_windows,
    save_png,
    tag_filename,
    window_grid,
    write_dataset,
)
from wsinr.errors import DataError, DomainError, GenerationError


def pyramid(h, w, levels=3, seed=0):
    rng = np.random.default_rng(seed)
    return build_pyramid(rng.random((h, w, 3)), rng.random((h, w)) > 0.7, levels, "t")


class TestPyramid:
    @pytest.mark.parametrize("h, w", [(64, 64), (65, 37), (128, 96)])
    def test_level_shapes(self, h, w):
        p = pyramid(h, w)
        for k in range(3):
            assert p.level_shape(k) == (-(-h // 2**k), -(-w // 2**k))
            assert p.masks[k].shape == p.level_shape(k)

    def test_constant(self):
        p = build_pyramid(np.full((16, 16, 3), 0.3), None)
        for img in p.images:
            assert np.allclose(img, 0.3, atol=1e-15)

    def test_checkerboard(self):
        img = np.zeros((2, 2, 3))
        img[0, 0] = img[1, 1] = 1.0
        p = build_pyramid(img, None, 2)
        assert p.images[1].shape == (1, 1, 3)
        assert np.allclose(p.images[1], 0.5)

    def test_all_lesion_mask(self):
        p = build_pyramid(np.zeros((16, 16, 3)), np.ones((16, 16)), 3)
        assert all(m.all() for m in p.masks)

    def test_mask_tie_goes_to_lesion(self):
        m = np.array([[1, 0], [0, 1]])
        assert build_pyramid(np.zeros((2, 2, 3)), m, 2).masks[1].tolist() == [[True]]
        m = np.array([[1, 0], [0, 0]])
        assert build_pyramid(np.zeros((2, 2, 3)), m, 2).masks[1].tolist() == [[False]]

    def test_mass_conservation(self):
        p = pyramid(64, 32)
        for img in p.images[1:]:
            assert abs(img.mean() - p.images[0].mean()) < 1e-9

    def test_odd_sizes_average_present_pixels(self):
        img = np.arange(3.0)[None, :, None] * np.ones((1, 3, 3))
        p = build_pyramid(np.repeat(img, 2, axis=0), None, 2)
        assert p.images[1][0, :, 0].tolist() == [0.5, 2.0]

    def test_too_small(self):
        with pytest.raises(DataError):
            build_pyramid(np.zeros((3, 8, 3)), None, 3)

    def test_mask_mismatch(self):
        with pytest.raises(DataError):
            build_pyramid(np.zeros((8, 8, 3)), np.zeros((8, 7)), 2)

    def test_domain_preserves_aspect(self):
        p = pyramid(64, 128)
        wn, hn = p.domain
        assert max(wn, hn) == 1.0
        assert wn / hn == pytest.approx(128 / 64, abs=0)


class TestCoords:
    def test_origin_pixel(self):
        p = pyramid(64, 64)
        assert normalize_coords((0, 0), 0, p) == (0.5 / 64, 0.5 / 64)

    @pytest.mark.parametrize("k", [0, 1, 2])
    def test_center(self, k):
        p = pyramid(64, 48)
        h, w = p.level_shape(k)
        x, y = normalize_coords((h // 2, w // 2), k, p)
        wn, hn = p.domain
        pitch = 2**k / 64
        assert abs(x - wn / 2) <= pitch and abs(y - hn / 2) <= pitch

    def test_levels_agree_within_one_pitch(self):
        # exhaustive over a 64x64 slide, base against base/2 and base/4 ancestors
        p = pyramid(64, 64)
        rr, cc = np.meshgrid(np.arange(64), np.arange(64), indexing="ij")
        base = pixel_to_coords(rr, cc, 0, p)
        for k in (1, 2):
            anc = pixel_to_coords(rr // 2**k, cc // 2**k, k, p)
            assert np.abs(base - anc).max() <= 2**k / 64

    def test_round_trip(self):
        p = pyramid(40, 64)
        for k in range(3):
            h, w = p.level_shape(k)
            for r in range(0, h, 3):
                for c in range(0, w, 5):
                    assert denormalize_coords(normalize_coords((r, c), k, p), k, p) == (r, c)

    def test_out_of_bounds(self):
        p = pyramid(16, 16)
        with pytest.raises(DomainError):
            pixel_to_coords([16], [0], 0, p)
        with pytest.raises(DomainError):
            denormalize_coords((1.2, 0.0), 0, p)

    def test_level_tags(self):
        assert [level_index(t) for t in ("base", "base/2", "base/4")] == [0, 1, 2]
        assert tag_filename("base/4") == "base_4"
        with pytest.raises(DomainError):
            level_index("base/8")


class TestWindows:
    def test_four_windows(self):
        assert window_grid((128, 128), 64) == [(0, 0, 64, 64), (0, 64, 64, 64), (64, 0, 64, 64), (64, 64, 64, 64)]

    def test_last_window_shifts_inward(self):
        boxes = window_grid((100, 64), 64)
        assert [b[0] for b in boxes] == [0, 36]

    def test_small_level_single_window(self):
        assert window_grid((32, 32), 64) == [(0, 0, 32, 32)]

    @pytest.mark.parametrize("shape", [(128, 128), (100, 70), (64, 200)])
    def test_owned_regions_partition_the_level(self, shape):
        count = np.zeros(shape, dtype=int)
        for b in window_grid(shape, 64):
            rs, cs = owned_region(b, shape, 64)
            count[b[0] + rs.start : b[0] + rs.stop, b[1] + cs.start : b[1] + cs.stop] += 1
        assert (count == 1).all()

    def test_random_order_reproducible(self):
        p = pyramid(128, 128)
        s = WindowSampler(32, "random", seed=5)
        a = [w.origin for w in sample_windows(p, 0, s, epoch=3)]
        b = [w.origin for w in sample_windows(p, 0, s, epoch=3)]
        c = [w.origin for w in sample_windows(p, 0, s, epoch=4)]
        assert a == b and sorted(a) == sorted(c) and a != c

    def test_mask_pixels_covered_each_epoch(self):
        p = pyramid(100, 90)
        seen = np.zeros(p.masks[0].shape, dtype=bool)
        for w in sample_windows(p, 0, WindowSampler(32, "random", 1), 0):
            r, c = w.origin
            seen[r : r + w.size[0], c : c + w.size[1]] |= w.mask
        assert np.array_equal(seen, p.masks[0])

    def test_window_coords_match_pixels(self):
        p = pyramid(64, 64)
        w = next(sample_windows(p, 1, WindowSampler(16)))
        assert w.coords.shape == (256, 2)
        assert tuple(w.coords[0]) == normalize_coords((0, 0), 1, p)
        assert tuple(w.coords[1]) == normalize_coords((0, 1), 1, p)

    def test_tissue_filter_skips_white(self):
        img = np.ones((64, 64, 3))
        img[:32, :32] = 0.3
        p = build_pyramid(img, None, 1)
        kept = list(sample_windows(p, 0, WindowSampler(32, tissue_threshold=0.99)))
        assert [w.origin for w in kept] == [(0, 0)]

    def test_images_only_strips_masks(self):
        p = pyramid(32, 32)
        imgs = p.images_only()
        assert type(imgs) is ImagePyramid and not hasattr(imgs, "masks")
        assert next(sample_windows(imgs, 0, WindowSampler(16))).mask is None


class TestSynthetic:
    def test_deterministic(self):
        a = generate_synthetic(SyntheticSpec(seed=3, height=128, width=128))
        b = generate_synthetic(SyntheticSpec(seed=3, height=128, width=128))
        assert all(np.array_equal(x, y) for x, y in zip(a.images, b.images))
        assert all(np.array_equal(x, y) for x, y in zip(a.masks, b.masks))

    def test_fraction_bounds_over_100_seeds(self):
        for seed in range(100):
            s = generate_synthetic(SyntheticSpec(seed=seed, height=128, width=128))
            assert 0.05 <= s.masks[0].mean() <= 0.4, seed

    def test_zero_blobs_gives_empty_mask(self):
        s = generate_synthetic(SyntheticSpec(seed=1, height=128, width=128, blob_count=(0, 0)))
        assert not s.masks[0].any()

    def test_impossible_bounds(self):
        with pytest.raises(GenerationError):
            generate_synthetic(SyntheticSpec(seed=1, height=128, width=128, lesion_fraction=(0.9, 0.95), max_retries=3))

    def test_canvas_minimum(self):
        with pytest.raises(GenerationError):
            generate_synthetic(SyntheticSpec(height=64, width=64))

    def test_values_in_unit_range(self):
        s = generate_synthetic(SyntheticSpec(seed=2, height=128, width=128))
        assert s.images[0].min() >= 0 and s.images[0].max() <= 1
        assert s.slide_id == "syn0002"

    def test_spec_json_round_trip(self):
        import json

        spec = SyntheticSpec(seed=9)
        assert SyntheticSpec.from_json(json.loads(json.dumps(spec.to_json()))) == spec


class TestFiles:
    def test_white_pixel(self, tmp_path):
        Image.fromarray(np.full((2, 2, 3), 255, np.uint8)).save(tmp_path / "w.png")
        assert (load_png(tmp_path / "w.png") == 1.0).all()

    def test_mask_threshold(self, tmp_path):
        Image.fromarray(np.array([[128, 127]], np.uint8)).save(tmp_path / "m.png")
        assert load_mask_png(tmp_path / "m.png").tolist() == [[True, False]]

    def test_round_trip_within_quantization(self, tmp_path):
        img = np.random.default_rng(0).random((8, 8, 3))
        save_png(tmp_path / "a.png", img)
        assert np.abs(load_png(tmp_path / "a.png") - img).max() <= 0.5 / 255 + 1e-12

    def test_unreadable(self, tmp_path):
        (tmp_path / "x.png").write_bytes(b"not a png")
        with pytest.raises(DataError):
            load_png(tmp_path / "x.png")

    def test_rgb_mask_rejected(self, tmp_path):
        Image.fromarray(np.zeros((2, 2, 3), np.uint8)).save(tmp_path / "m.png")
        with pytest.raises(DataError):
            load_mask_png(tmp_path / "m.png")

    def test_size_mismatch(self, tmp_path):
        save_png(tmp_path / "i.png", np.zeros((8, 8, 3)))
        save_png(tmp_path / "m.png", np.zeros((8, 4), bool))
        with pytest.raises(DataError):
            load_slide("s", tmp_path / "i.png", tmp_path / "m.png")

    def test_manifest_round_trip(self, tmp_path):
        slides = [generate_synthetic(SyntheticSpec(seed=s, height=128, width=128)) for s in (0, 1)]
        path = write_dataset(tmp_path, [(slides[0], "train", None), (slides[1], "test", None)])
        (back,) = read_manifest(path, "test")
        assert back.slide_id == "syn0001"
        assert np.array_equal(back.masks[0], slides[1].masks[0])
        assert np.abs(back.images[0] - slides[1].images[0]).max() <= 0.5 / 255 + 1e-12
        assert (tmp_path / "syn0001" / "image_base_4.png").exists()

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DataError):
            read_manifest(tmp_path / "nope.json")
