"""Imaging tests: I/O round-trips, detector behavior, crop geometry and the
quadrant split/reassembly contracts."""

import numpy as np
import pytest

from vigdc import imaging
from vigdc.manifest import BBox


def _disk_image(size=500, cx=250.0, cy=250.0, radius=44.0, value=220):
    yy, xx = np.mgrid[0:size, 0:size]
    img = np.full((size, size), 30, dtype=np.uint8)
    img[np.hypot(xx - cx, yy - cy) <= radius] = value
    return np.stack([img] * 3, axis=-1)


class TestImageIO:
    def test_roundtrip_bit_identical(self, tmp_path):
        rng = np.random.default_rng(0)
        img = rng.integers(0, 256, size=(37, 21, 3), dtype=np.uint8)
        path = tmp_path / "img.png"
        imaging.save_image(img, path)
        np.testing.assert_array_equal(imaging.load_image(path), img)

    def test_single_black_pixel_roundtrip(self, tmp_path):
        img = np.zeros((1, 1, 3), dtype=np.uint8)
        path = tmp_path / "px.png"
        imaging.save_image(img, path)
        np.testing.assert_array_equal(imaging.load_image(path), img)

    def test_corrupted_header_raises(self, tmp_path):
        path = tmp_path / "broken.png"
        path.write_bytes(b"\x89PNG\r\n\x1a\nGARBAGEGARBAGE")
        with pytest.raises(imaging.ImageIOError):
            imaging.load_image(path)

    def test_missing_file_raises(self, tmp_path):
        with pytest.raises(imaging.ImageIOError):
            imaging.load_image(tmp_path / "absent.png")

    def test_mask_roundtrip_binary(self, tmp_path):
        mask = np.random.default_rng(1).random((20, 20)) > 0.5
        path = tmp_path / "mask.png"
        imaging.save_mask(mask, path)
        np.testing.assert_array_equal(imaging.load_mask(path) > 0, mask)

    def test_to_model_input_scaling(self):
        img = np.full((4, 4, 3), 255, dtype=np.uint8)
        out = imaging.to_model_input(img)
        assert out.shape == (1, 3, 4, 4)
        assert out.dtype == np.float32
        assert np.all(out == 1.0)


class TestLocatePillar:
    def test_centered_disk(self):
        img = _disk_image(size=700, cx=350.0, cy=350.0, radius=88.0)
        box = imaging.locate_pillar(img)
        assert abs(box.cx - 350.0) <= 3.0
        assert abs(box.cy - 350.0) <= 3.0
        assert abs(box.width - 176.0) <= 17.6   # tight box within ±10% of diameter
        assert box.source == "detector"

    def test_black_image_raises(self):
        img = np.zeros((100, 100, 3), dtype=np.uint8)
        with pytest.raises(imaging.PillarNotFoundError):
            imaging.locate_pillar(img)

    def test_tiny_blob_below_min_area_raises(self):
        img = np.zeros((200, 200, 3), dtype=np.uint8)
        img[100:103, 100:103] = 255
        with pytest.raises(imaging.PillarNotFoundError):
            imaging.locate_pillar(img, min_area=200)

    def test_translation_equivariance(self):
        base = imaging.locate_pillar(_disk_image(cx=200.0, cy=220.0))
        for dx, dy in ((37, 0), (0, -41), (23, 31)):
            moved = imaging.locate_pillar(_disk_image(cx=200.0 + dx, cy=220.0 + dy))
            assert abs((moved.cx - base.cx) - dx) <= 1.0
            assert abs((moved.cy - base.cy) - dy) <= 1.0


class TestCropCentered:
    def test_center_lands_at_crop_center(self):
        img = _disk_image(size=1000, cx=312.0, cy=648.0, radius=88.0)
        crop = imaging.crop_centered(img, BBox(cx=312, cy=648, width=176, height=176), 700)
        assert crop.shape == (700, 700, 3)
        box = imaging.locate_pillar(crop)
        assert abs(box.cx - 350.0) <= 3.0
        assert abs(box.cy - 350.0) <= 3.0

    def test_pixel_count_halves_from_1000(self):
        ratio = (1000 * 1000) / (700 * 700)
        assert abs(ratio - 2.0) < 0.05

    def test_corner_pillar_zero_pads(self):
        img = _disk_image(size=1000, cx=10.0, cy=10.0, radius=60.0)
        crop = imaging.crop_centered(img, BBox(cx=10, cy=10, width=120, height=120), 700)
        # everything above/left of the pillar is outside the frame -> black
        assert np.all(crop[:300, :300] == 0)

    def test_two_times_diameter_rule(self):
        assert abs(700 / 350 - 2.0) < 1e-12

    def test_odd_crop_size_rejected(self):
        with pytest.raises(ValueError):
            imaging.crop_centered(_disk_image(), BBox(cx=250, cy=250, width=88, height=88), 701)

    def test_bbox_outside_image_rejected(self):
        with pytest.raises(ValueError):
            imaging.crop_centered(_disk_image(), BBox(cx=5000, cy=5000, width=10, height=10), 100)

    def test_output_size_fixed_regardless_of_position(self):
        img = _disk_image(size=500)
        for cx, cy in ((10, 10), (490, 250), (250, 499)):
            crop = imaging.crop_centered(img, BBox(cx=cx, cy=cy, width=80, height=80), 350)
            assert crop.shape == (350, 350, 3)


class TestQuadrantSplit:
    def test_700_into_352_has_4px_overlap(self):
        assert 2 * 352 - 700 == 4
        img = np.random.default_rng(0).integers(0, 256, (700, 700, 3), dtype=np.uint8)
        tiles = imaging.quadrant_split(img, tile=352)
        assert len(tiles) == 4
        assert all(t.shape == (352, 352, 3) for t in tiles)
        # the right edge of tile 0 overlaps the left edge of tile 1 by 4 px
        np.testing.assert_array_equal(tiles[0][:, -4:], tiles[1][:, :4])

    def test_pipeline_pixel_reduction_factor(self):
        ratio = (1000 * 1000) / (352 * 352)
        assert 7.9 <= ratio <= 8.2

    def test_704_exact_partition(self):
        img = np.random.default_rng(1).integers(0, 256, (704, 704, 3), dtype=np.uint8)
        tiles = imaging.quadrant_split(img, tile=352)
        top = np.concatenate([tiles[0], tiles[1]], axis=1)
        bottom = np.concatenate([tiles[2], tiles[3]], axis=1)
        np.testing.assert_array_equal(np.concatenate([top, bottom], axis=0), img)

    def test_reassembly_bit_exact(self):
        img = np.random.default_rng(2).integers(0, 256, (700, 700, 3), dtype=np.uint8)
        tiles = imaging.quadrant_split(img, tile=352)
        np.testing.assert_array_equal(imaging.reassemble_quadrants(tiles, 700), img)

    def test_every_pixel_covered(self):
        marker = np.zeros((700, 700), dtype=np.uint8)
        coverage = np.zeros_like(marker, dtype=int)
        for q in range(4):
            x, y = imaging.quadrant_anchor(q, 700, 352)
            coverage[y:y + 352, x:x + 352] += 1
        assert coverage.min() >= 1

    def test_tile_larger_than_image_rejected(self):
        with pytest.raises(ValueError):
            imaging.quadrant_split(np.zeros((100, 100, 3), dtype=np.uint8), tile=150)

    def test_uncovering_tile_rejected(self):
        with pytest.raises(ValueError):
            imaging.quadrant_split(np.zeros((700, 700, 3), dtype=np.uint8), tile=300)

    def test_non_square_rejected(self):
        with pytest.raises(ValueError):
            imaging.quadrant_split(np.zeros((700, 500, 3), dtype=np.uint8), tile=352)
