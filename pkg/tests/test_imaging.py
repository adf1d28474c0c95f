"""
Tests for image planes, file I/O, partitioning, residual statistics and toy data
"""

import numpy as np
import pytest

from diffcodec.errors import DataError, ImageFormatError
from diffcodec.imaging import (ImagePlane, block_stats, decode_ppm, encode_ppm, grid_stats, highpass,
                               load_image, partition, save_image)
from diffcodec.synthetic import PATTERNS, pattern_image, random_crop, toy_dataset, write_dataset


def flat(height, width, value=0.5):
    return ImagePlane(data=np.full((height, width, 3), value))


class TestImagePlane:
    """Construction checks and layout conversions"""

    def test_rejects_out_of_range_values(self):
        with pytest.raises(DataError):
            ImagePlane(data=np.full((4, 4, 3), 1.5))

    def test_rejects_wrong_shape(self):
        with pytest.raises(DataError):
            ImagePlane(data=np.zeros((4, 4)))

    def test_chw_round_trip(self):
        rng = np.random.default_rng(0)
        image = ImagePlane(data=rng.uniform(size=(6, 5, 3)))
        chw = image.to_chw()
        assert chw.shape == (1, 3, 6, 5)
        np.testing.assert_array_equal(ImagePlane.from_chw(chw).data, image.data)

    def test_from_chw_clips(self):
        image = ImagePlane.from_chw(np.full((1, 3, 2, 2), 1.7))
        assert image.data.max() == 1.0

    def test_pixels(self):
        assert flat(7, 9).pixels == 63


class TestPPM:
    """Binary portable pixmap reading and writing"""

    def test_round_trip_is_exact_for_8bit_values(self, tmp_path):
        rng = np.random.default_rng(1)
        image = ImagePlane.from_bytes(rng.integers(0, 256, size=(5, 7, 3)))
        path = save_image(image, tmp_path / "x.ppm")
        loaded = load_image(path)
        np.testing.assert_array_equal(loaded.to_bytes(), image.to_bytes())
        assert loaded.metadata["source"] == str(path)

    def test_header_comments_are_skipped(self):
        blob = b"P6\n# made by hand\n2 1\n255\n" + bytes([255, 0, 0, 0, 0, 255])
        image = decode_ppm(blob)
        assert (image.height, image.width) == (1, 2)
        np.testing.assert_array_equal(image.to_bytes()[0, 0], [255, 0, 0])

    def test_five_by_three_is_row_major(self, tmp_path):
        payload = bytes(range(5 * 3 * 3))
        path = tmp_path / "wide.ppm"
        path.write_bytes(b"P6\n5 3\n255\n" + payload)
        image = load_image(path)
        assert (image.height, image.width) == (3, 5)
        pixels = image.to_bytes()
        np.testing.assert_array_equal(pixels[0, 4], [12, 13, 14])
        np.testing.assert_array_equal(pixels[1, 0], [15, 16, 17])
        np.testing.assert_array_equal(pixels[2, 4], [42, 43, 44])

    def test_encode_header(self):
        assert encode_ppm(flat(2, 3)).startswith(b"P6\n3 2\n255\n")

    @pytest.mark.parametrize("blob,reason", [
        (b"P5\n1 1\n255\n\x00", "magic"),
        (b"P6\n1 1\n65535\n\x00\x00\x00", "maxval"),
        (b"P6\n2 2\n255\n\x00\x00\x00", "truncated"),
        (b"P6\nx 1\n255\n", "malformed"),
    ])
    def test_malformed_files_raise(self, blob, reason):
        with pytest.raises(ImageFormatError, match=reason):
            decode_ppm(blob, source="bad.ppm")

    def test_missing_file_is_data_error(self, tmp_path):
        with pytest.raises(DataError):
            load_image(tmp_path / "absent.ppm")

    def test_png_round_trip(self, tmp_path):
        rng = np.random.default_rng(2)
        image = ImagePlane.from_bytes(rng.integers(0, 256, size=(8, 8, 3)))
        loaded = load_image(save_image(image, tmp_path / "x.png"))
        np.testing.assert_array_equal(loaded.to_bytes(), image.to_bytes())


class TestPartition:
    """Block grids over edge-padded images"""

    def test_exact_tiling(self):
        grid = partition(flat(64, 64), 16)
        assert (grid.rows, grid.cols, grid.count) == (4, 4, 16)
        assert grid.blocks[5].row == 1 and grid.blocks[5].col == 1
        assert (grid.blocks[5].y0, grid.blocks[5].x0) == (16, 16)

    def test_ragged_image_is_edge_padded(self):
        rng = np.random.default_rng(3)
        image = ImagePlane(data=rng.uniform(size=(40, 60, 3)))
        grid = partition(image, 16)
        assert (grid.rows, grid.cols) == (3, 4)
        assert grid.padded.height == 48 and grid.padded.width == 64
        np.testing.assert_array_equal(grid.padded.data[47, 10], image.data[39, 10])
        np.testing.assert_array_equal(grid.padded.data[5, 63], image.data[5, 59])
        assert (grid.height, grid.width) == (40, 60)

    def test_blocks_are_raster_ordered(self):
        grid = partition(flat(32, 48), 16)
        assert [(b.row, b.col) for b in grid.blocks] == [(r, c) for r in range(2) for c in range(3)]
        assert [b.index for b in grid.blocks] == list(range(6))

    def test_small_block_size_rejected(self):
        with pytest.raises(ValueError):
            partition(flat(8, 8), 2)

    def test_coordinates_span_unit_square(self):
        grid = partition(flat(48, 48), 16)
        np.testing.assert_array_equal(grid.coordinates(grid.blocks[0]), [0.0, 0.0])
        np.testing.assert_array_equal(grid.coordinates(grid.blocks[-1]), [1.0, 1.0])


class TestResidualStatistics:
    """High-pass residual and per-block activity features"""

    def test_flat_image_has_zero_residual(self):
        residual = highpass(flat(16, 16, 0.3))
        assert np.allclose(residual, 0.0)

    def test_impulse_response(self):
        data = np.zeros((5, 5, 3))
        data[2, 2] = 1.0
        residual = highpass(ImagePlane(data=data))
        assert residual[2, 2] == pytest.approx(4.0)
        assert residual[1, 2] == pytest.approx(-1.0)
        assert residual[0, 0] == pytest.approx(0.0)

    def test_block_stats_values(self):
        residual = np.zeros((4, 4))
        residual[0, 0] = 0.2
        residual[1, 1] = -0.02
        grid = partition(flat(4, 4), 4)
        stats = block_stats(residual, grid.blocks[0])
        assert stats[0] == pytest.approx(0.22 / 16)
        assert stats[1] == pytest.approx(np.std(residual))
        assert stats[2] == pytest.approx(0.2)
        assert stats[3] == pytest.approx(1 / 16)

    def test_textured_blocks_score_higher(self):
        image = pattern_image("mosaic", 32, 64, np.random.default_rng(4))
        grid = partition(image, 16)
        stats = grid_stats(highpass(grid.padded), grid)
        left = stats[[0, 4], 0]
        right = stats[[3, 7], 0]
        assert right.min() > left.max()

    def test_block_outside_residual_raises(self):
        grid = partition(flat(32, 32), 16)
        with pytest.raises(ValueError):
            block_stats(np.zeros((16, 16)), grid.blocks[3])


class TestSyntheticData:
    """Toy textures used by the desk-scale experiments"""

    @pytest.mark.parametrize("pattern", PATTERNS)
    def test_every_pattern_is_valid(self, pattern):
        image = pattern_image(pattern, 24, 32, np.random.default_rng(0))
        assert (image.height, image.width) == (24, 32)
        assert image.metadata["pattern"] == pattern

    def test_unknown_pattern(self):
        with pytest.raises(ValueError):
            pattern_image("plaid", 8, 8, np.random.default_rng(0))

    def test_dataset_is_deterministic(self):
        first = toy_dataset(6, size=16, seed=3)
        second = toy_dataset(6, size=16, seed=3)
        for a, b in zip(first, second):
            np.testing.assert_array_equal(a.data, b.data)
        assert "crop" in first[2].metadata

    def test_crop_too_large(self):
        with pytest.raises(ValueError):
            random_crop(flat(8, 8), 9, 8, np.random.default_rng(0))

    def test_write_dataset(self, tmp_path):
        paths = write_dataset(tmp_path, 4, size=16, seed=0)
        assert [p.name for p in paths] == ["toy_000.ppm", "toy_001.ppm", "toy_002.ppm", "toy_003.ppm"]
        assert load_image(paths[0]).width == 16
