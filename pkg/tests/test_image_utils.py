"""
Tests for protofed.image_utils module.
"""

import numpy as np
import pytest

import protofed
from protofed.image_utils import draw_box, load_pnm, save_pnm, upsample_bilinear


def test_load_binary_pgm(temp_output_dir):
    path = temp_output_dir / "tiny.pgm"
    path.write_bytes(b"P5\n# comment\n2 2\n255\n" + bytes([0, 255, 128, 64]))
    image = load_pnm(path)
    assert image.shape == (1, 2, 2)
    np.testing.assert_array_equal(image[0], [[0.0, 1.0], [128 / 255, 64 / 255]])


def test_ppm_round_trip_error_is_half_a_level(rng, temp_output_dir):
    image = rng.uniform(0.0, 1.0, size=(3, 5, 7))
    loaded = load_pnm(save_pnm(image, temp_output_dir / "image.ppm"))
    assert loaded.shape == (3, 5, 7)
    assert np.max(np.abs(loaded - image)) <= 1.0 / 510.0 + 1e-12


def test_sixteen_bit_pnm_is_rejected(temp_output_dir):
    path = temp_output_dir / "deep.pgm"
    path.write_bytes(b"P5\n1 1\n65535\n" + bytes([0, 0]))
    with pytest.raises(protofed.FormatError):
        load_pnm(path)


def test_unknown_magic_reports_offset(temp_output_dir):
    path = temp_output_dir / "ascii.pgm"
    path.write_bytes(b"P2\n1 1\n255\n0\n")
    with pytest.raises(protofed.FormatError) as info:
        load_pnm(path)
    assert info.value.offset == 0


def test_short_pixel_data(temp_output_dir):
    path = temp_output_dir / "short.pgm"
    path.write_bytes(b"P5\n4 4\n255\n" + bytes(5))
    with pytest.raises(protofed.FormatError):
        load_pnm(path)


def test_missing_image():
    with pytest.raises(FileNotFoundError):
        load_pnm("does/not/exist.pgm")


def test_upsample_keeps_corners_and_interpolates():
    values = np.array([[0.0, 1.0], [2.0, 3.0]])
    out = upsample_bilinear(values, (3, 3))
    np.testing.assert_allclose(out, [[0.0, 0.5, 1.0], [1.0, 1.5, 2.0],
                                     [2.0, 2.5, 3.0]], rtol=1e-15)


def test_upsample_constant_map_stays_constant():
    out = upsample_bilinear(np.full((4, 4), 0.3), (16, 16))
    assert np.all(out == 0.3)


def test_upsample_cannot_downscale():
    with pytest.raises(protofed.ConfigurationError):
        upsample_bilinear(np.zeros((4, 4)), (2, 8))


def test_draw_box_outline():
    out = draw_box(np.zeros((1, 5, 5)), protofed.Box(1, 1, 3, 2))
    assert out.shape == (3, 5, 5)
    assert out[0, 1, 1] == 1.0 and out[0, 2, 3] == 1.0
    assert out[0, 0, 0] == 0.0 and out[1, 1, 1] == 0.0
