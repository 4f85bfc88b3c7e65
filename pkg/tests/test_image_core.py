import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mcan.image_core import (
    CorruptImageError,
    ImageNotFoundError,
    UnsupportedFormatError,
    decode_image,
    encode_png,
    encode_ppm,
    load_image,
    resize_bilinear,
    save_image,
    to_unit_range,
)


def ppm_bytes(w, h, raw: bytes) -> bytes:
    return b"P6\n%d %d\n255\n" % (w, h) + raw


def scalar_bilinear(img, out_h, out_w):
    """Per-pixel half-pixel-center bilinear interpolation, written out with scalar loops."""
    in_h, in_w, ch = img.shape
    out = np.zeros((out_h, out_w, ch))
    for y in range(out_h):
        sy = min(max((y + 0.5) * in_h / out_h - 0.5, 0.0), in_h - 1)
        y0 = int(math.floor(sy))
        y1 = min(y0 + 1, in_h - 1)
        wy = sy - y0
        for x in range(out_w):
            sx = min(max((x + 0.5) * in_w / out_w - 0.5, 0.0), in_w - 1)
            x0 = int(math.floor(sx))
            x1 = min(x0 + 1, in_w - 1)
            wx = sx - x0
            for c in range(ch):
                out[y, x, c] = (
                    img[y0, x0, c] * (1 - wy) * (1 - wx)
                    + img[y0, x1, c] * (1 - wy) * wx
                    + img[y1, x0, c] * wy * (1 - wx)
                    + img[y1, x1, c] * wy * wx
                )
    return out


def test_ppm_all_max_bytes_decode_to_one(tmp_path):
    f = tmp_path / "white.ppm"
    f.write_bytes(ppm_bytes(2, 2, b"\xff" * 12))
    img = load_image(f)
    assert img.shape == (2, 2, 3)
    assert np.all(img == 1.0)


def test_ppm_linear_byte_scaling(tmp_path):
    f = tmp_path / "px.ppm"
    f.write_bytes(ppm_bytes(1, 1, bytes([0, 128, 255])))
    np.testing.assert_array_equal(load_image(f)[0, 0], [0.0, 128 / 255, 1.0])


def test_ppm_header_comments():
    data = b"P6\n# made by hand\n1 1\n# another\n255\n" + bytes([10, 20, 30])
    np.testing.assert_array_equal(decode_image(data)[0, 0] * 255, [10, 20, 30])


def test_missing_file(tmp_path):
    missing = tmp_path / "nope.ppm"
    with pytest.raises(ImageNotFoundError, match="nope.ppm"):
        load_image(missing)


def test_error_kinds_are_distinct(tmp_path):
    bad_fmt = tmp_path / "a.bmp"
    bad_fmt.write_bytes(b"BM\x00\x00")
    with pytest.raises(UnsupportedFormatError, match="a.bmp"):
        load_image(bad_fmt)

    bad_header = tmp_path / "b.ppm"
    bad_header.write_bytes(b"P6\nxx 2\n255\n")
    with pytest.raises(CorruptImageError, match="b.ppm"):
        load_image(bad_header)

    truncated = tmp_path / "c.ppm"
    truncated.write_bytes(ppm_bytes(2, 2, b"\x00" * 5))
    with pytest.raises(CorruptImageError, match="c.ppm"):
        load_image(truncated)

    sixteen_bit = tmp_path / "d.ppm"
    sixteen_bit.write_bytes(b"P6\n1 1\n65535\n" + b"\x00" * 6)
    with pytest.raises(UnsupportedFormatError):
        load_image(sixteen_bit)

    broken_png = tmp_path / "e.png"
    broken_png.write_bytes(b"\x89PNG\r\n\x1a\n" + b"garbage")
    with pytest.raises(CorruptImageError, match="e.png"):
        load_image(broken_png)


def test_ppm_round_trip_is_byte_exact():
    rng = np.random.default_rng(3)
    raw = rng.integers(0, 256, size=5 * 7 * 3, dtype=np.uint8).tobytes()
    data = ppm_bytes(7, 5, raw)
    assert encode_ppm(decode_image(data)) == data


def test_png_round_trip(tmp_path):
    rng = np.random.default_rng(4)
    img = rng.integers(0, 256, size=(6, 9, 3)).astype(np.float64) / 255
    f = tmp_path / "x.png"
    save_image(img, f)
    np.testing.assert_array_equal(load_image(f), img)
    assert encode_png(img) == f.read_bytes()


@pytest.mark.parametrize("value, expected", [(1.2, 1.0), (-0.1, 0.0), (0.42, 0.42)])
def test_to_unit_range(value, expected):
    out = to_unit_range(np.full((2, 2, 3), value))
    assert np.all(out == expected)


def test_to_unit_range_rejects_nan():
    img = np.zeros((2, 2, 3))
    img[1, 1, 2] = np.nan
    with pytest.raises(ValueError):
        to_unit_range(img)


def test_resize_constant():
    img = np.full((5, 3, 3), 0.5)
    np.testing.assert_allclose(resize_bilinear(img, 11, 7), 0.5, atol=1e-15)


def test_resize_same_size_is_identity():
    img = np.random.default_rng(0).random((6, 8, 3))
    np.testing.assert_allclose(resize_bilinear(img, 6, 8), img, atol=1e-6)


def test_resize_checkerboard_matches_scalar_oracle():
    board = np.array([[0.0, 1.0], [1.0, 0.0]])[..., None].repeat(3, axis=2)
    out = resize_bilinear(board, 4, 4)
    np.testing.assert_allclose(out, scalar_bilinear(board, 4, 4), atol=1e-12)
    # frozen from the oracle: source coords clamp to (0, .25, .75, 1)
    np.testing.assert_allclose(out[0, :, 0], [0.0, 0.25, 0.75, 1.0], atol=1e-12)
    np.testing.assert_allclose(out[1, :, 0], [0.25, 0.375, 0.625, 0.75], atol=1e-12)


def test_resize_rejects_tiny_target():
    with pytest.raises(ValueError):
        resize_bilinear(np.zeros((4, 4, 3)), 1, 4)


@settings(max_examples=40, deadline=None)
@given(
    h=st.integers(2, 9), w=st.integers(2, 9), oh=st.integers(2, 12), ow=st.integers(2, 12),
    seed=st.integers(0, 2**16),
)
def test_resize_matches_oracle_and_stays_in_range(h, w, oh, ow, seed):
    img = np.random.default_rng(seed).random((h, w, 3))
    out = resize_bilinear(img, oh, ow)
    np.testing.assert_allclose(out, scalar_bilinear(img, oh, ow), atol=1e-12)
    assert out.min() >= 0.0 and out.max() <= 1.0
