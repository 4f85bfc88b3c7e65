"""Image planes: decoding, encoding, resizing and range handling.

An image is a float64 ``numpy`` array of shape ``(H, W, 3)`` in r, g, b order.
Pixel values are used as stored (no sRGB linearization).
"""
from __future__ import annotations

import io
import os
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

PNG_MAGIC = b"\x89PNG\r\n\x1a\n"


class ImageError(ValueError):
    """Base class for image decoding problems."""


class ImageNotFoundError(ImageError, FileNotFoundError):
    pass


class UnsupportedFormatError(ImageError):
    pass


class CorruptImageError(ImageError):
    pass


def as_planes(arr, *, min_size: int = 2) -> np.ndarray:
    """Validate and return ``arr`` as a float64 (H, W, 3) array."""
    a = np.asarray(arr, dtype=np.float64)
    if a.ndim != 3 or a.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) array, got shape {a.shape}")
    if a.shape[0] < min_size or a.shape[1] < min_size:
        raise ValueError(f"image must be at least {min_size}x{min_size}, got {a.shape[:2]}")
    return a


def to_unit_range(img: np.ndarray) -> np.ndarray:
    a = np.asarray(img, dtype=np.float64)
    if np.isnan(a).any():
        raise ValueError("image contains NaN")
    return np.clip(a, 0.0, 1.0)


# --- decoding ---------------------------------------------------------------

def _parse_ppm(data: bytes, path: str) -> np.ndarray:
    # header: P6 <ws> width <ws> height <ws> maxval <single ws> raster; '#' comments allowed
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(data) and (data[pos : pos + 1].isspace() or data[pos : pos + 1] == b"#"):
            if data[pos : pos + 1] == b"#":
                end = data.find(b"\n", pos)
                if end < 0:
                    raise CorruptImageError(f"{path}: unterminated comment in PPM header")
                pos = end + 1
            else:
                pos += 1
        start = pos
        while pos < len(data) and data[pos : pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise CorruptImageError(f"{path}: malformed PPM header")
        fields.append(int(data[start:pos]))
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise CorruptImageError(f"{path}: malformed PPM header")
    pos += 1
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise CorruptImageError(f"{path}: invalid PPM dimensions {width}x{height}")
    if maxval != 255:
        raise UnsupportedFormatError(f"{path}: only maxval 255 PPM is supported (got {maxval})")
    n = width * height * 3
    raster = data[pos : pos + n]
    if len(raster) != n:
        raise CorruptImageError(f"{path}: PPM raster truncated ({len(raster)} of {n} bytes)")
    return np.frombuffer(raster, dtype=np.uint8).reshape(height, width, 3)


def _parse_png(data: bytes, path: str) -> np.ndarray:
    try:
        with Image.open(io.BytesIO(data)) as im:
            im.load()
            return np.asarray(im.convert("RGB"), dtype=np.uint8)
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise CorruptImageError(f"{path}: cannot decode PNG ({exc})") from exc


def decode_image(data: bytes, path: str = "<bytes>") -> np.ndarray:
    if data.startswith(PNG_MAGIC):
        u8 = _parse_png(data, path)
    elif data.startswith(b"P6"):
        u8 = _parse_ppm(data, path)
    else:
        raise UnsupportedFormatError(f"{path}: not a PNG or binary PPM (P6) file")
    return u8.astype(np.float64) / 255.0


def load_image(path: str | os.PathLike) -> np.ndarray:
    """Decode a PNG or P6 PPM file to planes in [0, 1] (byte value / 255)."""
    p = Path(path)
    if not p.is_file():
        raise ImageNotFoundError(f"{p}: no such file")
    return decode_image(p.read_bytes(), str(p))


# --- encoding ---------------------------------------------------------------

def to_bytes_u8(img: np.ndarray) -> np.ndarray:
    a = to_unit_range(img)
    return np.rint(a * 255.0).astype(np.uint8)


def encode_ppm(img: np.ndarray) -> bytes:
    u8 = to_bytes_u8(as_planes(img, min_size=1))
    h, w, _ = u8.shape
    return b"P6\n%d %d\n255\n" % (w, h) + u8.tobytes()


def encode_png(img: np.ndarray) -> bytes:
    u8 = to_bytes_u8(as_planes(img, min_size=1))
    buf = io.BytesIO()
    Image.fromarray(u8, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def save_image(img: np.ndarray, path: str | os.PathLike) -> None:
    p = Path(path)
    suffix = p.suffix.lower()
    if suffix == ".png":
        data = encode_png(img)
    elif suffix in (".ppm", ".pnm"):
        data = encode_ppm(img)
    else:
        raise UnsupportedFormatError(f"{p}: can only write .png or .ppm")
    p.write_bytes(data)


# --- resizing ---------------------------------------------------------------

def _source_coords(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # half-pixel centers: src = (dst + 0.5) * n_in / n_out - 0.5, clamped to the edge pixels
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.intp)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize using the half-pixel-center convention."""
    if out_h < 2 or out_w < 2:
        raise ValueError(f"target size must be at least 2x2, got {out_h}x{out_w}")
    a = np.asarray(img, dtype=np.float64)
    if a.ndim != 3:
        raise ValueError(f"expected an (H, W, C) array, got shape {a.shape}")
    y0, y1, fy = _source_coords(a.shape[0], out_h)
    x0, x1, fx = _source_coords(a.shape[1], out_w)
    fy = fy[:, None, None]
    fx = fx[None, :, None]
    top = a[y0][:, x0] * (1 - fx) + a[y0][:, x1] * fx
    bottom = a[y1][:, x0] * (1 - fx) + a[y1][:, x1] * fx
    return top * (1 - fy) + bottom * fy
