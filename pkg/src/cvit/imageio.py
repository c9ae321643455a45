"""Binary PPM (P6) images and their conversion to network input."""
from __future__ import annotations

import numpy as np

from .errors import ImageError

# Per-channel normalisation applied to [0, 1] RGB values.
MEAN = np.array([0.485, 0.456, 0.406])
STD = np.array([0.229, 0.224, 0.225])


def _header_tokens(buf):
    """Yield (token, end_offset) for the four header fields, skipping comments."""
    pos, n = 0, len(buf)
    found = 0
    while found < 4:
        while pos < n and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < n and buf[pos:pos + 1] == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ImageError("PPM header ended early")
        found += 1
        yield buf[start:pos], pos


def parse_ppm(buf):
    """Decode P6 bytes into a (H, W, 3) uint8 or uint16 array."""
    tokens = []
    end = 0
    for tok, end in _header_tokens(buf):
        tokens.append(tok)
    if tokens[0] != b"P6":
        raise ImageError(f"not a binary PPM: magic {tokens[0][:8]!r}")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise ImageError("PPM header has non-integer fields") from None
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise ImageError(f"bad PPM dimensions {width}x{height} or maxval {maxval}")
    # exactly one whitespace byte separates header from raster
    data = buf[end + 1:]
    dt = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = width * height * 3 * dt.itemsize
    if len(data) < need:
        raise ImageError(f"PPM raster truncated: {len(data)} of {need} bytes")
    img = np.frombuffer(data[:need], dtype=dt).reshape(height, width, 3)
    return img, maxval


def read_ppm(path):
    try:
        with open(path, "rb") as f:
            buf = f.read()
    except OSError as e:
        raise ImageError(f"cannot read image {path}: {e.strerror}") from None
    return parse_ppm(buf)


def write_ppm(path, img):
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise ImageError("write_ppm expects an (H, W, 3) uint8 array")
    h, w, _ = img.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii") + img.tobytes())


def center_crop_resize(img, size):
    """Largest centred square crop, then nearest-neighbour resize to ``size``."""
    h, w = img.shape[:2]
    side = min(h, w)
    top, left = (h - side) // 2, (w - side) // 2
    crop = img[top:top + side, left:left + side]
    idx = (np.arange(size) * side) // size
    return crop[idx][:, idx]


def to_input(img, maxval, size):
    """(H, W, 3) raster to a normalised float32 (3, size, size) array."""
    x = center_crop_resize(img, size).astype(np.float64) / maxval
    x = (x - MEAN) / STD
    return np.ascontiguousarray(x.transpose(2, 0, 1), dtype=np.float32)


def load_image(path, size):
    img, maxval = read_ppm(path)
    return to_input(img, maxval, size)
