"""Binary portable pixmap/graymap io, box drawing, and bilinear resize.

Images move through the package as float tensors in [0, 1]: color as
[3, H, W], grayscale masks as [H, W]. Files are 8-bit P6/P5 with maxval 255;
writing quantizes by round(value * 255).
"""
from __future__ import annotations

import numpy as np

from .errors import DataFormatError, UsageError
from .tensor import DTYPE


def _read_header(data: bytes, path, magic: bytes, fields: int) -> tuple[list[int], int]:
    """Parse a netpbm header: magic, `fields` decimal tokens, one whitespace
    byte, then raw data. Comments (# to end of line) may appear between
    tokens. Returns (field values, data offset)."""
    if data[:2] != magic:
        raise DataFormatError(f"{path}: expected {magic.decode()} image, got magic {data[:2]!r}")
    pos = 2
    values = []
    while len(values) < fields:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos] == ord("#"):
            while pos < len(data) and data[pos] != ord("\n"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and data[pos:pos + 1].isdigit():
            pos += 1
        if pos == start:
            raise DataFormatError(f"{path}: malformed header near byte {pos}")
        values.append(int(data[start:pos]))
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise DataFormatError(f"{path}: missing whitespace after header")
    return values, pos + 1


def read_ppm(path) -> np.ndarray:
    """8-bit P6 file -> float32 [3, H, W] scaled to [0, 1]."""
    with open(path, "rb") as fh:
        data = fh.read()
    (width, height, maxval), off = _read_header(data, path, b"P6", 3)
    if maxval != 255:
        raise DataFormatError(f"{path}: only 8-bit images supported, maxval={maxval}")
    need = width * height * 3
    raw = data[off:off + need]
    if len(raw) < need:
        raise DataFormatError(f"{path}: truncated pixel data ({len(raw)} of {need} bytes)")
    pixels = np.frombuffer(raw, dtype=np.uint8).reshape(height, width, 3)
    return (pixels.astype(DTYPE) / 255.0).transpose(2, 0, 1)


def write_ppm(path, image: np.ndarray) -> None:
    if image.ndim != 3 or image.shape[0] != 3:
        raise UsageError(f"expected [3, H, W] image, got shape {image.shape}")
    quant = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    _, h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(quant.transpose(1, 2, 0).tobytes())


def read_pgm(path) -> np.ndarray:
    """8-bit P5 file -> float32 [H, W] scaled to [0, 1]."""
    with open(path, "rb") as fh:
        data = fh.read()
    (width, height, maxval), off = _read_header(data, path, b"P5", 3)
    if maxval != 255:
        raise DataFormatError(f"{path}: only 8-bit images supported, maxval={maxval}")
    need = width * height
    raw = data[off:off + need]
    if len(raw) < need:
        raise DataFormatError(f"{path}: truncated pixel data ({len(raw)} of {need} bytes)")
    return np.frombuffer(raw, dtype=np.uint8).reshape(height, width).astype(DTYPE) / 255.0


def write_pgm(path, gray: np.ndarray) -> None:
    if gray.ndim != 2:
        raise UsageError(f"expected [H, W] grayscale, got shape {gray.shape}")
    quant = np.round(np.clip(gray, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = gray.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(quant.tobytes())


def draw_box(image: np.ndarray, bbox, color) -> None:
    """1-pixel rectangle outline, drawn in place."""
    top, left, height, width = bbox
    bottom, right = top + height - 1, left + width - 1
    c = np.asarray(color, dtype=image.dtype)[:, None]
    image[:, top, left:right + 1] = c
    image[:, bottom, left:right + 1] = c
    image[:, top:bottom + 1, left] = c
    image[:, top:bottom + 1, right] = c


def layer_band(layer: int, layer_range: tuple[int, int]) -> int:
    """0, 1, or 2: which third of the layer range a layer falls into."""
    lo, hi = layer_range
    span = hi - lo + 1
    return min((layer - lo) * 3 // span, 2)


_BAND_COLORS = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))  # red, green, blue


def annotate_patches(image: np.ndarray, patches, layer_range: tuple[int, int]) -> np.ndarray:
    """Copy of the image with each patch bbox outlined; shallow layers draw
    red, the middle band green, deep layers blue."""
    out = image.copy()
    for patch in patches:
        color = _BAND_COLORS[layer_band(patch.neuron.layer, layer_range)]
        draw_box(out, patch.bbox, color)
    return out


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Channelwise bilinear resize with half-pixel-center sampling.

    Works for any input size >= 1x1; a constant image resizes to the same
    constant. Returns float32 [C, out_h, out_w].
    """
    if image.ndim != 3:
        raise UsageError(f"expected [C, H, W] image, got shape {image.shape}")
    if out_h < 1 or out_w < 1:
        raise UsageError(f"target size must be positive, got {out_h}x{out_w}")
    c, h, w = image.shape
    src = image.astype(np.float64)

    def axis_coords(n_in: int, n_out: int):
        centers = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        centers = np.clip(centers, 0.0, n_in - 1.0)
        lo = np.floor(centers).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        frac = centers - lo
        return lo, hi, frac

    ylo, yhi, yf = axis_coords(h, out_h)
    xlo, xhi, xf = axis_coords(w, out_w)
    top = src[:, ylo][:, :, xlo] * (1 - xf) + src[:, ylo][:, :, xhi] * xf
    bot = src[:, yhi][:, :, xlo] * (1 - xf) + src[:, yhi][:, :, xhi] * xf
    out = top * (1 - yf[None, :, None]) + bot * yf[None, :, None]
    return out.astype(DTYPE)
