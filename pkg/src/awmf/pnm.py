"""Binary PGM (P5) and PPM (P6) reading and writing, 8-bit only."""

from __future__ import annotations

import os

import numpy as np

from .exceptions import ImageExtentError, ImageHeaderError, ImageTruncatedError

MAX_EXTENT = 1 << 20
MAX_PIXELS = 1 << 31


def _header_tokens(data: bytes):
    """Yield (token, end_offset) for the four header fields, skipping comments."""
    pos = 0
    n = len(data)
    for _ in range(4):
        while pos < n:
            ch = data[pos:pos + 1]
            if ch == b"#":
                while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                    pos += 1
            elif ch.isspace():
                pos += 1
            else:
                break
        start = pos
        while pos < n and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ImageHeaderError("malformed header: missing field")
        yield data[start:pos], pos


def decode(data: bytes) -> np.ndarray:
    """Decode P5/P6 bytes to a uint8 array of shape (H, W) or (H, W, 3)."""
    tokens = list(_header_tokens(data))
    magic = tokens[0][0]
    if magic not in (b"P5", b"P6"):
        raise ImageHeaderError(f"malformed header: unsupported magic {magic!r}")
    try:
        width, height, maxval = (int(t) for t, _ in tokens[1:])
    except ValueError as exc:
        raise ImageHeaderError(f"malformed header: {exc}") from exc
    if width <= 0 or height <= 0:
        raise ImageHeaderError(f"malformed header: extents {width}x{height}")
    if width > MAX_EXTENT or height > MAX_EXTENT or width * height > MAX_PIXELS:
        raise ImageExtentError(f"image extents {width}x{height} exceed the supported maximum")
    if not 0 < maxval <= 255:
        raise ImageHeaderError(f"malformed header: maxval {maxval} (only 8-bit images are supported)")
    end = tokens[3][1]
    if end >= len(data) or not data[end:end + 1].isspace():
        raise ImageTruncatedError("unexpected end of pixel data")
    channels = 3 if magic == b"P6" else 1
    count = width * height * channels
    payload = data[end + 1:end + 1 + count]
    if len(payload) < count:
        raise ImageTruncatedError("unexpected end of pixel data")
    arr = np.frombuffer(payload, dtype=np.uint8).copy()
    return arr.reshape((height, width, 3) if channels == 3 else (height, width))


def encode(image: np.ndarray) -> bytes:
    image = np.asarray(image)
    if image.dtype != np.uint8:
        raise ValueError(f"expected a uint8 raster, got dtype {image.dtype}")
    if image.ndim == 2:
        magic = b"P5"
    elif image.ndim == 3 and image.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"expected (H, W) or (H, W, 3) raster, got shape {image.shape}")
    h, w = image.shape[:2]
    return magic + f"\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(image).tobytes()


def load_image(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode(fh.read())


def save_image(path, image: np.ndarray) -> None:
    data = encode(image)
    with open(path, "wb") as fh:
        fh.write(data)


def load_labels(path) -> np.ndarray:
    labels = load_image(path)
    if labels.ndim != 2:
        raise ImageHeaderError(f"label map {os.fspath(path)!r} must be a PGM (P5) file")
    return labels


def save_labels(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ValueError(f"label map must be 2-D, got shape {labels.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) > 255:
        raise ValueError("label values must fit in 8 bits")
    save_image(path, labels.astype(np.uint8))
