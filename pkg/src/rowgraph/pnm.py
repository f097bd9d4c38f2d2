"""Binary PPM (P6) / PGM (P5) images and raw displacement-field files."""
from __future__ import annotations

import numpy as np

FIELD_MAGIC = "RGVF"


def to_bytes(values: np.ndarray) -> np.ndarray:
    """[0, 1] floats to uint8 with rounding; out-of-range values are clipped."""
    return np.clip(np.rint(np.asarray(values, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_ppm(path, image: np.ndarray) -> None:
    """Write a [3, H, W] float image in [0, 1] (or uint8) as P6."""
    img = image if image.dtype == np.uint8 else to_bytes(image)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"PPM needs a [3, H, W] image, got {img.shape}")
    _, h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img.transpose(1, 2, 0)).tobytes())


def write_pgm(path, gray: np.ndarray) -> None:
    """Write a [H, W] map in [0, 1] (value x 255, rounded) as P5."""
    img = gray if gray.dtype == np.uint8 else to_bytes(gray)
    if img.ndim != 2:
        raise ValueError(f"PGM needs a [H, W] map, got {img.shape}")
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img).tobytes())


def _read_header(buf: bytes):
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated PNM header")
        tokens.append(buf[start:pos])
    # exactly one whitespace byte separates the header from the raster
    return tokens, pos + 1


def read_pnm(path) -> np.ndarray:
    """Read P5/P6 (8-bit) into uint8 [H, W] or [3, H, W]."""
    with open(path, "rb") as fh:
        buf = fh.read()
    (magic, w, h, maxval), pos = _read_header(buf)
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval != 255:
        raise ValueError(f"only 8-bit PNM is supported (maxval {maxval})")
    if magic == b"P6":
        data = np.frombuffer(buf, dtype=np.uint8, count=3 * w * h, offset=pos)
        return data.reshape(h, w, 3).transpose(2, 0, 1).copy()
    if magic == b"P5":
        return np.frombuffer(buf, dtype=np.uint8, count=w * h, offset=pos).reshape(h, w).copy()
    raise ValueError(f"unsupported PNM magic {magic!r}")


def read_ppm(path) -> np.ndarray:
    """RGB image as float64 [3, H, W] in [0, 1]."""
    img = read_pnm(path)
    if img.ndim != 3:
        raise ValueError(f"{path} is not an RGB (P6) image")
    return img.astype(np.float64) / 255.0


def write_field(path, field: np.ndarray) -> None:
    """[2, H, W] vectors: text header "RGVF H W", then float32 LE x plane and y plane."""
    field = np.asarray(field)
    if field.ndim != 3 or field.shape[0] != 2:
        raise ValueError(f"displacement field must be [2, H, W], got {field.shape}")
    _, h, w = field.shape
    with open(path, "wb") as fh:
        fh.write(f"{FIELD_MAGIC} {h} {w}\n".encode("ascii"))
        fh.write(np.ascontiguousarray(field, dtype="<f4").tobytes())


def read_field(path) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    nl = buf.index(b"\n")
    magic, h, w = buf[:nl].decode("ascii").split()
    if magic != FIELD_MAGIC:
        raise ValueError(f"{path}: not an RGVF file")
    h, w = int(h), int(w)
    return np.frombuffer(buf, dtype="<f4", count=2 * h * w, offset=nl + 1).reshape(2, h, w).copy()


def draw_dot(img: np.ndarray, x: float, y: float, color, radius: int = 1) -> None:
    """Paint a filled square dot on a uint8 [3, H, W] image."""
    _, h, w = img.shape
    xi, yi = int(round(x)), int(round(y))
    y0, y1 = max(yi - radius, 0), min(yi + radius + 1, h)
    x0, x1 = max(xi - radius, 0), min(xi + radius + 1, w)
    if y0 < y1 and x0 < x1:
        img[:, y0:y1, x0:x1] = np.asarray(color, dtype=np.uint8)[:, None, None]
