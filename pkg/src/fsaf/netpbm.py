"""Binary PGM (P5) and PPM (P6) reading and writing, 8-bit only."""
from pathlib import Path

import numpy as np


def _write(path, magic: bytes, array: np.ndarray) -> None:
    h, w = array.shape[:2]
    with open(path, "wb") as f:
        f.write(b"%s\n%d %d\n255\n" % (magic, w, h))
        f.write(np.ascontiguousarray(array, dtype=np.uint8).tobytes())


def write_pgm(path, array) -> None:
    array = np.asarray(array)
    if array.ndim != 2:
        raise ValueError(f"PGM needs a 2-D array, got shape {array.shape}")
    _write(path, b"P5", array)


def write_ppm(path, array) -> None:
    """Write an (H, W, 3) uint8 array."""
    array = np.asarray(array)
    if array.ndim != 3 or array.shape[2] != 3:
        raise ValueError(f"PPM needs an (H, W, 3) array, got shape {array.shape}")
    _write(path, b"P6", array)


def _tokens(data: bytes, count: int):
    """Return ``count`` header tokens and the offset of the pixel payload."""
    tokens, pos = [], 0
    while len(tokens) < count:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while data[pos:pos + 1] not in (b"\n", b""):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    return tokens, pos + 1


def read_netpbm(path) -> np.ndarray:
    """Read a P5 or P6 file into a (H, W) or (H, W, 3) uint8 array."""
    data = Path(path).read_bytes()
    (magic, w, h, maxval), offset = _tokens(data, 4)
    if magic not in (b"P5", b"P6") or int(maxval) != 255:
        raise ValueError(f"{path}: unsupported netpbm header {magic!r} maxval={maxval!r}")
    w, h = int(w), int(h)
    channels = 3 if magic == b"P6" else 1
    pixels = np.frombuffer(data, dtype=np.uint8, count=w * h * channels, offset=offset)
    return pixels.reshape((h, w, 3) if channels == 3 else (h, w)).copy()
