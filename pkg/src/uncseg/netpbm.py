"""Binary PPM (P6) and PGM (P5) reading and writing, 8-bit only."""
from __future__ import annotations

import os

import numpy as np


class NetpbmError(ValueError):
    def __init__(self, path, field, detail):
        super().__init__(f"{path}: bad {field}: {detail}")
        self.path = path
        self.field = field


def _encode(magic: str, arr: np.ndarray) -> bytes:
    h, w = arr.shape[:2]
    return f"{magic}\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(arr, dtype=np.uint8).tobytes()


def write_ppm(path, rgb: np.ndarray) -> None:
    """Write an [H, W, 3] uint8 array."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
        raise ValueError(f"expected uint8 [H, W, 3], got {rgb.dtype} {rgb.shape}")
    with open(path, "wb") as fh:
        fh.write(_encode("P6", rgb))


def write_pgm(path, gray: np.ndarray) -> None:
    """Write an [H, W] uint8 array."""
    gray = np.asarray(gray)
    if gray.ndim != 2 or gray.dtype != np.uint8:
        raise ValueError(f"expected uint8 [H, W], got {gray.dtype} {gray.shape}")
    with open(path, "wb") as fh:
        fh.write(_encode("P5", gray))


def _read(path, magic: str, channels: int) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    pos = 0
    tokens = []
    names = ("magic", "width", "height", "maxval")
    while len(tokens) < 4:
        while pos < len(data) and (data[pos:pos + 1].isspace() or data[pos:pos + 1] == b"#"):
            if data[pos:pos + 1] == b"#":
                end = data.find(b"\n", pos)
                pos = len(data) if end < 0 else end + 1
            else:
                pos += 1
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise NetpbmError(path, names[len(tokens)], "header truncated")
        tokens.append(data[start:pos])
    if tokens[0] != magic.encode():
        raise NetpbmError(path, "magic", f"expected {magic}, found {tokens[0][:8]!r}")
    values = []
    for name, tok in zip(names[1:], tokens[1:]):
        if not tok.isdigit() or int(tok) <= 0:
            raise NetpbmError(path, name, f"not a positive integer: {tok[:16]!r}")
        values.append(int(tok))
    width, height, maxval = values
    if maxval != 255:
        raise NetpbmError(path, "maxval", f"only 255 supported, found {maxval}")
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise NetpbmError(path, "header", "missing whitespace before payload")
    pos += 1
    need = width * height * channels
    payload = data[pos:pos + need]
    if len(payload) < need:
        raise NetpbmError(path, "payload", f"truncated: {len(payload)} of {need} bytes")
    arr = np.frombuffer(payload, dtype=np.uint8)
    return arr.reshape(height, width, channels) if channels > 1 else arr.reshape(height, width)


def read_ppm(path) -> np.ndarray:
    return _read(path, "P6", 3)


def read_pgm(path) -> np.ndarray:
    return _read(path, "P5", 1)


def load_pair(image_path, mask_path):
    """Image as float32 [3, H, W] in [0, 1]; mask binarised at 128 as uint8 [H, W]."""
    rgb = read_ppm(image_path)
    gray = read_pgm(mask_path)
    if rgb.shape[:2] != gray.shape:
        raise NetpbmError(os.fspath(mask_path), "dimensions",
                          f"mask {gray.shape} does not match image {rgb.shape[:2]}")
    image = rgb.transpose(2, 0, 1).astype(np.float32) / np.float32(255)
    return image, (gray >= 128).astype(np.uint8)
