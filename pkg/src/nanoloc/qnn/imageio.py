"""Raw 8-bit grayscale PGM (P5) input/output and the inference crop."""

from __future__ import annotations

from pathlib import Path

import numpy as np

CROP_HEIGHT = 96
FULL_SIZE = 160
CROP_TOP = (FULL_SIZE - CROP_HEIGHT) // 2


def crop_input(frame: np.ndarray) -> np.ndarray:
    """Vertically centered 96-row window of a 160x160 frame."""
    if frame.shape != (FULL_SIZE, FULL_SIZE):
        raise ValueError(f"expected {FULL_SIZE}x{FULL_SIZE} frame, got {frame.shape}")
    return frame[CROP_TOP : CROP_TOP + CROP_HEIGHT, :]


def write_pgm(path: str | Path, frame: np.ndarray) -> None:
    if frame.dtype != np.uint8 or frame.ndim != 2:
        raise ValueError("PGM output requires a 2-D uint8 array")
    h, w = frame.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(frame.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    pos = 0

    def token() -> bytes:
        nonlocal pos
        while pos < len(data):
            if data[pos : pos + 1].isspace():
                pos += 1
            elif data[pos : pos + 1] == b"#":
                while pos < len(data) and data[pos : pos + 1] != b"\n":
                    pos += 1
            else:
                break
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated PGM header at byte {start}")
        return data[start:pos]

    if token() != b"P5":
        raise ValueError(f"{path}: not a binary PGM (P5) file")
    w = int(token())
    h = int(token())
    maxval = int(token())
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 supported, got {maxval}")
    pos += 1  # single whitespace after maxval
    raster = data[pos : pos + w * h]
    if len(raster) != w * h:
        raise ValueError(f"{path}: raster truncated at byte {pos + len(raster)}")
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w).copy()
