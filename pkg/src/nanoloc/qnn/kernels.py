"""Dtype-generic layer kernels plus the two requantization implementations.

Convolutions accumulate with per-offset tensordot; integer inputs stay in
int64 end to end so a 32-bit overflow can be asserted rather than wrapped.
The float requantizer multiplies by the dyadic factor m * 2**-shift, the
integer requantizer uses multiply/shift with round-half-away-from-zero; for
in-range accumulators both are exact and must agree bit for bit.
"""

from __future__ import annotations

import numpy as np

ACC_LIMIT = 2**31  # deployable accumulators are int32


class AccumulatorOverflow(ArithmeticError):
    pass


def pad2d(x: np.ndarray, padding: tuple[int, int]) -> np.ndarray:
    ph, pw = padding
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (ph, ph), (pw, pw)))


def _out_size(size: int, k: int, s: int, p: int) -> int:
    return (size + 2 * p - k) // s + 1


def conv2d(
    x: np.ndarray,
    w: np.ndarray,
    stride: tuple[int, int] = (1, 1),
    padding: tuple[int, int] = (0, 0),
) -> np.ndarray:
    """Standard convolution; x (CI,H,W), w (CO,CI,KH,KW) -> (CO,HO,WO)."""
    co, ci, kh, kw = w.shape
    assert x.shape[0] == ci, (x.shape, w.shape)
    sh, sw = stride
    ho = _out_size(x.shape[1], kh, sh, padding[0])
    wo = _out_size(x.shape[2], kw, sw, padding[1])
    xp = pad2d(x, padding)
    acc = np.zeros((co, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            window = xp[:, i : i + ho * sh : sh, j : j + wo * sw : sw]
            acc += np.tensordot(w[:, :, i, j], window, axes=([1], [0]))
    return acc


def dwconv2d(
    x: np.ndarray,
    w: np.ndarray,
    stride: tuple[int, int] = (1, 1),
    padding: tuple[int, int] = (0, 0),
) -> np.ndarray:
    """Depthwise convolution; x (C,H,W), w (C,KH,KW) -> (C,HO,WO)."""
    c, kh, kw = w.shape
    assert x.shape[0] == c
    sh, sw = stride
    ho = _out_size(x.shape[1], kh, sh, padding[0])
    wo = _out_size(x.shape[2], kw, sw, padding[1])
    xp = pad2d(x, padding)
    acc = np.zeros((c, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            window = xp[:, i : i + ho * sh : sh, j : j + wo * sw : sw]
            acc += w[:, i : i + 1, j : j + 1] * window
    return acc


def fully_connected(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """x any shape (raveled C-order), w (O, I) -> (O,)."""
    return w @ x.ravel()


def maxpool2d(x: np.ndarray, kernel: tuple[int, int], stride: tuple[int, int]) -> np.ndarray:
    kh, kw = kernel
    sh, sw = stride
    ho = _out_size(x.shape[1], kh, sh, 0)
    wo = _out_size(x.shape[2], kw, sw, 0)
    out = None
    for i in range(kh):
        for j in range(kw):
            window = x[:, i : i + ho * sh : sh, j : j + wo * sw : sw]
            out = window.copy() if out is None else np.maximum(out, window)
    return out


def sumpool2d(x: np.ndarray, kernel: tuple[int, int]) -> np.ndarray:
    """Window sum with stride == kernel (average pooling before rescale)."""
    kh, kw = kernel
    ho = x.shape[1] // kh
    wo = x.shape[2] // kw
    trimmed = x[:, : ho * kh, : wo * kw]
    return trimmed.reshape(x.shape[0], ho, kh, wo, kw).sum(axis=(2, 4))


def check_accumulator(acc: np.ndarray, where: str) -> None:
    if acc.size and int(np.abs(acc).max()) >= ACC_LIMIT:
        raise AccumulatorOverflow(f"{where}: accumulator exceeds int32 range")


def round_half_away(x: np.ndarray) -> np.ndarray:
    """Round to nearest, ties away from zero (np.round would round to even)."""
    return np.copysign(np.floor(np.abs(x) + 0.5), x)


def requant_int(acc: np.ndarray, m: np.ndarray, shift: np.ndarray) -> np.ndarray:
    """(acc * m) >> shift with round-half-away, clamped to the uint8 grid."""
    prod = acc * m
    half = np.where(shift > 0, np.int64(1) << np.maximum(shift - 1, 0), np.int64(0))
    mag = (np.abs(prod) + half) >> shift
    return np.clip(np.sign(prod) * mag, 0, 255)


def requant_float(acc: np.ndarray, m: np.ndarray, shift: np.ndarray) -> np.ndarray:
    """Real-arithmetic mirror of requant_int over integer-valued float arrays."""
    scaled = acc * (m.astype(np.float64) * np.ldexp(1.0, -shift.astype(np.int32)))
    return np.clip(round_half_away(scaled), 0.0, 255.0)
