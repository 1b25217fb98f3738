"""Quantized-network container and the three inference regimes.

A QNetwork wraps a NetworkSpec with per-layer parameters for one of three
stages: full-precision float, fake-quantized (weights/activations live on
8-bit grids but arithmetic is real-valued), and integer-deployable (every
tensor is an integer plus a float scale).  Stage transitions only move
forward; see quantize.py for the two conversion steps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from ..nets import LayerKind, NetworkSpec
from ..pose import Pose
from . import kernels


class Stage(Enum):
    FULL_PRECISION = 0
    FAKE_QUANTIZED = 1
    INTEGER_DEPLOYABLE = 2


class Signedness(Enum):
    UNSIGNED_8 = "u8"
    SIGNED_8 = "s8"
    SIGNED_32 = "s32"


_RANGES = {
    Signedness.UNSIGNED_8: (0, 255),
    Signedness.SIGNED_8: (-128, 127),
    Signedness.SIGNED_32: (-(2**31), 2**31 - 1),
}

#: Scale of the uint8 input grid: raw pixel 255 maps to 1.0.
INPUT_SCALE = 1.0 / 255.0


@dataclass(frozen=True)
class QTensor:
    """Integer values plus the float scale mapping them to real magnitudes."""

    values: np.ndarray
    scale: float
    signedness: Signedness = Signedness.UNSIGNED_8

    def __post_init__(self) -> None:
        if not np.issubdtype(self.values.dtype, np.integer):
            raise TypeError("QTensor values must be integers")
        if not (self.scale > 0 and math.isfinite(self.scale)):
            raise ValueError("QTensor scale must be positive and finite")
        lo, hi = _RANGES[self.signedness]
        if self.values.size and (self.values.min() < lo or self.values.max() > hi):
            raise ValueError(f"QTensor values outside {self.signedness.value} range")

    def dequantize(self) -> np.ndarray:
        return self.values.astype(np.float64) * self.scale

    @classmethod
    def from_frame(cls, frame: np.ndarray) -> "QTensor":
        """Wrap an 8-bit grayscale frame (H, W) as a 1xHxW unsigned tensor."""
        if frame.dtype != np.uint8:
            raise TypeError("frame must be uint8")
        return cls(frame.astype(np.int64)[None, :, :], INPUT_SCALE, Signedness.UNSIGNED_8)


@dataclass
class ConvParams:
    weight: np.ndarray  # (CO,CI,KH,KW) conv / (C,KH,KW) depthwise / (O,I) fc
    bias: np.ndarray | None = None


@dataclass
class BNParams:
    gamma: np.ndarray
    beta: np.ndarray
    mean: np.ndarray
    var: np.ndarray


@dataclass
class QuantParams:
    """Per-anchor quantization record (conv/fc/avgpool/add).

    For weight layers ``m``/``shift`` carry one entry per output channel; for
    average pooling a single entry; for residual adds one entry per input
    branch.  ``out_scale`` is None on the network head, which returns raw
    accumulators scaled by ``in_scale * weight_scales`` instead.
    """

    in_scale: float
    out_scale: float | None
    alpha: float | None = None
    weight_scales: np.ndarray | None = None
    bias_int: np.ndarray | None = None
    m: np.ndarray | None = None
    shift: np.ndarray | None = None


@dataclass
class QLayerParams:
    weight: np.ndarray | None  # float grid values (FQ) or int8 (INT)
    quant: QuantParams


@dataclass
class QNetwork:
    spec: NetworkSpec
    stage: Stage
    input_scale: float = INPUT_SCALE
    fp_params: dict[int, ConvParams | BNParams] = field(default_factory=dict)
    q_params: dict[int, QLayerParams] = field(default_factory=dict)
    scales: dict[int, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.stage is Stage.INTEGER_DEPLOYABLE:
            for idx, lp in self.q_params.items():
                if lp.weight is not None and lp.weight.dtype != np.int8:
                    raise TypeError(f"layer {idx}: integer stage holds non-int8 weights")


class UnsupportedGraph(ValueError):
    """Graph shape the quantization pipeline does not handle."""


def anchor_terminals(spec: NetworkSpec) -> dict[int, int]:
    """Map each anchor layer (conv/dw/fc/pool/add) to the end of its
    BatchNorm/ReLU chain; activations are calibrated at the terminal."""
    consumers = spec.consumers()
    terminals: dict[int, int] = {}
    for i, layer in enumerate(spec.layers):
        if layer.kind in (LayerKind.BATCHNORM, LayerKind.RELU):
            continue
        t = i
        while True:
            next_fused = [
                c
                for c in consumers[t]
                if spec.layers[c].kind in (LayerKind.BATCHNORM, LayerKind.RELU)
            ]
            if not next_fused:
                break
            if len(next_fused) > 1:
                raise UnsupportedGraph(
                    f"layer {t} feeds multiple BatchNorm/ReLU consumers"
                )
            t = next_fused[0]
        terminals[i] = t
    return terminals


def _he_scale(fan_in: int) -> float:
    return math.sqrt(2.0 / fan_in)


def random_network(spec: NetworkSpec, seed: int) -> QNetwork:
    """Full-precision network with seeded random weights (no training here;
    weights are exercised by the quantization and equivalence machinery)."""
    rng = np.random.Generator(np.random.PCG64(seed))
    params: dict[int, ConvParams | BNParams] = {}
    for i, layer in enumerate(spec.layers):
        kh, kw = layer.kernel
        if layer.kind is LayerKind.CONV:
            fan_in = kh * kw * layer.in_channels
            w = rng.normal(0.0, _he_scale(fan_in), (layer.out_channels, layer.in_channels, kh, kw))
            params[i] = ConvParams(w)
        elif layer.kind is LayerKind.DWCONV:
            w = rng.normal(0.0, _he_scale(kh * kw), (layer.out_channels, kh, kw))
            params[i] = ConvParams(w)
        elif layer.kind is LayerKind.FC:
            w = rng.normal(0.0, 1.0 / math.sqrt(layer.in_channels), (layer.out_channels, layer.in_channels))
            b = rng.normal(0.0, 0.05, layer.out_channels)
            params[i] = ConvParams(w, b)
        elif layer.kind is LayerKind.BATCHNORM:
            c = layer.out_channels
            params[i] = BNParams(
                gamma=rng.uniform(0.8, 1.2, c),
                beta=rng.normal(0.0, 0.1, c),
                mean=rng.normal(0.0, 0.2, c),
                var=rng.uniform(0.5, 1.5, c),
            )
    return QNetwork(spec=spec, stage=Stage.FULL_PRECISION, fp_params=params)


BN_EPS = 1e-5


def run_fp32(
    net: QNetwork, x: np.ndarray, record: bool = False
) -> tuple[np.ndarray, dict[int, np.ndarray]]:
    """Full-precision forward pass; returns (output, per-layer outputs)."""
    if net.stage is not Stage.FULL_PRECISION:
        raise ValueError("run_fp32 requires a full-precision network")
    spec = net.spec
    if tuple(x.shape) != spec.input_shape:
        raise ValueError(f"input shape {x.shape} != {spec.input_shape}")
    outs: dict[int, np.ndarray] = {}
    x = x.astype(np.float64)
    for i, layer in enumerate(spec.layers):
        ins = [x if p == -1 else outs[p] for p in spec.links[i]]
        a = ins[0]
        if layer.kind is LayerKind.CONV:
            p = net.fp_params[i]
            y = kernels.conv2d(a, p.weight, layer.stride, layer.padding)
            if p.bias is not None:
                y += p.bias[:, None, None]
        elif layer.kind is LayerKind.DWCONV:
            p = net.fp_params[i]
            y = kernels.dwconv2d(a, p.weight, layer.stride, layer.padding)
            if p.bias is not None:
                y += p.bias[:, None, None]
        elif layer.kind is LayerKind.FC:
            p = net.fp_params[i]
            y = kernels.fully_connected(a, p.weight)
            if p.bias is not None:
                y = y + p.bias
        elif layer.kind is LayerKind.BATCHNORM:
            p = net.fp_params[i]
            scale = p.gamma / np.sqrt(p.var + BN_EPS)
            y = (a - p.mean[:, None, None]) * scale[:, None, None] + p.beta[:, None, None]
        elif layer.kind is LayerKind.RELU:
            y = np.maximum(a, 0.0)
        elif layer.kind is LayerKind.MAXPOOL:
            y = kernels.maxpool2d(a, layer.kernel, layer.stride)
        elif layer.kind is LayerKind.AVGPOOL:
            y = kernels.sumpool2d(a, layer.kernel) / float(layer.kernel[0] * layer.kernel[1])
        elif layer.kind is LayerKind.ADD:
            y = ins[0] + ins[1]
        else:  # pragma: no cover
            raise NotImplementedError(layer.kind)
        outs[i] = y
    final = outs[len(spec.layers) - 1]
    return final, outs if record else {}


def _quant_forward(
    net: QNetwork, img: np.ndarray, integer: bool
) -> tuple[np.ndarray, dict[int, np.ndarray]]:
    """Shared walk for the fake-quantized (float) and integer regimes.

    ``img`` holds grid indices: int64 when ``integer`` else integer-valued
    float64.  The two regimes differ only in dtype and requantization kernel;
    for valid in-range accumulators they produce identical grids.
    """
    spec = net.spec
    requant = kernels.requant_int if integer else kernels.requant_float
    outs: dict[int, np.ndarray] = {}
    head = len(spec.layers) - 1
    result: np.ndarray | None = None
    for i, layer in enumerate(spec.layers):
        ins = [img if p == -1 else outs[p] for p in spec.links[i]]
        a = ins[0]
        if layer.kind in (LayerKind.BATCHNORM, LayerKind.RELU):
            # BN is folded into the producing conv; ReLU is absorbed by the
            # unsigned clamp, so both are identities on the integer grid.
            outs[i] = a
            continue
        if layer.kind is LayerKind.MAXPOOL:
            outs[i] = kernels.maxpool2d(a, layer.kernel, layer.stride)
            continue
        lp = net.q_params[i]
        q = lp.quant
        if layer.kind in (LayerKind.CONV, LayerKind.DWCONV, LayerKind.FC):
            w = lp.weight
            if integer:
                w = w.astype(np.int64)
            else:
                # FQ weights are float values on the grid; recover the exact
                # integer grid index for exact integer-valued arithmetic.
                w = kernels.round_half_away(w / _wscale_view(q.weight_scales, w.ndim))
            if layer.kind is LayerKind.CONV:
                acc = kernels.conv2d(a, w, layer.stride, layer.padding)
            elif layer.kind is LayerKind.DWCONV:
                acc = kernels.dwconv2d(a, w, layer.stride, layer.padding)
            else:
                acc = kernels.fully_connected(a, w)
            bias = q.bias_int if integer else q.bias_int.astype(np.float64)
            acc = acc + (bias[:, None, None] if acc.ndim == 3 else bias)
            kernels.check_accumulator(acc, layer.name)
            if q.out_scale is None:
                chan_scales = q.weight_scales * q.in_scale
                result = acc.astype(np.float64) * (
                    chan_scales if acc.ndim == 1 else chan_scales[:, None, None]
                )
                outs[i] = acc
                continue
            m = q.m if acc.ndim == 1 else q.m[:, None, None]
            s = q.shift if acc.ndim == 1 else q.shift[:, None, None]
            outs[i] = requant(acc, m, s)
        elif layer.kind is LayerKind.AVGPOOL:
            acc = kernels.sumpool2d(a, layer.kernel)
            kernels.check_accumulator(acc, layer.name)
            outs[i] = requant(acc, q.m, q.shift)
        elif layer.kind is LayerKind.ADD:
            y = requant(ins[0], q.m[0], q.shift[0]) + requant(ins[1], q.m[1], q.shift[1])
            outs[i] = np.clip(y, 0, 255)
        else:  # pragma: no cover
            raise NotImplementedError(layer.kind)
    if result is None:
        # Head without a raw-accumulator exit: dequantize the final grid.
        result = outs[head].astype(np.float64) * net.scales[head]
    return result, outs


def _wscale_view(ws: np.ndarray, ndim: int) -> np.ndarray:
    if ndim == 4:
        return ws[:, None, None, None]
    if ndim == 3:
        return ws[:, None, None]
    return ws[:, None]


def run_fakequant(net: QNetwork, frame: np.ndarray, record: bool = False):
    """Fake-quantized forward pass on a real-valued input in [0, 1]."""
    if net.stage is not Stage.FAKE_QUANTIZED:
        raise ValueError("run_fakequant requires a fake-quantized network")
    img = np.clip(kernels.round_half_away(frame.astype(np.float64) / net.input_scale), 0.0, 255.0)
    out, rec = _quant_forward(net, img, integer=False)
    return (out, rec) if record else (out, {})


def run_int8(net: QNetwork, q: QTensor, record: bool = False):
    """Integer-deployable forward pass on an unsigned-8 input tensor."""
    if net.stage is not Stage.INTEGER_DEPLOYABLE:
        raise ValueError("run_int8 requires an integer-deployable network")
    if q.signedness is not Signedness.UNSIGNED_8:
        raise ValueError("input must be unsigned 8-bit")
    if not math.isclose(q.scale, net.input_scale, rel_tol=1e-12):
        raise ValueError("input scale does not match the network input grid")
    if tuple(q.values.shape) != net.spec.input_shape:
        raise ValueError(f"input shape {q.values.shape} != {net.spec.input_shape}")
    out, rec = _quant_forward(net, q.values.astype(np.int64), integer=True)
    return (out, rec) if record else (out, {})


def _as_pose(vec: np.ndarray) -> Pose:
    if vec.shape != (4,):
        raise ValueError(f"pose head must emit 4 values, got shape {vec.shape}")
    return Pose(float(vec[0]), float(vec[1]), float(vec[2]), float(vec[3]))


def infer_fp32(net: QNetwork, x: np.ndarray) -> Pose:
    out, _ = run_fp32(net, x)
    return _as_pose(np.asarray(out).ravel())


def infer_int8(net: QNetwork, q: QTensor) -> Pose:
    out, _ = run_int8(net, q)
    return _as_pose(np.asarray(out).ravel())


def infer_fakequant(net: QNetwork, frame: np.ndarray) -> Pose:
    out, _ = run_fakequant(net, frame)
    return _as_pose(np.asarray(out).ravel())
