"""The two stage transitions: full precision -> fake quantized -> integer.

Fake quantization folds batch norms, picks per-layer activation clipping
bounds from a calibration set (99.9th-percentile rule), quantizes weights on
per-output-channel symmetric grids, and fixes the dyadic requantization
factors m * 2**-shift.  Making the dyadic factor part of the fake-quantized
semantics is what lets the integer stage match it exactly at every layer
boundary instead of merely approximately.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..nets import LayerKind
from . import kernels
from .network import (
    BNParams,
    QLayerParams,
    QNetwork,
    QuantParams,
    Stage,
    UnsupportedGraph,
    anchor_terminals,
)

PERCENTILE = 99.9

#: Multipliers are kept below 2**17 so that acc * m stays well inside the
#: 53-bit float64 mantissa; this is what guarantees the fake-quantized and
#: integer regimes agree exactly rather than to within rounding.
MAX_MULTIPLIER = 1 << 17
REL_TOL = 2.0**-15


class CalibrationError(ValueError):
    pass


class RequantError(ArithmeticError):
    pass


def dyadic_approx(ratio: float) -> tuple[int, int]:
    """Smallest (m, shift) with m/2**shift within 2**-15 relative of ratio."""
    if not (ratio > 0 and math.isfinite(ratio)):
        raise RequantError(f"requant ratio must be positive, got {ratio}")
    _, exp = math.frexp(ratio)  # ratio = f * 2**exp, f in [0.5, 1)
    shift = 16 - exp
    if shift < 0:
        raise RequantError(f"requant ratio {ratio} too large for a 17-bit multiplier")
    m = round(ratio * (1 << shift))
    if m >= MAX_MULTIPLIER:
        m >>= 1
        shift -= 1
    if shift < 0 or m < 1 or abs(m / (1 << shift) - ratio) / ratio >= REL_TOL:
        raise RequantError(f"cannot approximate ratio {ratio} within 2**-15")
    while m % 2 == 0 and shift > 0:  # canonical form: odd multiplier
        m >>= 1
        shift -= 1
    return m, shift


def _dyadic_arrays(ratios: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pairs = [dyadic_approx(float(r)) for r in np.atleast_1d(ratios)]
    m = np.array([p[0] for p in pairs], dtype=np.int64)
    s = np.array([p[1] for p in pairs], dtype=np.int64)
    return m, s


@dataclass
class _Folded:
    weight: np.ndarray
    bias: np.ndarray


def fold_batchnorm(net: QNetwork) -> dict[int, _Folded]:
    """Fold BN affine transforms into the producing weight layer."""
    spec = net.spec
    consumers = spec.consumers()
    folded: dict[int, _Folded] = {}
    for i, layer in enumerate(spec.layers):
        if layer.kind not in (LayerKind.CONV, LayerKind.DWCONV, LayerKind.FC):
            continue
        p = net.fp_params[i]
        w = p.weight.copy()
        b = np.zeros(layer.out_channels) if p.bias is None else p.bias.astype(np.float64).copy()
        bn_idx = [c for c in consumers[i] if spec.layers[c].kind is LayerKind.BATCHNORM]
        if len(bn_idx) > 1:
            raise UnsupportedGraph(f"layer {i} feeds multiple BatchNorms")
        if bn_idx:
            bn: BNParams = net.fp_params[bn_idx[0]]
            k = bn.gamma / np.sqrt(bn.var + 1e-5)
            w = w * (k[:, None, None, None] if w.ndim == 4 else k[:, None, None] if w.ndim == 3 else k[:, None])
            b = (b - bn.mean) * k + bn.beta
        folded[i] = _Folded(w, b)
    return folded


def _folded_forward(
    net: QNetwork, folded: dict[int, _Folded], x: np.ndarray
) -> dict[int, np.ndarray]:
    """fp32 forward with BN already folded; used only for calibration."""
    spec = net.spec
    outs: dict[int, np.ndarray] = {}
    for i, layer in enumerate(spec.layers):
        ins = [x if p == -1 else outs[p] for p in spec.links[i]]
        a = ins[0]
        if layer.kind is LayerKind.CONV:
            y = kernels.conv2d(a, folded[i].weight, layer.stride, layer.padding)
            y += folded[i].bias[:, None, None]
        elif layer.kind is LayerKind.DWCONV:
            y = kernels.dwconv2d(a, folded[i].weight, layer.stride, layer.padding)
            y += folded[i].bias[:, None, None]
        elif layer.kind is LayerKind.FC:
            y = kernels.fully_connected(a, folded[i].weight) + folded[i].bias
        elif layer.kind is LayerKind.BATCHNORM:
            y = a  # folded upstream
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
    return outs


def calibrate_alphas(
    net: QNetwork,
    folded: dict[int, _Folded],
    calibration: list[np.ndarray],
    percentile: float = PERCENTILE,
    skip: frozenset[int] = frozenset(),
) -> dict[int, float]:
    """Per-anchor clipping bound alpha from calibration activation maxima."""
    if not calibration:
        raise CalibrationError("calibration set is empty")
    terminals = {a: t for a, t in anchor_terminals(net.spec).items() if a not in skip}
    pooled: dict[int, list[np.ndarray]] = {a: [] for a in terminals}
    for frame in calibration:
        if tuple(frame.shape) != net.spec.input_shape:
            raise CalibrationError(f"calibration frame shape {frame.shape} mismatch")
        outs = _folded_forward(net, folded, frame.astype(np.float64))
        for anchor, term in terminals.items():
            pooled[anchor].append(np.maximum(outs[term], 0.0).ravel())
    alphas: dict[int, float] = {}
    for anchor, chunks in pooled.items():
        alpha = float(np.percentile(np.concatenate(chunks), percentile))
        if alpha <= 0.0:
            name = net.spec.layers[anchor].name
            raise CalibrationError(f"layer {name}: all calibration activations are zero")
        alphas[anchor] = alpha
    return alphas


def _weight_scales(w: np.ndarray) -> np.ndarray:
    flat = np.abs(w.reshape(w.shape[0], -1)).max(axis=1)
    return np.where(flat > 0, flat, 1.0) / 127.0


def fake_quantize(net: QNetwork, calibration: list[np.ndarray]) -> QNetwork:
    """FullPrecision -> FakeQuantized: grids and requant factors are fixed
    here; arithmetic stays real-valued."""
    if net.stage is not Stage.FULL_PRECISION:
        raise ValueError("fake_quantize expects a full-precision network")
    spec = net.spec
    folded = fold_batchnorm(net)
    head = len(spec.layers) - 1
    raw_head = spec.layers[head].kind in (LayerKind.CONV, LayerKind.DWCONV, LayerKind.FC)
    alphas = calibrate_alphas(
        net, folded, calibration, skip=frozenset({head} if raw_head else ())
    )

    q_params: dict[int, QLayerParams] = {}
    scales: dict[int, float] = {}

    def in_scale_of(idx: int) -> float:
        p = spec.links[idx][0]
        return net.input_scale if p == -1 else scales[p]

    for i, layer in enumerate(spec.layers):
        if layer.kind in (LayerKind.BATCHNORM, LayerKind.RELU):
            scales[i] = scales[spec.links[i][0]]
            continue
        if layer.kind is LayerKind.MAXPOOL:
            scales[i] = in_scale_of(i)
            continue
        if layer.kind in (LayerKind.CONV, LayerKind.DWCONV, LayerKind.FC):
            s_in = in_scale_of(i)
            w = folded[i].weight
            ws = _weight_scales(w)
            w_grid = (
                kernels.round_half_away(w / _bc(ws, w.ndim)).clip(-128, 127) * _bc(ws, w.ndim)
            )
            bias_scale = s_in * ws
            bias_int = kernels.round_half_away(folded[i].bias / bias_scale)
            if np.abs(bias_int).max() >= 2**31:
                raise RequantError(f"{layer.name}: folded bias exceeds int32")
            is_head = i == head  # raw-accumulator exit: no trailing layers
            if is_head:
                out_scale = None
                m = s = None
            else:
                out_scale = alphas[i] / 255.0
                m, s = _dyadic_arrays(s_in * ws / out_scale)
            q_params[i] = QLayerParams(
                weight=w_grid,
                quant=QuantParams(
                    in_scale=s_in,
                    out_scale=out_scale,
                    alpha=None if is_head else alphas[i],
                    weight_scales=ws,
                    bias_int=bias_int.astype(np.int64),
                    m=m,
                    shift=s,
                ),
            )
            scales[i] = out_scale if out_scale is not None else float("nan")
            continue
        if layer.kind is LayerKind.AVGPOOL:
            s_in = in_scale_of(i)
            out_scale = alphas[i] / 255.0
            n = layer.kernel[0] * layer.kernel[1]
            m, s = _dyadic_arrays(np.array([s_in / (n * out_scale)]))
            q_params[i] = QLayerParams(
                weight=None,
                quant=QuantParams(in_scale=s_in, out_scale=out_scale, alpha=alphas[i], m=m, shift=s),
            )
            scales[i] = out_scale
            continue
        if layer.kind is LayerKind.ADD:
            pa, pb = spec.links[i]
            s_a = net.input_scale if pa == -1 else scales[pa]
            s_b = net.input_scale if pb == -1 else scales[pb]
            out_scale = alphas[i] / 255.0
            m, s = _dyadic_arrays(np.array([s_a / out_scale, s_b / out_scale]))
            q_params[i] = QLayerParams(
                weight=None,
                quant=QuantParams(in_scale=s_a, out_scale=out_scale, alpha=alphas[i], m=m, shift=s),
            )
            scales[i] = out_scale
            continue
        raise NotImplementedError(layer.kind)  # pragma: no cover

    return QNetwork(
        spec=spec,
        stage=Stage.FAKE_QUANTIZED,
        input_scale=net.input_scale,
        q_params=q_params,
        scales=scales,
    )


def _bc(ws: np.ndarray, ndim: int) -> np.ndarray:
    if ndim == 4:
        return ws[:, None, None, None]
    if ndim == 3:
        return ws[:, None, None]
    return ws[:, None]


def integerize(net: QNetwork) -> QNetwork:
    """FakeQuantized -> IntegerDeployable: weights become signed 8-bit; the
    requant factors fixed at fake quantization are validated and carried over."""
    if net.stage is not Stage.FAKE_QUANTIZED:
        raise ValueError("integerize expects a fake-quantized network")
    q_params: dict[int, QLayerParams] = {}
    for i, lp in net.q_params.items():
        q = lp.quant
        if q.m is not None:
            ratio_ok = True
            if q.weight_scales is not None:
                ratios = q.in_scale * q.weight_scales / q.out_scale
                ratio_ok = bool(
                    np.all(np.abs(q.m / (2.0**q.shift) - ratios) / ratios < REL_TOL)
                )
            if not ratio_ok:
                raise RequantError(f"layer {i}: requant factors violate the 2**-15 bound")
        weight = lp.weight
        if weight is not None:
            ints = kernels.round_half_away(weight / _bc(q.weight_scales, weight.ndim))
            if np.abs(ints).max() > 127:
                raise RequantError(f"layer {i}: weight grid exceeds int8 range")
            weight = ints.astype(np.int8)
        q_params[i] = QLayerParams(weight=weight, quant=q)
    return QNetwork(
        spec=net.spec,
        stage=Stage.INTEGER_DEPLOYABLE,
        input_scale=net.input_scale,
        q_params=q_params,
        scales=dict(net.scales),
    )


def quantize_pipeline(net: QNetwork, calibration: list[np.ndarray]) -> tuple[QNetwork, QNetwork]:
    """Convenience wrapper returning (fake-quantized, integer-deployable)."""
    fq = fake_quantize(net, calibration)
    return fq, integerize(fq)
