"""Binary weight container with a versioned header and text manifest.

Layout (little-endian): magic 'NLQW', version u32, stage u8, network-spec
text (u32 length + UTF-8), input scale f64, record count u32, then one
record per tensor: layer index u32, role u8, dtype u8, ndim u8, dims u32[],
raw bytes.  Round-trips are bit-exact.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

from ..nets import spec_from_text, spec_to_text
from .network import BNParams, ConvParams, QLayerParams, QNetwork, QuantParams, Stage

MAGIC = b"NLQW"
VERSION = 1

_ROLE_NAMES = [
    "weight",
    "bias",
    "bn_gamma",
    "bn_beta",
    "bn_mean",
    "bn_var",
    "weight_scales",
    "bias_int",
    "m",
    "shift",
    "out_scale",
    "alpha",
    "in_scale",
]
_ROLE = {name: i for i, name in enumerate(_ROLE_NAMES)}

_DTYPES = [np.dtype("<f8"), np.dtype("i1"), np.dtype("<i4"), np.dtype("<i8")]
_DTYPE_CODE = {d: i for i, d in enumerate(_DTYPES)}


class WeightFormatError(ValueError):
    pass


def _records_of(net: QNetwork) -> list[tuple[int, str, np.ndarray]]:
    recs: list[tuple[int, str, np.ndarray]] = []
    if net.stage is Stage.FULL_PRECISION:
        for idx in sorted(net.fp_params):
            p = net.fp_params[idx]
            if isinstance(p, ConvParams):
                recs.append((idx, "weight", p.weight))
                if p.bias is not None:
                    recs.append((idx, "bias", p.bias))
            else:
                recs.append((idx, "bn_gamma", p.gamma))
                recs.append((idx, "bn_beta", p.beta))
                recs.append((idx, "bn_mean", p.mean))
                recs.append((idx, "bn_var", p.var))
        return recs
    for idx in sorted(net.q_params):
        lp = net.q_params[idx]
        q = lp.quant
        if lp.weight is not None:
            recs.append((idx, "weight", lp.weight))
        recs.append((idx, "in_scale", np.float64(q.in_scale)))
        if q.out_scale is not None:
            recs.append((idx, "out_scale", np.float64(q.out_scale)))
        if q.alpha is not None:
            recs.append((idx, "alpha", np.float64(q.alpha)))
        if q.weight_scales is not None:
            recs.append((idx, "weight_scales", q.weight_scales))
        if q.bias_int is not None:
            recs.append((idx, "bias_int", q.bias_int))
        if q.m is not None:
            recs.append((idx, "m", q.m))
            recs.append((idx, "shift", q.shift))
    return recs


def save_network(net: QNetwork, path: str | Path) -> None:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<IB", VERSION, net.stage.value))
    spec_text = spec_to_text(net.spec).encode("utf-8")
    buf.write(struct.pack("<I", len(spec_text)))
    buf.write(spec_text)
    buf.write(struct.pack("<d", net.input_scale))
    recs = _records_of(net)
    buf.write(struct.pack("<I", len(recs)))
    for idx, role, arr in recs:
        arr = np.asarray(arr)
        canonical = _DTYPES[_DTYPE_CODE[_canonical_dtype(arr.dtype)]]
        data = arr.astype(canonical, order="C")
        buf.write(struct.pack("<IBBB", idx, _ROLE[role], _DTYPE_CODE[canonical], data.ndim))
        for d in data.shape:
            buf.write(struct.pack("<I", d))
        buf.write(data.tobytes())
    Path(path).write_bytes(buf.getvalue())


def _canonical_dtype(dt: np.dtype) -> np.dtype:
    if dt == np.int8:
        return np.dtype("i1")
    if np.issubdtype(dt, np.floating):
        return np.dtype("<f8")
    if dt == np.int32:
        return np.dtype("<i4")
    if np.issubdtype(dt, np.integer):
        return np.dtype("<i8")
    raise WeightFormatError(f"unsupported dtype {dt}")


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise WeightFormatError(f"truncated container at byte {self.pos}")
        vals = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return vals if len(vals) > 1 else vals[0]

    def take_bytes(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise WeightFormatError(f"truncated container at byte {self.pos}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out


def load_network(path: str | Path) -> QNetwork:
    r = _Reader(Path(path).read_bytes())
    if r.take_bytes(4) != MAGIC:
        raise WeightFormatError(f"{path}: bad magic at byte 0")
    version, stage_code = r.take("<IB")
    if version != VERSION:
        raise WeightFormatError(f"{path}: unsupported version {version} at byte 4")
    spec_len = r.take("<I")
    spec = spec_from_text(r.take_bytes(spec_len).decode("utf-8"))
    input_scale = r.take("<d")
    n_records = r.take("<I")
    per_layer: dict[int, dict[str, np.ndarray]] = {}
    for _ in range(n_records):
        idx, role_code, dtype_code, ndim = r.take("<IBBB")
        if role_code >= len(_ROLE_NAMES) or dtype_code >= len(_DTYPES):
            raise WeightFormatError(f"{path}: bad record tag at byte {r.pos - 7}")
        dims = tuple(r.take("<I") for _ in range(ndim))
        dtype = _DTYPES[dtype_code]
        count = int(np.prod(dims, dtype=np.int64)) if dims else 1
        raw = r.take_bytes(count * dtype.itemsize)
        arr = np.frombuffer(raw, dtype=dtype).reshape(dims).copy()
        per_layer.setdefault(idx, {})[_ROLE_NAMES[role_code]] = arr
    if r.pos != len(r.data):
        raise WeightFormatError(f"{path}: {len(r.data) - r.pos} trailing bytes at {r.pos}")

    stage = Stage(stage_code)
    net = QNetwork(spec=spec, stage=stage, input_scale=float(input_scale))
    if stage is Stage.FULL_PRECISION:
        for idx, roles in per_layer.items():
            if "weight" in roles:
                net.fp_params[idx] = ConvParams(roles["weight"], roles.get("bias"))
            else:
                net.fp_params[idx] = BNParams(
                    roles["bn_gamma"], roles["bn_beta"], roles["bn_mean"], roles["bn_var"]
                )
        return net
    for idx, roles in per_layer.items():
        out_scale = roles.get("out_scale")
        alpha = roles.get("alpha")
        weight = roles.get("weight")
        if weight is not None and stage is Stage.FAKE_QUANTIZED:
            weight = weight.astype(np.float64)
        net.q_params[idx] = QLayerParams(
            weight=weight,
            quant=QuantParams(
                in_scale=float(roles["in_scale"]),
                out_scale=None if out_scale is None else float(out_scale),
                alpha=None if alpha is None else float(alpha),
                weight_scales=roles.get("weight_scales"),
                bias_int=roles.get("bias_int"),
                m=roles.get("m"),
                shift=roles.get("shift"),
            ),
        )
    _rebuild_scales(net)
    return net


def _rebuild_scales(net: QNetwork) -> None:
    from ..nets import LayerKind

    spec = net.spec
    for i, layer in enumerate(spec.layers):
        p = spec.links[i][0]
        upstream = net.input_scale if p == -1 else net.scales[p]
        if i in net.q_params and net.q_params[i].quant.out_scale is not None:
            net.scales[i] = net.q_params[i].quant.out_scale
        elif layer.kind in (LayerKind.BATCHNORM, LayerKind.RELU, LayerKind.MAXPOOL):
            net.scales[i] = upstream
        else:
            net.scales[i] = float("nan")


def manifest_text(net: QNetwork) -> str:
    """Human-readable companion listing for a saved container."""
    lines = [f"stage {net.stage.name}", f"input_scale {net.input_scale!r}"]
    for idx, role, arr in _records_of(net):
        arr = np.asarray(arr)
        shape = "x".join(str(d) for d in arr.shape) if arr.ndim else "scalar"
        name = net.spec.layers[idx].name
        lines.append(
            f"layer={idx} name={name} role={role} dtype={arr.dtype.name} "
            f"shape={shape} bytes={arr.nbytes}"
        )
    return "\n".join(lines) + "\n"
