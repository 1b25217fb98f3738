"""CNN architecture specs, the two network families, and static profiling.

Networks are plain layer graphs (no training machinery).  The two builders
cover the full 17-network comparison set: the 8-weight-layer field network
("frontnet") and 16 reduced MobileNetV2 variants parametrized by expansion
factor t and repetition count n.
"""

from __future__ import annotations

import csv
import functools
import io
import json
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources


class ShapeError(ValueError):
    """A layer graph does not shape-propagate."""


class LayerKind(str, Enum):
    CONV = "Conv2D"
    DWCONV = "DepthwiseConv2D"
    MAXPOOL = "MaxPool2D"
    AVGPOOL = "AvgPool2D"
    FC = "FullyConnected"
    BATCHNORM = "BatchNorm"
    RELU = "ReLU"
    ADD = "Add"


#: Kinds that occupy a compute step on the target (BN/ReLU fuse into the
#: preceding convolution at deployment time).
COMPUTE_KINDS = frozenset(
    {
        LayerKind.CONV,
        LayerKind.DWCONV,
        LayerKind.MAXPOOL,
        LayerKind.AVGPOOL,
        LayerKind.FC,
        LayerKind.ADD,
    }
)

#: Kinds that carry a weight tensor.
WEIGHT_KINDS = frozenset({LayerKind.CONV, LayerKind.DWCONV, LayerKind.FC})

#: Bytes for one per-output-channel constant (bias or folded-BN multiplier).
CONST_BYTES = 4


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: LayerKind
    kernel: tuple[int, int] = (1, 1)
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)
    in_channels: int = 1
    out_channels: int = 1

    def __post_init__(self) -> None:
        if min(self.kernel) < 1 or min(self.stride) < 1:
            raise ValueError(f"{self.name}: kernel and stride must be >= 1")
        if min(self.padding) < 0:
            raise ValueError(f"{self.name}: negative padding")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError(f"{self.name}: channels must be >= 1")
        if self.kind is LayerKind.DWCONV and self.in_channels != self.out_channels:
            raise ValueError(f"{self.name}: depthwise layers keep channel count")


@dataclass(frozen=True)
class NetworkSpec:
    """Ordered layer list plus explicit producer links.

    ``links[i]`` holds the producer indices feeding layer ``i``; index -1
    denotes the network input.  Residual connections appear as Add layers
    with two producers.
    """

    name: str
    input_shape: tuple[int, int, int]
    layers: tuple[LayerSpec, ...]
    links: tuple[tuple[int, ...], ...]

    def __post_init__(self) -> None:
        if len(self.layers) != len(self.links):
            raise ValueError("layers and links length mismatch")
        for i, producers in enumerate(self.links):
            expected = 2 if self.layers[i].kind is LayerKind.ADD else 1
            if len(producers) != expected:
                raise ValueError(f"layer {i} expects {expected} producer(s)")
            for p in producers:
                if not -1 <= p < i:
                    raise ValueError(f"layer {i} has invalid producer {p}")

    def output_shapes(self) -> tuple[tuple[int, int, int], ...]:
        return propagate_shapes(self)

    def consumers(self) -> tuple[tuple[int, ...], ...]:
        """For each layer, the indices of the layers consuming its output."""
        out: list[list[int]] = [[] for _ in self.layers]
        for i, producers in enumerate(self.links):
            for p in producers:
                if p >= 0:
                    out[p].append(i)
        return tuple(tuple(c) for c in out)


def _spatial_out(size: int, kernel: int, stride: int, pad: int, name: str) -> int:
    out = (size + 2 * pad - kernel) // stride + 1
    if out < 1:
        raise ShapeError(f"{name}: spatial size collapses ({size} -> {out})")
    return out


@functools.lru_cache(maxsize=256)
def propagate_shapes(net: NetworkSpec) -> tuple[tuple[int, int, int], ...]:
    """Output shape (C, H, W) of every layer; raises ShapeError on mismatch."""
    shapes: list[tuple[int, int, int]] = []
    for i, layer in enumerate(net.layers):
        ins = [net.input_shape if p == -1 else shapes[p] for p in net.links[i]]
        c, h, w = ins[0]
        if layer.kind is LayerKind.ADD:
            if ins[0] != ins[1]:
                raise ShapeError(f"{layer.name}: residual shapes differ {ins[0]} vs {ins[1]}")
            shapes.append(ins[0])
            continue
        if layer.kind is LayerKind.FC:
            if layer.in_channels != c * h * w:
                raise ShapeError(
                    f"{layer.name}: FC expects {layer.in_channels} inputs, got {c}x{h}x{w}"
                )
            shapes.append((layer.out_channels, 1, 1))
            continue
        if layer.in_channels != c:
            raise ShapeError(f"{layer.name}: expects {layer.in_channels} channels, got {c}")
        if layer.kind in (LayerKind.BATCHNORM, LayerKind.RELU):
            shapes.append((c, h, w))
            continue
        oh = _spatial_out(h, layer.kernel[0], layer.stride[0], layer.padding[0], layer.name)
        ow = _spatial_out(w, layer.kernel[1], layer.stride[1], layer.padding[1], layer.name)
        shapes.append((layer.out_channels, oh, ow))
    return tuple(shapes)


# ---------------------------------------------------------------------------
# Builders
# ---------------------------------------------------------------------------

INPUT_SHAPE = (1, 96, 160)

#: Field-network channel widths.  Not published; fixed so the static profile
#: reproduces both headline aggregates at once (~304k 8-bit weights and
#: ~14.1M MACs per frame).  See README for the reconciliation.
FRONTNET_STEM_CHANNELS = 32
FRONTNET_BLOCK_CHANNELS = (32, 64, 128)


class _GraphBuilder:
    def __init__(self, name: str, input_shape: tuple[int, int, int]):
        self.name = name
        self.input_shape = input_shape
        self.layers: list[LayerSpec] = []
        self.links: list[tuple[int, ...]] = []

    def add(self, layer: LayerSpec, producers: tuple[int, ...] | None = None) -> int:
        if producers is None:
            producers = (len(self.layers) - 1,)
        self.layers.append(layer)
        self.links.append(producers)
        return len(self.layers) - 1

    def conv_bn_relu(
        self,
        name: str,
        cin: int,
        cout: int,
        kernel: tuple[int, int],
        stride: tuple[int, int],
        padding: tuple[int, int],
        kind: LayerKind = LayerKind.CONV,
        relu: bool = True,
        producer: int | None = None,
    ) -> int:
        prods = None if producer is None else (producer,)
        idx = self.add(
            LayerSpec(name, kind, kernel, stride, padding, cin, cout), prods
        )
        idx = self.add(LayerSpec(f"{name}_bn", LayerKind.BATCHNORM, in_channels=cout, out_channels=cout))
        if relu:
            idx = self.add(LayerSpec(f"{name}_relu", LayerKind.RELU, in_channels=cout, out_channels=cout))
        return idx

    def build(self) -> NetworkSpec:
        return NetworkSpec(self.name, self.input_shape, tuple(self.layers), tuple(self.links))


def build_frontnet() -> NetworkSpec:
    """The 8-weight-layer field network: 5x5 stem, 2x2 max-pool, three
    two-conv blocks (first conv of each strided), FC head emitting (x,y,z,phi)."""
    g = _GraphBuilder("frontnet", INPUT_SHAPE)
    g.conv_bn_relu("stem", 1, FRONTNET_STEM_CHANNELS, (5, 5), (2, 2), (2, 2))
    g.add(
        LayerSpec(
            "pool",
            LayerKind.MAXPOOL,
            kernel=(2, 2),
            stride=(2, 2),
            in_channels=FRONTNET_STEM_CHANNELS,
            out_channels=FRONTNET_STEM_CHANNELS,
        )
    )
    cin = FRONTNET_STEM_CHANNELS
    for b, cout in enumerate(FRONTNET_BLOCK_CHANNELS, start=1):
        g.conv_bn_relu(f"block{b}_conv1", cin, cout, (3, 3), (2, 2), (1, 1))
        g.conv_bn_relu(f"block{b}_conv2", cout, cout, (3, 3), (1, 1), (1, 1))
        cin = cout
    g.add(LayerSpec("head", LayerKind.FC, in_channels=cin * 3 * 5, out_channels=4))
    net = g.build()
    net.output_shapes()
    return net


@dataclass(frozen=True)
class MobileNetV2Config:
    t: int
    n: int

    _ALLOWED = frozenset((t, n) for t in (6, 8, 10, 12, 14) for n in (2, 3, 4)) | {(2, 2)}

    def __post_init__(self) -> None:
        if (self.t, self.n) not in self._ALLOWED:
            raise ValueError(f"unsupported MobileNetV2 variant (t={self.t}, n={self.n})")


@functools.lru_cache(maxsize=1)
def _mnv2_layout() -> dict:
    with resources.files("nanoloc.data").joinpath("mnv2_layout.json").open("rb") as f:
        return json.load(f)


def build_mobilenet_v2(cfg: MobileNetV2Config) -> NetworkSpec:
    """Reduced MobileNetV2: conv stem, four inverted-residual blocks (the two
    middle ones repeated n times at expansion t), average pooling, FC head."""
    layout = _mnv2_layout()
    g = _GraphBuilder(f"mnv2-{cfg.t}-{cfg.n}", INPUT_SHAPE)
    cin = layout["stem_channels"]
    g.conv_bn_relu("stem", 1, cin, (3, 3), (2, 2), (1, 1))
    for b, block in enumerate(layout["blocks"], start=1):
        expansion = cfg.t if block["expansion"] == "t" else block["expansion"]
        repeats = cfg.n if block["repeats"] == "n" else block["repeats"]
        cout = block["out_channels"]
        for r in range(repeats):
            c0 = cin if r == 0 else cout
            stride = block["stride"] if r == 0 else 1
            unit_in = len(g.layers) - 1
            hidden = c0 * expansion
            prefix = f"block{b}_u{r + 1}"
            if expansion != 1:
                g.conv_bn_relu(f"{prefix}_expand", c0, hidden, (1, 1), (1, 1), (0, 0))
            g.conv_bn_relu(
                f"{prefix}_dw",
                hidden,
                hidden,
                (3, 3),
                (stride, stride),
                (1, 1),
                kind=LayerKind.DWCONV,
            )
            last = g.conv_bn_relu(f"{prefix}_project", hidden, cout, (1, 1), (1, 1), (0, 0), relu=False)
            if stride == 1 and c0 == cout:
                g.add(
                    LayerSpec(f"{prefix}_add", LayerKind.ADD, in_channels=cout, out_channels=cout),
                    (unit_in, last),
                )
        cin = cout
    shapes = NetworkSpec(g.name, g.input_shape, tuple(g.layers), tuple(g.links)).output_shapes()
    _, fh, fw = shapes[-1]
    g.add(
        LayerSpec(
            "avgpool",
            LayerKind.AVGPOOL,
            kernel=(fh, fw),
            stride=(fh, fw),
            in_channels=cin,
            out_channels=cin,
        )
    )
    g.add(LayerSpec("head", LayerKind.FC, in_channels=cin, out_channels=4))
    net = g.build()
    net.output_shapes()
    return net


def all_variant_configs() -> list[MobileNetV2Config]:
    pairs = sorted(MobileNetV2Config._ALLOWED)
    return [MobileNetV2Config(t, n) for t, n in pairs]


def network_by_name(name: str) -> NetworkSpec:
    """Resolve 'frontnet' or 'mnv2-<t>-<n>' to a built spec."""
    if name == "frontnet":
        return build_frontnet()
    if name.startswith("mnv2-"):
        parts = name.split("-")
        if len(parts) == 3:
            try:
                cfg = MobileNetV2Config(int(parts[1]), int(parts[2]))
            except ValueError as e:
                raise KeyError(str(e)) from e
            return build_mobilenet_v2(cfg)
    raise KeyError(f"unknown network name: {name!r}")


def all_network_names() -> list[str]:
    return ["frontnet"] + [f"mnv2-{c.t}-{c.n}" for c in all_variant_configs()]


# ---------------------------------------------------------------------------
# Static profiling
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LayerProfile:
    name: str
    kind: LayerKind
    out_shape: tuple[int, int, int]
    macs: int
    weight_bytes: int
    activation_bytes: int


@dataclass(frozen=True)
class StaticProfile:
    network: str
    layers: tuple[LayerProfile, ...] = field(repr=False)
    weight_bytes: int = 0
    mac_count: int = 0
    peak_activation_bytes: int = 0

    @property
    def compute_layer_count(self) -> int:
        return sum(1 for lp in self.layers if lp.kind in COMPUTE_KINDS)


def _layer_weight_count(layer: LayerSpec) -> int:
    kh, kw = layer.kernel
    if layer.kind is LayerKind.CONV:
        return kh * kw * layer.in_channels * layer.out_channels
    if layer.kind is LayerKind.DWCONV:
        return kh * kw * layer.out_channels
    if layer.kind is LayerKind.FC:
        return layer.in_channels * layer.out_channels
    return 0


def _layer_macs(layer: LayerSpec, out_shape: tuple[int, int, int]) -> int:
    c, h, w = out_shape
    out_elems = c * h * w
    kh, kw = layer.kernel
    if layer.kind is LayerKind.CONV:
        return out_elems * kh * kw * layer.in_channels
    if layer.kind is LayerKind.DWCONV:
        return out_elems * kh * kw
    if layer.kind is LayerKind.FC:
        return layer.in_channels * layer.out_channels
    return 0


def profile(net: NetworkSpec) -> StaticProfile:
    """Static profile: 8-bit weight bytes (including 4-byte per-channel bias
    and folded-BN constants), MACs per frame, and activation footprints."""
    shapes = net.output_shapes()
    consumers = net.consumers()
    per_layer: list[LayerProfile] = []
    peak = 0
    for i, layer in enumerate(net.layers):
        wbytes = _layer_weight_count(layer)
        if layer.kind in WEIGHT_KINDS:
            wbytes += CONST_BYTES * layer.out_channels  # bias
            followed_by_bn = any(
                net.layers[c].kind is LayerKind.BATCHNORM for c in consumers[i]
            )
            if followed_by_bn:
                wbytes += CONST_BYTES * layer.out_channels  # folded BN multiplier
        out_bytes = shapes[i][0] * shapes[i][1] * shapes[i][2]
        in_bytes = 0
        for p in net.links[i]:
            c, h, w = net.input_shape if p == -1 else shapes[p]
            in_bytes += c * h * w
        peak = max(peak, in_bytes + out_bytes)
        per_layer.append(
            LayerProfile(
                name=layer.name,
                kind=layer.kind,
                out_shape=shapes[i],
                macs=_layer_macs(layer, shapes[i]),
                weight_bytes=wbytes,
                activation_bytes=out_bytes,
            )
        )
    return StaticProfile(
        network=net.name,
        layers=tuple(per_layer),
        weight_bytes=sum(lp.weight_bytes for lp in per_layer),
        mac_count=sum(lp.macs for lp in per_layer),
        peak_activation_bytes=peak,
    )


def enumerate_variants() -> list[tuple[MobileNetV2Config, StaticProfile]]:
    """All 16 MobileNetV2 variants with profiles, ordered by (t, n)."""
    return [(cfg, profile(build_mobilenet_v2(cfg))) for cfg in all_variant_configs()]


# ---------------------------------------------------------------------------
# Export formats
# ---------------------------------------------------------------------------


def profile_to_csv(prof: StaticProfile) -> str:
    """Per-layer CSV (name, kind, out_shape, macs, weight_bytes) plus totals."""
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["name", "kind", "out_shape", "macs", "weight_bytes"])
    for lp in prof.layers:
        shape = "x".join(str(d) for d in lp.out_shape)
        writer.writerow([lp.name, lp.kind.value, shape, lp.macs, lp.weight_bytes])
    writer.writerow(["TOTAL", "", "", prof.mac_count, prof.weight_bytes])
    return buf.getvalue()


def spec_to_text(net: NetworkSpec) -> str:
    """Human-readable spec serialization used for golden-file comparisons."""
    lines = [f"network {net.name}"]
    lines.append("input " + "x".join(str(d) for d in net.input_shape))
    for i, layer in enumerate(net.layers):
        frm = ",".join(str(p) for p in net.links[i])
        lines.append(
            f"layer {i} {layer.name} {layer.kind.value}"
            f" k={layer.kernel[0]}x{layer.kernel[1]}"
            f" s={layer.stride[0]}x{layer.stride[1]}"
            f" p={layer.padding[0]}x{layer.padding[1]}"
            f" in={layer.in_channels} out={layer.out_channels} from={frm}"
        )
    return "\n".join(lines) + "\n"


def spec_from_text(text: str) -> NetworkSpec:
    """Inverse of spec_to_text."""
    name = ""
    input_shape: tuple[int, int, int] | None = None
    layers: list[LayerSpec] = []
    links: list[tuple[int, ...]] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        fields = line.split()
        try:
            if fields[0] == "network":
                name = fields[1]
            elif fields[0] == "input":
                c, h, w = (int(v) for v in fields[1].split("x"))
                input_shape = (c, h, w)
            elif fields[0] == "layer":
                kv = dict(f.split("=", 1) for f in fields[4:])
                kh, kw = (int(v) for v in kv["k"].split("x"))
                sh, sw = (int(v) for v in kv["s"].split("x"))
                ph, pw = (int(v) for v in kv["p"].split("x"))
                layers.append(
                    LayerSpec(
                        name=fields[2],
                        kind=LayerKind(fields[3]),
                        kernel=(kh, kw),
                        stride=(sh, sw),
                        padding=(ph, pw),
                        in_channels=int(kv["in"]),
                        out_channels=int(kv["out"]),
                    )
                )
                links.append(tuple(int(p) for p in kv["from"].split(",")))
            else:
                raise ValueError(f"unknown directive {fields[0]!r}")
        except (KeyError, IndexError, ValueError) as e:
            raise ValueError(f"spec text line {lineno}: {e}") from e
    if input_shape is None:
        raise ValueError("spec text missing input shape")
    return NetworkSpec(name, input_shape, tuple(layers), tuple(links))
