"""Memory-hierarchy tiling and double-buffered throughput modeling.

Each compute layer is tiled over (output channels, output rows) so that the
double-buffered working set -- input tile with halo, output tile, weight
slice, times two -- fits L1.  BatchNorm/ReLU fuse into the producing
convolution and get no tiles of their own.  The throughput model charges
mac_count / macs_per_cycle plus a fixed per-layer overhead on the cluster
clock and overlaps acquisition+crop on the controller clock, so the frame
rate is the slower of the two sides.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

from .nets import (
    COMPUTE_KINDS,
    CONST_BYTES,
    LayerKind,
    LayerSpec,
    NetworkSpec,
    StaticProfile,
)


class UnplannableLayer(ValueError):
    pass


@dataclass(frozen=True)
class MemoryConfig:
    l1_bytes: int = 65536
    l2_bytes: int = 524288
    dram_bytes: int = 8388608
    dma_bytes_per_cycle: float = 8.0

    def __post_init__(self) -> None:
        if not (0 < self.l1_bytes < self.l2_bytes < self.dram_bytes):
            raise ValueError("memory sizes must satisfy 0 < l1 < l2 < dram")
        if self.dma_bytes_per_cycle <= 0:
            raise ValueError("dma bandwidth must be positive")


@dataclass(frozen=True)
class TileStep:
    oc_start: int
    oc_count: int
    row_start: int
    row_count: int
    in_row_start: int
    in_row_count: int
    bytes_in: int
    bytes_w: int
    bytes_out: int


@dataclass(frozen=True)
class LayerPlan:
    layer_index: int
    name: str
    kind: LayerKind
    out_shape: tuple[int, int, int]
    tile_out_channels: int
    tile_out_rows: int
    in_tile_shape: tuple[int, int, int]
    weight_slice_bytes: int
    n_tiles: int
    steps: tuple[TileStep, ...] = field(repr=False)


@dataclass(frozen=True)
class TilingPlan:
    network: str
    memory: MemoryConfig
    weight_residency: str  # "l2" or "dram"
    total_weight_bytes: int
    layers: tuple[LayerPlan, ...]


def _per_channel_weight_bytes(layer: LayerSpec, followed_by_bn: bool) -> int:
    kh, kw = layer.kernel
    if layer.kind is LayerKind.CONV:
        w = kh * kw * layer.in_channels
    elif layer.kind is LayerKind.DWCONV:
        w = kh * kw
    elif layer.kind is LayerKind.FC:
        w = layer.in_channels
    else:
        return 0
    return w + CONST_BYTES * (2 if followed_by_bn else 1)


def _input_rows_for(
    layer: LayerSpec, row_start: int, row_count: int, in_h: int
) -> tuple[int, int]:
    """Input row window (with halo, clipped at the padded edges) needed to
    produce output rows [row_start, row_start + row_count)."""
    if layer.kind in (LayerKind.ADD, LayerKind.BATCHNORM, LayerKind.RELU):
        return row_start, row_count
    if layer.kind is LayerKind.FC:
        return 0, in_h
    kh = layer.kernel[0]
    sh = layer.stride[0]
    ph = layer.padding[0]
    lo = max(row_start * sh - ph, 0)
    hi = min((row_start + row_count - 1) * sh - ph + kh, in_h)
    return lo, hi - lo


def _tile_channels_in(layer: LayerSpec, oc_count: int) -> int:
    """Input channels a tile of oc_count output channels must load."""
    if layer.kind is LayerKind.CONV:
        return layer.in_channels
    if layer.kind is LayerKind.FC:
        return 0  # handled as a flat vector
    return oc_count  # depthwise, pools, add keep a 1:1 channel mapping


def plan_tiling(net: NetworkSpec, mem: MemoryConfig) -> TilingPlan:
    """Largest-fit greedy tiling, searching output channels before rows."""
    shapes = net.output_shapes()
    consumers = net.consumers()
    budget = mem.l1_bytes // 2  # double buffering halves the usable space
    plans: list[LayerPlan] = []

    for i, layer in enumerate(net.layers):
        if layer.kind not in COMPUTE_KINDS:
            continue
        co, ho, wo = shapes[i]
        p = net.links[i][0]
        ci_full, in_h, in_w = net.input_shape if p == -1 else shapes[p]
        followed_by_bn = any(net.layers[c].kind is LayerKind.BATCHNORM for c in consumers[i])
        wpc = _per_channel_weight_bytes(layer, followed_by_bn)

        if layer.kind is LayerKind.FC:
            flat_in = ci_full * in_h * in_w

            def fc_footprint(oc: int) -> int:
                return flat_in + oc * wpc + oc

            oc = next((c for c in range(co, 0, -1) if fc_footprint(c) <= budget), 0)
            if oc == 0:
                raise UnplannableLayer(
                    f"{layer.name}: minimal working set {fc_footprint(1)} B "
                    f"exceeds {budget} B of double-buffered L1"
                )
            steps = []
            for oc_start in range(0, co, oc):
                n = min(oc, co - oc_start)
                steps.append(
                    TileStep(oc_start, n, 0, 1, 0, in_h, flat_in, n * wpc, n)
                )
            plans.append(
                LayerPlan(i, layer.name, layer.kind, (co, ho, wo), oc, 1,
                          (ci_full, in_h, in_w), oc * wpc, len(steps), tuple(steps))
            )
            continue

        n_inputs = 2 if layer.kind is LayerKind.ADD else 1
        kh, sh = layer.kernel[0], layer.stride[0]

        def footprint(oc: int, rows: int) -> int:
            # worst-case halo: interior tiles see the full unclipped window
            in_rows = min((rows - 1) * sh + kh, in_h)
            bytes_in = _tile_channels_in(layer, oc) * in_rows * in_w * n_inputs
            return bytes_in + oc * rows * wo + oc * wpc

        oc = next((c for c in range(co, 0, -1) if footprint(c, 1) <= budget), 0)
        if oc == 0:
            raise UnplannableLayer(
                f"{layer.name}: minimal working set {footprint(1, 1)} B "
                f"exceeds {budget} B of double-buffered L1"
            )
        rows = next(r for r in range(ho, 0, -1) if footprint(oc, r) <= budget)

        steps = []
        for oc_start in range(0, co, oc):
            noc = min(oc, co - oc_start)
            for row_start in range(0, ho, rows):
                nrows = min(rows, ho - row_start)
                in_lo, in_rows = _input_rows_for(layer, row_start, nrows, in_h)
                bytes_in = _tile_channels_in(layer, noc) * in_rows * in_w * n_inputs
                steps.append(
                    TileStep(
                        oc_start, noc, row_start, nrows, in_lo, in_rows,
                        bytes_in, noc * wpc, noc * nrows * wo,
                    )
                )
        in_rows_full = min((rows - 1) * sh + kh, in_h)
        plans.append(
            LayerPlan(
                i, layer.name, layer.kind, (co, ho, wo), oc, rows,
                (_tile_channels_in(layer, oc), in_rows_full, in_w),
                oc * wpc, len(steps), tuple(steps),
            )
        )

    total_w = sum(
        _per_channel_weight_bytes(
            net.layers[lp.layer_index],
            any(net.layers[c].kind is LayerKind.BATCHNORM for c in consumers[lp.layer_index]),
        )
        * shapes[lp.layer_index][0]
        for lp in plans
    )
    residency = "l2" if total_w <= mem.l2_bytes else "dram"
    return TilingPlan(net.name, mem, residency, total_w, tuple(plans))


# ---------------------------------------------------------------------------
# Independent plan validation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CheckResult:
    layer: str
    check: str
    passed: bool
    detail: str = ""


@dataclass(frozen=True)
class ValidationReport:
    checks: tuple[CheckResult, ...]

    @property
    def ok(self) -> bool:
        return all(c.passed for c in self.checks)

    def failures(self) -> list[CheckResult]:
        return [c for c in self.checks if not c.passed]


def validate_plan(plan: TilingPlan, net: NetworkSpec, mem: MemoryConfig) -> ValidationReport:
    """Recompute every footprint and coverage property from first principles."""
    shapes = net.output_shapes()
    consumers = net.consumers()
    checks: list[CheckResult] = []
    for lp in plan.layers:
        layer = net.layers[lp.layer_index]
        co, ho, wo = shapes[lp.layer_index]
        p = net.links[lp.layer_index][0]
        ci_full, in_h, in_w = net.input_shape if p == -1 else shapes[p]
        followed_by_bn = any(
            net.layers[c].kind is LayerKind.BATCHNORM for c in consumers[lp.layer_index]
        )
        wpc = _per_channel_weight_bytes(layer, followed_by_bn)
        n_inputs = 2 if layer.kind is LayerKind.ADD else 1

        covered = [[0] * ho for _ in range(co)]
        fit_ok, halo_ok, bytes_ok = True, True, True
        fit_detail = halo_detail = bytes_detail = ""
        for st in lp.steps:
            for c in range(st.oc_start, st.oc_start + st.oc_count):
                for r in range(st.row_start, st.row_start + st.row_count):
                    if 0 <= c < co and 0 <= r < ho:
                        covered[c][r] += 1
            if layer.kind is LayerKind.FC:
                want_in = ci_full * in_h * in_w
                want_lo, want_rows = 0, in_h
                want_out = st.oc_count
            else:
                want_lo, want_rows = _input_rows_for(layer, st.row_start, st.row_count, in_h)
                want_in = _tile_channels_in(layer, st.oc_count) * want_rows * in_w * n_inputs
                want_out = st.oc_count * st.row_count * wo
            if (st.in_row_start, st.in_row_count) != (want_lo, want_rows):
                halo_ok = False
                halo_detail = (
                    f"step rows [{st.row_start},+{st.row_count}) needs input "
                    f"[{want_lo},+{want_rows}), plan says [{st.in_row_start},+{st.in_row_count})"
                )
            want_w = st.oc_count * wpc
            if (st.bytes_in, st.bytes_w, st.bytes_out) != (want_in, want_w, want_out):
                bytes_ok = False
                bytes_detail = (
                    f"claimed ({st.bytes_in},{st.bytes_w},{st.bytes_out}) B, "
                    f"recomputed ({want_in},{want_w},{want_out}) B"
                )
            if 2 * (want_in + want_w + want_out) > mem.l1_bytes:
                fit_ok = False
                fit_detail = (
                    f"double-buffered working set {2 * (want_in + want_w + want_out)} B "
                    f"> L1 {mem.l1_bytes} B"
                )
        holes = sum(1 for col in covered for v in col if v == 0)
        overlaps = sum(1 for col in covered for v in col if v > 1)
        checks.append(
            CheckResult(lp.name, "coverage", holes == 0 and overlaps == 0,
                        f"{holes} uncovered, {overlaps} overlapped cells" if holes or overlaps else "")
        )
        checks.append(CheckResult(lp.name, "footprint", fit_ok, fit_detail))
        checks.append(CheckResult(lp.name, "halo", halo_ok, halo_detail))
        checks.append(CheckResult(lp.name, "bytes", bytes_ok, bytes_detail))

    want_total = sum(
        _per_channel_weight_bytes(
            net.layers[lp.layer_index],
            any(net.layers[c].kind is LayerKind.BATCHNORM for c in consumers[lp.layer_index]),
        )
        * shapes[lp.layer_index][0]
        for lp in plan.layers
    )
    residency_ok = (
        plan.total_weight_bytes == want_total
        and plan.weight_residency == ("l2" if want_total <= mem.l2_bytes else "dram")
    )
    checks.append(
        CheckResult("(network)", "residency", residency_ok,
                    "" if residency_ok else f"expected {want_total} B in "
                    f"{'l2' if want_total <= mem.l2_bytes else 'dram'}")
    )
    planned = {lp.layer_index for lp in plan.layers}
    missing = [
        net.layers[i].name
        for i in range(len(net.layers))
        if net.layers[i].kind in COMPUTE_KINDS and i not in planned
    ]
    checks.append(
        CheckResult("(network)", "completeness", not missing,
                    f"unplanned layers: {', '.join(missing)}" if missing else "")
    )
    return ValidationReport(tuple(checks))


def plan_to_text(plan: TilingPlan) -> str:
    lines = [
        f"network {plan.network}",
        f"memory l1={plan.memory.l1_bytes} l2={plan.memory.l2_bytes} dram={plan.memory.dram_bytes}",
        f"weights {plan.total_weight_bytes} B resident in {plan.weight_residency}",
    ]
    for lp in plan.layers:
        lines.append(
            f"layer {lp.layer_index} {lp.name} {lp.kind.value}"
            f" out={lp.out_shape[0]}x{lp.out_shape[1]}x{lp.out_shape[2]}"
            f" tile={lp.tile_out_channels}chx{lp.tile_out_rows}rows"
            f" in_tile={lp.in_tile_shape[0]}x{lp.in_tile_shape[1]}x{lp.in_tile_shape[2]}"
            f" wslice={lp.weight_slice_bytes}B tiles={lp.n_tiles}"
        )
        for st in lp.steps:
            lines.append(
                f"  tile oc[{st.oc_start}+{st.oc_count}] rows[{st.row_start}+{st.row_count}]"
                f" in_rows[{st.in_row_start}+{st.in_row_count}]"
                f" bytes={st.bytes_in}/{st.bytes_w}/{st.bytes_out}"
            )
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Operative points and the throughput model
# ---------------------------------------------------------------------------

#: Cycles charged per compute layer on top of mac_count / macs_per_cycle.
#: Fitted once against the max-performance operative point (48.3 fps at
#: CL 175 MHz) and frozen.
OVERHEAD_CYCLES_PER_LAYER = 9830

#: Image acquisition + crop cost on the controller clock (~0.6 Mcycles).
ACQUISITION_CYCLES = 600_000

MACS_PER_CYCLE = 4.0


@dataclass(frozen=True)
class OperativePoint:
    name: str
    vdd: float
    fc_mhz: float
    cl_mhz: float
    reference_power_mw: float


def operative_points() -> list[OperativePoint]:
    """The three measured voltage/frequency configurations; power numbers are
    stored reference constants, never computed."""
    return [
        OperativePoint("min_power", 1.0, 25.0, 25.0, 9.9),
        OperativePoint("most_efficient", 1.0, 25.0, 75.0, 25.1),
        OperativePoint("max_performance", 1.2, 250.0, 175.0, 95.4),
    ]


@dataclass(frozen=True)
class PipelineTiming:
    inference_cycles: float
    acquisition_crop_cycles: float
    frame_rate_fps: float
    bottleneck: str


def estimate_throughput(
    profile: StaticProfile,
    op: OperativePoint,
    macs_per_cycle: float = MACS_PER_CYCLE,
) -> PipelineTiming:
    """Double-buffered pipeline rate: inference on the cluster overlaps
    acquisition+crop on the controller; the slower side wins."""
    if macs_per_cycle <= 0:
        raise ValueError("macs_per_cycle must be positive")
    inference_cycles = (
        profile.mac_count / macs_per_cycle
        + profile.compute_layer_count * OVERHEAD_CYCLES_PER_LAYER
    )
    inference_rate = op.cl_mhz * 1e6 / inference_cycles
    acquisition_rate = op.fc_mhz * 1e6 / ACQUISITION_CYCLES
    if inference_rate <= acquisition_rate:
        return PipelineTiming(inference_cycles, ACQUISITION_CYCLES, inference_rate, "inference")
    return PipelineTiming(inference_cycles, ACQUISITION_CYCLES, acquisition_rate, "acquisition")


def comparison_csv(rows: list[tuple[str, StaticProfile]]) -> str:
    """Architecture-comparison table: one row per network at 170 MHz."""
    op = OperativePoint("comparison", 1.2, 250.0, 170.0, math.nan)
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["name", "weight_bytes", "mac_count", "est_fps_170mhz", "r2"])
    for name, prof in rows:
        fps = estimate_throughput(prof, op).frame_rate_fps
        writer.writerow([name, prof.weight_bytes, prof.mac_count, f"{fps:.2f}", ""])
    return buf.getvalue()


def operative_points_csv(profile: StaticProfile) -> str:
    """Throughput/power table over the three operative points."""
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["point", "vdd_v", "fc_mhz", "cl_mhz", "frame_rate_fps", "power_mw"])
    for op in operative_points():
        timing = estimate_throughput(profile, op)
        writer.writerow(
            [op.name, op.vdd, f"{op.fc_mhz:g}", f"{op.cl_mhz:g}",
             f"{timing.frame_rate_fps:.1f}", op.reference_power_mw]
        )
    return buf.getvalue()
