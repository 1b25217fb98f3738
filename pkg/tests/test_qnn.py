import json
import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nanoloc import nets, qnn
from nanoloc.nets import LayerKind, LayerSpec, NetworkSpec
from nanoloc.qnn.network import QLayerParams, QuantParams
from randnets import random_frames, random_small_spec

GOLDEN = Path(__file__).parent / "golden"


# ---------------------------------------------------------------------------
# Brute-force oracle: six nested loops, nothing shared with the kernels.
# ---------------------------------------------------------------------------


def loopnest_conv(x, w, stride, padding):
    co, ci, kh, kw = w.shape
    sh, sw = stride
    ph, pw = padding
    h, ww_ = x.shape[1], x.shape[2]
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (ww_ + 2 * pw - kw) // sw + 1
    out = np.zeros((co, ho, wo))
    for o in range(co):
        for i in range(ho):
            for j in range(wo):
                acc = 0.0
                for c in range(ci):
                    for a in range(kh):
                        for b in range(kw):
                            hi = i * sh + a - ph
                            wi = j * sw + b - pw
                            if 0 <= hi < h and 0 <= wi < ww_:
                                acc += x[c, hi, wi] * w[o, c, a, b]
                out[o, i, j] = acc
    return out


def test_conv_matches_loopnest_exactly_on_integer_grids():
    rng = np.random.Generator(np.random.PCG64(7))
    for _ in range(8):
        ci, co = int(rng.integers(1, 4)), int(rng.integers(1, 5))
        k = int(rng.choice([1, 3]))
        s = int(rng.choice([1, 2]))
        p = k // 2
        x = rng.integers(-8, 9, size=(ci, 5, 6)).astype(np.float64)
        w = rng.integers(-8, 9, size=(co, ci, k, k)).astype(np.float64)
        from nanoloc.qnn import kernels

        got = kernels.conv2d(x, w, (s, s), (p, p))
        want = loopnest_conv(x, w, (s, s), (p, p))
        assert np.array_equal(got, want)


def test_conv_matches_loopnest_on_random_floats():
    from nanoloc.qnn import kernels

    rng = np.random.Generator(np.random.PCG64(8))
    x = rng.normal(size=(3, 7, 5))
    w = rng.normal(size=(4, 3, 3, 3))
    got = kernels.conv2d(x, w, (1, 1), (1, 1))
    want = loopnest_conv(x, w, (1, 1), (1, 1))
    assert np.allclose(got, want, rtol=1e-12, atol=1e-12)


def test_fp32_identity_net():
    # 1x1 conv + FC: output equals fc bias + fc weights @ conv output
    layers = (
        LayerSpec("c", LayerKind.CONV, (1, 1), (1, 1), (0, 0), 1, 1),
        LayerSpec("fc", LayerKind.FC, in_channels=4, out_channels=4),
    )
    spec = NetworkSpec("tiny", (1, 2, 2), layers, ((-1,), (0,)))
    net = qnn.QNetwork(spec=spec, stage=qnn.Stage.FULL_PRECISION)
    from nanoloc.qnn.network import ConvParams

    net.fp_params[0] = ConvParams(np.ones((1, 1, 1, 1)))
    wfc = np.arange(16, dtype=np.float64).reshape(4, 4)
    bfc = np.array([1.0, 2.0, 3.0, 4.0])
    net.fp_params[1] = ConvParams(wfc, bfc)
    x = np.ones((1, 2, 2))
    out, _ = qnn.run_fp32(net, x)
    want = wfc @ np.ones(4) + bfc
    assert np.allclose(np.asarray(out), want)


def test_infer_shape_mismatch():
    net = qnn.random_network(nets.build_frontnet(), seed=0)
    with pytest.raises(ValueError):
        qnn.run_fp32(net, np.zeros((1, 10, 10)))


# ---------------------------------------------------------------------------
# Quantization grid properties
# ---------------------------------------------------------------------------


def test_weight_rounding_bound():
    rng = np.random.Generator(np.random.PCG64(3))
    spec = NetworkSpec(
        "w",
        (2, 4, 4),
        (LayerSpec("c", LayerKind.CONV, (3, 3), (1, 1), (1, 1), 2, 3),),
        ((-1,),),
    )
    net = qnn.random_network(spec, seed=3)
    fq = qnn.fake_quantize(net, random_frames(rng, spec, 4))
    w = net.fp_params[0].weight
    wq = fq.q_params[0].weight
    scales = fq.q_params[0].quant.weight_scales
    assert np.all(np.abs(w - wq) <= scales[:, None, None, None] / 2 + 1e-12)
    # weights already on the grid are a fixed point
    net2 = qnn.QNetwork(spec=spec, stage=qnn.Stage.FULL_PRECISION)
    from nanoloc.qnn.network import ConvParams

    net2.fp_params[0] = ConvParams(wq.copy())
    fq2 = qnn.fake_quantize(net2, random_frames(rng, spec, 4))
    assert np.array_equal(fq2.q_params[0].weight, wq)


def test_single_value_rounding():
    # scalar case: stored value round(w / s) * s, error <= s/2
    s = 0.013
    for w in (0.04, -0.9, 1.0, 0.0065):
        stored = round(w / s) * s
        assert abs(stored - w) <= s / 2 + 1e-15


def test_dyadic_approx_values():
    assert qnn.dyadic_approx(1.0) == (1, 0)
    m, s = qnn.dyadic_approx(0.5)
    assert m / 2**s == 0.5
    m, s = qnn.dyadic_approx(1.0 / 60.0)
    assert abs(m / 2**s - 1 / 60) * 60 < 2**-15
    with pytest.raises(qnn.RequantError):
        qnn.dyadic_approx(0.0)
    with pytest.raises(qnn.RequantError):
        qnn.dyadic_approx(2.0**40)


@settings(max_examples=300, deadline=None)
@given(st.floats(min_value=1e-9, max_value=1e4))
def test_dyadic_approx_property(ratio):
    m, s = qnn.dyadic_approx(ratio)
    assert m >= 1 and s >= 0
    assert m < 1 << 17
    assert abs(m / 2**s - ratio) / ratio < 2**-15
    assert m % 2 == 1 or s == 0  # canonical form


def test_integer_weights_match_grid():
    rng = np.random.Generator(np.random.PCG64(4))
    spec = random_small_spec(rng)
    net = qnn.random_network(spec, seed=11)
    fq = qnn.fake_quantize(net, random_frames(rng, spec, 4))
    qi = qnn.integerize(fq)
    for idx, lp in qi.q_params.items():
        if lp.weight is None:
            continue
        scales = lp.quant.weight_scales
        view = scales[(...,) + (None,) * (lp.weight.ndim - 1)]
        dq = lp.weight.astype(np.float64) * view
        assert np.allclose(dq, fq.q_params[idx].weight, atol=1e-12)
        # and within half a grid step of the original float weights
        orig = qnn.quantize.fold_batchnorm(net)[idx].weight
        assert np.all(np.abs(dq - orig) <= view / 2 + 1e-12)


def test_fake_quantize_requires_calibration():
    spec = random_small_spec(np.random.Generator(np.random.PCG64(5)))
    net = qnn.random_network(spec, seed=5)
    with pytest.raises(qnn.CalibrationError):
        qnn.fake_quantize(net, [])


def test_degenerate_alpha_raises():
    spec = NetworkSpec(
        "dead",
        (1, 4, 4),
        (
            LayerSpec("c", LayerKind.CONV, (1, 1), (1, 1), (0, 0), 1, 1),
            LayerSpec("r", LayerKind.RELU, in_channels=1, out_channels=1),
        ),
        ((-1,), (0,)),
    )
    net = qnn.QNetwork(spec=spec, stage=qnn.Stage.FULL_PRECISION)
    from nanoloc.qnn.network import ConvParams

    net.fp_params[0] = ConvParams(np.full((1, 1, 1, 1), -1.0))  # all activations clip to 0
    frames = [np.full((1, 4, 4), 0.5)]
    with pytest.raises(qnn.CalibrationError):
        qnn.fake_quantize(net, frames)


def test_quantization_error_bound_single_tensor():
    # per-element fake-quant error <= alpha/255 for values in [0, alpha]
    rng = np.random.Generator(np.random.PCG64(6))
    alpha = 3.7
    step = alpha / 255.0
    x = rng.uniform(0, alpha, size=1000)
    grid = np.clip(np.round(x / step), 0, 255) * step
    assert np.all(np.abs(grid - x) <= step / 2 + 1e-12)
    assert np.all(np.abs(grid - x) <= alpha / 255.0)


# ---------------------------------------------------------------------------
# Stage equivalence: the central oracle
# ---------------------------------------------------------------------------


def frame_pair(rng, spec):
    """The same input as uint8 QTensor and as its real-valued image."""
    raw = rng.integers(0, 256, size=spec.input_shape).astype(np.int64)
    q = qnn.QTensor(raw, qnn.INPUT_SCALE)
    return q, raw.astype(np.float64) / 255.0


def assert_stage_equivalence(net_fq, net_int, q, frame):
    out_fq, rec_fq = qnn.run_fakequant(net_fq, frame, record=True)
    out_int, rec_int = qnn.run_int8(net_int, q, record=True)
    assert rec_fq.keys() == rec_int.keys()
    for idx in rec_fq:
        a = rec_fq[idx]
        b = rec_int[idx].astype(np.float64)
        assert np.array_equal(a, b), f"layer {idx} diverges"
    assert np.array_equal(np.asarray(out_fq, dtype=np.float64), np.asarray(out_int, dtype=np.float64))


def test_stage_equivalence_small_nets():
    rng = np.random.Generator(np.random.PCG64(1234))
    for trial in range(25):
        spec = random_small_spec(rng)
        net = qnn.random_network(spec, seed=trial)
        fq, qi = qnn.quantize_pipeline(net, random_frames(rng, spec, 4))
        for _ in range(2):
            q, frame = frame_pair(rng, spec)
            assert_stage_equivalence(fq, qi, q, frame)


def test_stage_equivalence_frontnet():
    rng = np.random.Generator(np.random.PCG64(99))
    spec = nets.build_frontnet()
    net = qnn.random_network(spec, seed=99)
    fq, qi = qnn.quantize_pipeline(net, random_frames(rng, spec, 4))
    q, frame = frame_pair(rng, spec)
    assert_stage_equivalence(fq, qi, q, frame)


def test_stage_equivalence_mnv2():
    rng = np.random.Generator(np.random.PCG64(98))
    spec = nets.network_by_name("mnv2-2-2")
    net = qnn.random_network(spec, seed=98)
    fq, qi = qnn.quantize_pipeline(net, random_frames(rng, spec, 2))
    q, frame = frame_pair(rng, spec)
    assert_stage_equivalence(fq, qi, q, frame)


def test_int8_zero_input_zero_bias():
    spec = NetworkSpec(
        "z",
        (1, 4, 4),
        (
            LayerSpec("c", LayerKind.CONV, (3, 3), (1, 1), (1, 1), 1, 2),
            LayerSpec("r", LayerKind.RELU, in_channels=2, out_channels=2),
            LayerSpec("fc", LayerKind.FC, in_channels=2 * 4 * 4, out_channels=4),
        ),
        ((-1,), (0,), (1,)),
    )
    net = qnn.random_network(spec, seed=1)
    net.fp_params[2].bias[:] = 0.0
    rng = np.random.Generator(np.random.PCG64(2))
    fq, qi = qnn.quantize_pipeline(net, random_frames(rng, spec, 4))
    q = qnn.QTensor(np.zeros(spec.input_shape, dtype=np.int64), qnn.INPUT_SCALE)
    pose = qnn.infer_int8(qi, q)
    assert pose.as_tuple() == (0.0, 0.0, 0.0, 0.0)


def test_int8_hand_arithmetic():
    # 1x1 conv, weight 2 (scale 1), input 3 (scale 1) -> raw integer output 6
    spec = NetworkSpec(
        "hand",
        (1, 1, 1),
        (LayerSpec("c", LayerKind.CONV, (1, 1), (1, 1), (0, 0), 1, 1),),
        ((-1,),),
    )
    net = qnn.QNetwork(spec=spec, stage=qnn.Stage.INTEGER_DEPLOYABLE, input_scale=1.0)
    net.q_params[0] = QLayerParams(
        weight=np.array([[[[2]]]], dtype=np.int8),
        quant=QuantParams(
            in_scale=1.0,
            out_scale=None,
            weight_scales=np.array([1.0]),
            bias_int=np.zeros(1, dtype=np.int64),
        ),
    )
    q = qnn.QTensor(np.array([[[3]]], dtype=np.int64), 1.0)
    out, rec = qnn.run_int8(net, q, record=True)
    assert rec[0].ravel()[0] == 6
    assert out.ravel()[0] == 6.0


def test_accumulator_overflow_asserted():
    from nanoloc.qnn import kernels

    acc = np.array([2**31 + 5], dtype=np.int64)
    with pytest.raises(qnn.AccumulatorOverflow):
        kernels.check_accumulator(acc, "test")


def test_fakequant_deviation_regression_frontnet():
    # measured once on 32 synthetic calibration frames, then frozen
    rng = np.random.Generator(np.random.PCG64(2024))
    spec = nets.build_frontnet()
    net = qnn.random_network(spec, seed=2024)
    frames = random_frames(rng, spec, 32)
    fq = qnn.fake_quantize(net, frames)
    worst = 0.0
    for frame in frames[:4]:
        ref, _ = qnn.run_fp32(net, frame)
        got, _ = qnn.run_fakequant(fq, frame)
        worst = max(worst, float(np.max(np.abs(np.asarray(ref) - np.asarray(got)))))
    bound = json.loads((GOLDEN / "fakequant_deviation.json").read_text())["frontnet_seed2024"]
    assert worst <= bound


def test_frontnet_fp32_golden_pose():
    spec = nets.build_frontnet()
    net = qnn.random_network(spec, seed=77)
    rng = np.random.Generator(np.random.PCG64(77))
    frame = rng.integers(0, 256, size=spec.input_shape).astype(np.float64) / 255.0
    pose = qnn.infer_fp32(net, frame)
    want = json.loads((GOLDEN / "frontnet_fp32_pose.json").read_text())["pose"]
    assert np.allclose(np.array(pose.as_tuple()), np.array(want), rtol=0, atol=1e-12)


def test_inference_determinism():
    rng = np.random.Generator(np.random.PCG64(55))
    spec = nets.build_frontnet()
    net = qnn.random_network(spec, seed=55)
    fq, qi = qnn.quantize_pipeline(net, random_frames(rng, spec, 4))
    q, _ = frame_pair(rng, spec)
    a = qnn.infer_int8(qi, q)
    b = qnn.infer_int8(qi, q)
    assert a.as_tuple() == b.as_tuple()


# ---------------------------------------------------------------------------
# Crop and PGM I/O
# ---------------------------------------------------------------------------


def test_crop_constant_frame():
    frame = np.full((160, 160), 37, dtype=np.uint8)
    out = qnn.crop_input(frame)
    assert out.shape == (96, 160)
    assert np.all(out == 37)


def test_crop_row_index_arithmetic():
    frame = np.zeros((160, 160), dtype=np.uint8)
    frame[80, 7] = 255
    out = qnn.crop_input(frame)
    assert out[80 - 32, 7] == 255
    frame2 = np.zeros((160, 160), dtype=np.uint8)
    frame2[10, 7] = 255
    assert np.all(qnn.crop_input(frame2) == 0)


def test_crop_rejects_wrong_shape():
    with pytest.raises(ValueError):
        qnn.crop_input(np.zeros((96, 160), dtype=np.uint8))


def test_pgm_roundtrip(tmp_path):
    rng = np.random.Generator(np.random.PCG64(9))
    frame = rng.integers(0, 256, size=(160, 160)).astype(np.uint8)
    path = tmp_path / "f.pgm"
    qnn.write_pgm(path, frame)
    back = qnn.read_pgm(path)
    assert np.array_equal(back, frame)


def test_pgm_rejects_garbage(tmp_path):
    path = tmp_path / "bad.pgm"
    path.write_bytes(b"P6\n2 2\n255\n" + bytes(12))
    with pytest.raises(ValueError):
        qnn.read_pgm(path)


# ---------------------------------------------------------------------------
# Weight container
# ---------------------------------------------------------------------------


def test_container_roundtrip_all_stages(tmp_path):
    rng = np.random.Generator(np.random.PCG64(31))
    spec = random_small_spec(rng)
    net = qnn.random_network(spec, seed=31)
    fq, qi = qnn.quantize_pipeline(net, random_frames(rng, spec, 4))
    for tag, n in (("fp", net), ("fq", fq), ("int", qi)):
        path = tmp_path / f"{tag}.nlw"
        qnn.save_network(n, path)
        back = qnn.load_network(path)
        assert back.stage == n.stage
        assert back.spec == n.spec
        path2 = tmp_path / f"{tag}2.nlw"
        qnn.save_network(back, path2)
        assert path.read_bytes() == path2.read_bytes()
    # loaded integer net infers identically
    q, frame = frame_pair(rng, spec)
    reloaded = qnn.load_network(tmp_path / "int.nlw")
    a, _ = qnn.run_int8(qi, q)
    b, _ = qnn.run_int8(reloaded, q)
    assert np.array_equal(np.asarray(a), np.asarray(b))


def test_container_bad_magic(tmp_path):
    path = tmp_path / "x.nlw"
    path.write_bytes(b"JUNKJUNKJUNK")
    with pytest.raises(qnn.WeightFormatError, match="byte 0"):
        qnn.load_network(path)


def test_container_truncated(tmp_path):
    rng = np.random.Generator(np.random.PCG64(32))
    spec = random_small_spec(rng)
    net = qnn.random_network(spec, seed=32)
    path = tmp_path / "t.nlw"
    qnn.save_network(net, path)
    data = path.read_bytes()
    path.write_bytes(data[: len(data) - 7])
    with pytest.raises(qnn.WeightFormatError, match="byte"):
        qnn.load_network(path)


def test_manifest_lists_records(tmp_path):
    rng = np.random.Generator(np.random.PCG64(33))
    spec = random_small_spec(rng)
    net = qnn.random_network(spec, seed=33)
    text = qnn.manifest_text(net)
    assert "role=weight" in text
    assert text.startswith("stage FULL_PRECISION")
