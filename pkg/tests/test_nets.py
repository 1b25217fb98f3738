import pytest

from nanoloc import nets
from nanoloc.nets import LayerKind, LayerSpec, MobileNetV2Config, NetworkSpec


# Independent per-layer oracle for the field network, computed by hand from
# the layer dimensions: macs = out_elems * kernel_volume * in_channels.
FRONTNET_LAYER_TABLE = {
    # name: (out_c, out_h, out_w, macs, weights)
    "stem": (32, 48, 80, 48 * 80 * 32 * 25 * 1, 25 * 1 * 32),
    "block1_conv1": (32, 12, 20, 12 * 20 * 32 * 9 * 32, 9 * 32 * 32),
    "block1_conv2": (32, 12, 20, 12 * 20 * 32 * 9 * 32, 9 * 32 * 32),
    "block2_conv1": (64, 6, 10, 6 * 10 * 64 * 9 * 32, 9 * 32 * 64),
    "block2_conv2": (64, 6, 10, 6 * 10 * 64 * 9 * 64, 9 * 64 * 64),
    "block3_conv1": (128, 3, 5, 3 * 5 * 128 * 9 * 64, 9 * 64 * 128),
    "block3_conv2": (128, 3, 5, 3 * 5 * 128 * 9 * 128, 9 * 128 * 128),
    "head": (4, 1, 1, 1920 * 4, 1920 * 4),
}


def test_frontnet_structure():
    net = nets.build_frontnet()
    assert net.input_shape == (1, 96, 160)
    weight_layers = [l for l in net.layers if l.kind in nets.WEIGHT_KINDS]
    assert len(weight_layers) == 8  # 1 stem + 6 block convs + 1 FC
    convs = [l for l in weight_layers if l.kind is LayerKind.CONV]
    assert convs[0].kernel == (5, 5) and convs[0].stride == (2, 2)
    assert all(l.kernel == (3, 3) for l in convs[1:])
    assert weight_layers[-1].kind is LayerKind.FC
    assert weight_layers[-1].out_channels == 4
    # every conv is followed by batch-norm + relu
    consumers = net.consumers()
    for i, l in enumerate(net.layers):
        if l.kind is LayerKind.CONV:
            (bn,) = consumers[i]
            assert net.layers[bn].kind is LayerKind.BATCHNORM
            (relu,) = consumers[bn]
            assert net.layers[relu].kind is LayerKind.RELU


def test_frontnet_spatial_schedule():
    # 96x160 halves five times down to 3x5 before the FC head.
    net = nets.build_frontnet()
    shapes = net.output_shapes()
    spatial = []
    for layer, shape in zip(net.layers, shapes):
        if layer.kind in (LayerKind.CONV, LayerKind.MAXPOOL):
            spatial.append((shape[1], shape[2]))
    assert spatial == [(48, 80), (24, 40), (12, 20), (12, 20), (6, 10), (6, 10), (3, 5), (3, 5)]


def test_frontnet_profile_against_hand_table():
    prof = nets.profile(nets.build_frontnet())
    by_name = {lp.name: lp for lp in prof.layers}
    for name, (c, h, w, macs, weights) in FRONTNET_LAYER_TABLE.items():
        lp = by_name[name]
        assert lp.out_shape == (c, h, w)
        assert lp.macs == macs
        consts = 8 * c if name != "head" else 4 * c
        assert lp.weight_bytes == weights + consts
    assert prof.mac_count == sum(v[3] for v in FRONTNET_LAYER_TABLE.values())
    assert prof.weight_bytes == sum(lp.weight_bytes for lp in prof.layers)


def test_frontnet_headline_numbers():
    prof = nets.profile(nets.build_frontnet())
    # ~304 kB of 8-bit weights, ~14.1M MACs (170 MHz / 48 fps * 4 MAC/cycle)
    assert abs(prof.weight_bytes - 304_000) / 304_000 < 0.02
    oracle_macs = 170e6 / 48 * 4
    assert abs(prof.mac_count - oracle_macs) / oracle_macs < 0.10


def test_trivial_profile():
    spec = NetworkSpec(
        "one",
        (1, 1, 1),
        (LayerSpec("c", LayerKind.CONV, (1, 1), (1, 1), (0, 0), 1, 1),),
        ((-1,),),
    )
    prof = nets.profile(spec)
    assert prof.mac_count == 1
    assert prof.weight_bytes >= 1


def test_variant_set():
    variants = nets.enumerate_variants()
    assert len(variants) == 16
    assert [(c.t, c.n) for c, _ in variants] == sorted((c.t, c.n) for c, _ in variants)
    frontnet_macs = nets.profile(nets.build_frontnet()).mac_count
    for cfg, prof in variants:
        assert prof.mac_count > frontnet_macs
        assert prof.weight_bytes <= 512 * 1024
    macs = {(c.t, c.n): p.mac_count for c, p in variants}
    assert min(macs, key=macs.get) == (2, 2)


def test_variant_published_aggregates():
    variants = dict(((c.t, c.n), p) for c, p in nets.enumerate_variants())
    assert abs(variants[(2, 2)].weight_bytes - 111_000) / 111_000 < 0.15
    assert abs(variants[(14, 4)].weight_bytes - 340_000) / 340_000 < 0.15
    ratio = variants[(14, 4)].mac_count / nets.profile(nets.build_frontnet()).mac_count
    assert abs(ratio - 10.4) / 10.4 < 0.15


def test_weight_bytes_monotone_in_n():
    variants = dict(((c.t, c.n), p) for c, p in nets.enumerate_variants())
    for t in (6, 8, 10, 12, 14):
        assert variants[(t, 2)].weight_bytes < variants[(t, 3)].weight_bytes
        assert variants[(t, 3)].weight_bytes < variants[(t, 4)].weight_bytes
        assert variants[(t, 2)].mac_count < variants[(t, 3)].mac_count < variants[(t, 4)].mac_count


def test_doubling_n_increases_both():
    for t in (6, 8, 10, 12, 14):
        p2 = nets.profile(nets.build_mobilenet_v2(MobileNetV2Config(t, 2)))
        p4 = nets.profile(nets.build_mobilenet_v2(MobileNetV2Config(t, 4)))
        assert p4.mac_count > p2.mac_count
        assert p4.weight_bytes > p2.weight_bytes


def test_invalid_variant_rejected():
    with pytest.raises(ValueError):
        MobileNetV2Config(3, 2)
    with pytest.raises(ValueError):
        MobileNetV2Config(6, 5)
    with pytest.raises(ValueError):
        MobileNetV2Config(2, 3)


def test_profile_deterministic():
    a = nets.profile(nets.build_frontnet())
    b = nets.profile(nets.build_frontnet())
    assert a == b


def test_residual_shapes_checked():
    layers = (
        LayerSpec("c1", LayerKind.CONV, (3, 3), (1, 1), (1, 1), 2, 2),
        LayerSpec("c2", LayerKind.CONV, (3, 3), (2, 2), (1, 1), 2, 2),
        LayerSpec("add", LayerKind.ADD, in_channels=2, out_channels=2),
    )
    spec = NetworkSpec("bad", (2, 8, 8), layers, ((-1,), (0,), (0, 1)))
    with pytest.raises(nets.ShapeError):
        spec.output_shapes()


def test_shape_mismatch_raises():
    layers = (LayerSpec("c", LayerKind.CONV, (3, 3), (1, 1), (0, 0), 4, 8),)
    spec = NetworkSpec("bad", (2, 8, 8), layers, ((-1,),))
    with pytest.raises(nets.ShapeError):
        spec.output_shapes()


def test_dwconv_channel_invariant():
    with pytest.raises(ValueError):
        LayerSpec("dw", LayerKind.DWCONV, (3, 3), (1, 1), (1, 1), 4, 8)


def test_unknown_network_name():
    with pytest.raises(KeyError):
        nets.network_by_name("resnet50")
    with pytest.raises(KeyError):
        nets.network_by_name("mnv2-3-2")
    assert nets.network_by_name("mnv2-2-2").name == "mnv2-2-2"
    assert len(nets.all_network_names()) == 17


def test_spec_text_roundtrip():
    for name in ("frontnet", "mnv2-2-2", "mnv2-14-4"):
        net = nets.network_by_name(name)
        text = nets.spec_to_text(net)
        back = nets.spec_from_text(text)
        assert back == net


def test_spec_text_goldens():
    from pathlib import Path

    golden = Path(__file__).parent / "golden"
    for name in ("frontnet", "mnv2-2-2"):
        want = (golden / f"{name.replace('-', '_')}_spec.txt").read_text()
        assert nets.spec_to_text(nets.network_by_name(name)) == want


def test_profile_csv():
    prof = nets.profile(nets.build_frontnet())
    text = nets.profile_to_csv(prof)
    lines = text.strip().splitlines()
    assert lines[0].startswith("name,kind,out_shape")
    assert len(lines) == len(prof.layers) + 2
    assert lines[-1].startswith("TOTAL")
    assert str(prof.mac_count) in lines[-1]
