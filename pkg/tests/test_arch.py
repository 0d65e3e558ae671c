import numpy as np
import pytest

from mobilefacenet.arch import (
    ArchSpec,
    BottleneckSpec,
    PRIMARY_ROWS,
    build_head_variant,
    build_mobilefacenet,
    build_model,
    expand_bottleneck,
    format_descriptor,
    make_arch,
    parse_descriptor,
    plan,
    shape_propagate,
)
from mobilefacenet.layers import GDConv, Residual
from mobilefacenet.tensor import Rng

TABLE_INPUT_COLUMN = [
    ("conv3x3", 3, 112, 112),
    ("dwconv3x3", 64, 56, 56),
    ("bottleneck", 64, 56, 56),
    ("bottleneck", 64, 28, 28),
    ("bottleneck", 128, 14, 14),
    ("bottleneck", 128, 14, 14),
    ("bottleneck", 128, 7, 7),
    ("conv1x1", 128, 7, 7),
    ("gdconv", 512, 7, 7),
    ("linconv1x1", 512, 1, 1),
    ("output", 128, 1, 1),
]


def test_shape_propagation_matches_table():
    assert shape_propagate(make_arch("primary", (112, 112))) == TABLE_INPUT_COLUMN


def test_shape_propagation_112x96():
    rows = shape_propagate(make_arch("primary", (112, 96)))
    gd = [r for r in rows if r[0] == "gdconv"][0]
    assert (gd[2], gd[3]) == (7, 6)
    assert rows[-1] == ("output", 128, 1, 1)


def test_gdconv_kernel_is_6x6_at_96():
    arch = make_arch("primary", (96, 96))
    gd_leaf = [l for seg in plan(arch) for l in seg.leaves if l.kind == "gd"][0]
    assert gd_leaf.kernel == (6, 6)


@pytest.mark.parametrize(
    "variant,emb", [("primary", 128), ("m", 512), ("s", 128), ("relu", 128), ("expand2", 128)]
)
def test_embedding_dims(variant, emb):
    assert make_arch(variant, (112, 112)).embedding_dim == emb


def test_s_variant_gdconv_channels():
    arch = make_arch("s", (112, 112))
    gd = [l for seg in plan(arch) for l in seg.leaves if l.kind == "gd"][0]
    assert gd.cin == 128 and gd.cout == 128 and gd.kernel == (7, 7)


def test_variant_edits_are_exact_set_differences():
    def leaf_names(variant):
        return {l.name for seg in plan(make_arch(variant, (112, 112))) for l in seg.leaves}

    primary, m, s = leaf_names("primary"), leaf_names("m"), leaf_names("s")
    assert primary - m == {"linconv1x1", "linconv1x1_bn"}
    assert m - s == {"conv1x1", "conv1x1_bn", "conv1x1_act"}
    assert m < primary and s < m


def test_relu_variant_swaps_every_activation():
    p_leaves = [l for seg in plan(make_arch("primary", (112, 112))) for l in seg.leaves]
    r_leaves = [l for seg in plan(make_arch("relu", (112, 112))) for l in seg.leaves]
    assert len(p_leaves) == len(r_leaves)
    swaps = [(a.kind, b.kind) for a, b in zip(p_leaves, r_leaves) if a.kind != b.kind]
    assert swaps and all(s == ("prelu", "relu") for s in swaps)


def test_expand2_doubles_every_t():
    base = [r.t for r in PRIMARY_ROWS if r.op == "bottleneck"]
    doubled = [r.t for r in make_arch("expand2", (112, 112)).rows if r.op == "bottleneck"]
    assert doubled == [2 * t for t in base]


def test_shortcut_rule_structural():
    arch = make_arch("primary", (112, 112))
    segments = [seg for seg in plan(arch) if arch.rows[seg.row_index].op == "bottleneck"]
    for seg in segments:
        first = seg.leaves[0]
        dw = [l for l in seg.leaves if l.kind == "dw"][0]
        project = [l for l in seg.leaves if l.kind == "conv"][-1]
        expect = dw.stride == (1, 1) and first.cin == project.cout
        assert seg.residual == expect
    # expected shortcut pattern per table row
    flags = [seg.residual for seg in segments]
    assert flags == (
        [False, True, True, True, True]  # 5 blocks, first strided
        + [False]  # 1 block, s2
        + [True] * 6  # 6 blocks, s1, 128 -> 128 throughout
        + [False]  # s2
        + [True, True]  # s1, 128 -> 128
    )


def test_expand_bottleneck_table_row_three():
    segs = expand_bottleneck(BottleneckSpec(2, 64, 5, 2), 64, (56, 56), "prelu", "bneck1", 0)
    assert len(segs) == 5
    assert not segs[0].residual and all(s.residual for s in segs[1:])
    assert segs[-1].leaves[-1].out_hw == (28, 28)
    assert segs[-1].leaves[-1].cout == 64
    hidden = [l for l in segs[0].leaves if l.kind == "dw"][0]
    assert hidden.cin == 128  # t * in_channels


def test_expand_bottleneck_degenerate_t1():
    segs = expand_bottleneck(BottleneckSpec(1, 32, 1, 1), 32, (14, 14), "prelu", "b", 0)
    assert segs[0].residual
    expandl = segs[0].leaves[0]
    assert expandl.cout == 32  # same width as input


def test_expand_bottleneck_row_five_all_shortcuts():
    segs = expand_bottleneck(BottleneckSpec(2, 128, 6, 1), 128, (14, 14), "prelu", "b", 0)
    assert all(s.residual for s in segs)
    assert segs[-1].leaves[-1].out_hw == (14, 14)


def test_rebuild_same_seed_bit_identical():
    m1 = build_mobilefacenet("primary", (96, 96), seed=5)
    m2 = build_mobilefacenet("primary", (96, 96), seed=5)
    for (n1, a), (n2, b) in zip(m1.named_params(), m2.named_params()):
        assert n1 == n2
        assert np.array_equal(a, b)
    m3 = build_mobilefacenet("primary", (96, 96), seed=6)
    assert not all(
        np.array_equal(a, b) for (_, a), (_, b) in zip(m1.named_params(), m3.named_params())
    )


@pytest.mark.parametrize("variant", ["primary", "m", "s", "relu", "expand2"])
@pytest.mark.parametrize("hw", [(112, 112), (112, 96), (96, 96)])
def test_forward_finite_documented_dims(variant, hw):
    model = build_mobilefacenet(variant, hw, seed=1)
    x = Rng(2).normal((1, 3) + hw)
    y = model.forward(x)
    dims = {"primary": 128, "m": 512, "s": 128, "relu": 128, "expand2": 128}
    assert y.shape == (1, dims[variant], 1, 1)
    assert np.isfinite(y).all()


def test_unknown_variant_and_resolution():
    with pytest.raises(ValueError):
        make_arch("tiny", (112, 112))
    with pytest.raises(ValueError):
        make_arch("primary", (64, 64))


def test_width_divisor():
    arch = make_arch("primary", (96, 96), width_divisor=4)
    assert arch.embedding_dim == 32
    assert [r.c for r in arch.rows] == [16, 16, 16, 32, 32, 32, 32, 128, 128, 32]
    with pytest.raises(ValueError):
        make_arch("primary", (96, 96), width_divisor=3)


def test_head_variants():
    fc = build_head_variant("fc", (1280, 7, 7), 128, Rng(0))
    assert len(fc) == 1 and fc[0].weight.shape == (128, 62720)
    gd = build_head_variant("gdconv", (1280, 7, 7), 1280, Rng(0))
    y = gd[0].forward(Rng(1).normal((1, 1280, 7, 7)))
    assert y.shape == (1, 1280, 1, 1)
    gap = build_head_variant("gapool", (16, 5, 5), 16, Rng(0))
    const = np.full((1, 16, 5, 5), 3.25, dtype=np.float32)
    np.testing.assert_allclose(gap[0].forward(const)[:, :, 0, 0], 3.25, rtol=1e-6)


def test_descriptor_round_trip():
    arch = make_arch("s", (112, 96), bn_on_linear=False)
    text = format_descriptor(arch, folded=True)
    arch2, folded = parse_descriptor(text)
    assert folded
    assert arch2 == arch
    assert format_descriptor(arch2, folded=True) == text


def test_descriptor_errors():
    with pytest.raises(ValueError):
        parse_descriptor("variant=primary\nnonlinearity=prelu\nconv3x3,-,64,1,2\n")  # no input=
    with pytest.raises(ValueError):
        parse_descriptor("input=96x96\nvariant=x\nnonlinearity=prelu\nconv3x3,-,64,1\n")


def test_residual_blocks_materialize_as_residual_layers():
    model = build_mobilefacenet("primary", (112, 112), seed=0)
    res = [l for l in model.layers if isinstance(l, Residual)]
    assert len(res) == 12  # 4 + 0 + 6 + 0 + 2 identity-shortcut blocks
    assert isinstance(model.layers[model.global_op_index], GDConv)


def test_bottleneck_spec_validation():
    with pytest.raises(ValueError):
        BottleneckSpec(0, 64, 1, 1)
    with pytest.raises(ValueError):
        BottleneckSpec(2, 64, 0, 1)
    with pytest.raises(ValueError):
        BottleneckSpec(2, 64, 1, 3)
