import logging

import numpy as np
import pytest

from oracles import fd_check, random_block, randomize_bn, tape_grads
from repfuse import tensor as T
from repfuse.blocks import (
    ALL_KINDS,
    PRESETS,
    BranchKind,
    block_forward,
    branch_forward,
    build_block,
    build_network,
    crop_shared_kernel,
    crop_window,
    network_from_architecture,
)
from repfuse.tensor import GradTape, Tensor


def test_crop_examples():
    k = Tensor(np.arange(9.0).reshape(1, 1, 3, 3))
    assert crop_shared_kernel(k, 1, 1).data.item() == 4.0
    np.testing.assert_array_equal(crop_shared_kernel(k, 1, 3).data[0, 0], [[3, 4, 5]])
    np.testing.assert_array_equal(crop_shared_kernel(k, 3, 1).data[0, 0, :, 0], [1, 4, 7])
    assert crop_window(5, 3, 1) == (slice(1, 4), slice(2, 3))


@pytest.mark.parametrize("h,w", [(2, 1), (1, 4), (0, 1), (5, 1)])
def test_crop_rejects_bad_sizes(h, w):
    with pytest.raises(ValueError):
        crop_window(3, h, w)


def test_crop_aliases_main_kernel(rng):
    main = Tensor(rng.standard_normal((2, 2, 3, 3)), requires_grad=True)
    view = crop_shared_kernel(main, 1, 1)
    main.data[:, :, 1, 1] = 42.0
    assert np.all(view.data == 42.0)


def test_shared_crop_gradient(rng):
    main = Tensor(rng.standard_normal((2, 3, 3, 3)), requires_grad=True)
    x = Tensor(rng.standard_normal((2, 3, 5, 5)))

    def both(main):
        a = T.conv2d(x, main, padding=1)
        b = T.conv2d(x, crop_shared_kernel(main, 1, 1))
        return T.add_n(a, b)

    g = rng.standard_normal((2, 2, 5, 5))
    _, (grad,) = tape_grads(both, [main], g)
    _, (full,) = tape_grads(lambda m: T.conv2d(x, m, padding=1), [main], g)
    centre = (g[:, :, None] * x.data[:, None]).sum(axis=(0, 3, 4))
    np.testing.assert_allclose(grad[:, :, 1, 1], full[:, :, 1, 1] + centre, rtol=1e-12)
    assert fd_check(both, [main], rng) <= 1e-6


def test_build_block_counts(caplog):
    assert len(build_block(16, 16, 1, 3, ALL_KINDS).branches) == 7
    with caplog.at_level(logging.INFO):
        blk = build_block(3, 16, 1, 3, ALL_KINDS)
    assert len(blk.branches) == 6 and BranchKind.SKIP not in blk.kinds
    assert "SkipConnect" in caplog.text
    assert len(build_block(16, 16, 2, 3, ALL_KINDS).branches) == 6


def test_build_block_requires_main_branch():
    with pytest.raises(ValueError):
        build_block(4, 4, 1, 3, [BranchKind.CONV_1X1])


def test_block_structure():
    blk = build_block(8, 8, 1, 3, ALL_KINDS)
    assert blk.kinds[blk.protected_branch] is BranchKind.CONV_KXK
    assert len(set(blk.kinds)) == len(blk.kinds)
    sharing = {b.kind for b in blk.branches if b.shares_main_kernel}
    assert sharing == {BranchKind.CONV_1X1, BranchKind.CONV_KXK, BranchKind.CONV_1XK, BranchKind.CONV_KX1,
                       BranchKind.SEQ_1X1_KXK}
    seq = blk.branches[blk.kinds.index(BranchKind.SEQ_1X1_KXK)]
    assert seq.pre_kernel.shape == (8, 8, 1, 1)
    assert seq.pre_kernel in seq.own_params


def test_degenerate_block_is_conv_bn_relu(rng):
    blk = random_block(rng, 3, 5, 1, kinds=[BranchKind.CONV_KXK])
    x = Tensor(rng.standard_normal((2, 3, 6, 6)))
    ref = T.relu(T.batch_norm(T.conv2d(x, blk.main_kernel, padding=1), blk.branches[0].bns[0])).data
    np.testing.assert_array_equal(block_forward(blk, x).data, ref)


def test_skip_with_identity_bn_is_identity(rng):
    blk = build_block(4, 4, 1, 3, ALL_KINDS, dtype=np.float64)
    skip = blk.branches[blk.kinds.index(BranchKind.SKIP)]
    skip.bns[0].running_var[:] = 1 - skip.bns[0].eps
    x = Tensor(rng.standard_normal((2, 4, 5, 5)))
    np.testing.assert_allclose(branch_forward(blk, skip, x).data, x.data, rtol=1e-12)


def test_seq_with_identity_pre_conv_equals_main(rng):
    blk = build_block(4, 6, 1, 3, ALL_KINDS, dtype=np.float64, rng=rng)
    seq = blk.branches[blk.kinds.index(BranchKind.SEQ_1X1_KXK)]
    seq.pre_kernel.data[...] = np.eye(4).reshape(4, 4, 1, 1)
    for bn in seq.bns:
        bn.running_var[:] = 1 - bn.eps
    main = blk.branches[blk.protected_branch]
    main.bns[0].running_var[:] = 1 - main.bns[0].eps
    x = Tensor(rng.standard_normal((2, 4, 7, 7)))
    np.testing.assert_allclose(branch_forward(blk, seq, x).data, branch_forward(blk, main, x).data, atol=1e-12)


def test_branch_shapes_agree(rng):
    for _ in range(20):
        c_in, c_out = rng.integers(1, 6, 2)
        stride = int(rng.integers(1, 3))
        K = int(rng.choice([1, 3, 5]))
        size = int(rng.integers(K, 11))
        c_out = c_in if rng.random() < 0.4 else c_out
        blk = random_block(rng, int(c_in), int(c_out), stride, K)
        x = Tensor(rng.standard_normal((2, int(c_in), size, size)))
        shapes = {branch_forward(blk, br, x).shape for br in blk.branches}
        assert len(shapes) == 1, (blk.kinds, shapes)


def test_explicit_unit_gates_match_default(rng):
    blk = random_block(rng, 4, 4, 1)
    x = Tensor(rng.standard_normal((2, 4, 6, 6)))
    unit = [Tensor(np.array(1.0)) for _ in blk.branches]
    np.testing.assert_array_equal(block_forward(blk, x).data, block_forward(blk, x, unit).data)


def test_all_zero_gates_rejected(rng):
    blk = random_block(rng, 4, 4, 1)
    with pytest.raises(ValueError):
        block_forward(blk, Tensor(np.zeros((1, 4, 5, 5))), [0] * len(blk.branches))


def test_pruned_branches_get_no_gradient(rng):
    blk = random_block(rng, 4, 4, 1)
    gates = [1, 0, 1, 0, 0, 1, 0]
    x = Tensor(rng.standard_normal((2, 4, 6, 6)))
    with GradTape() as tape:
        y = block_forward(blk, x, gates, mode="train")
    tape.backward(y, rng.standard_normal(y.shape))
    for br, z in zip(blk.branches, gates):
        for p in br.own_params:
            if z:
                assert p.grad is not None
            else:
                assert p.grad is None or not np.any(p.grad)
    assert blk.main_kernel.grad is not None


def test_pruned_branch_skipped_entirely(rng, monkeypatch):
    blk = random_block(rng, 4, 4, 1)
    ran = []
    import repfuse.blocks as B

    real = B.branch_forward
    monkeypatch.setattr(B, "branch_forward", lambda b, br, x, m: ran.append(br.kind) or real(b, br, x, m))
    block_forward(blk, Tensor(np.zeros((1, 4, 5, 5))), [1, 0, 0, 0, 0, 0, 1])
    assert ran == [blk.kinds[0], blk.kinds[6]]


def test_architecture_round_trip():
    net = build_network([4, 8], [1, 2], seed=0, num_classes=5)
    gates = [[1, 0, 1, 1, 0, 0, 1], [1, 1, 0, 0, 0, 1]]
    arch = net.architecture(gates)
    rebuilt, g2 = network_from_architecture(arch)
    assert g2 == gates
    assert [b.kinds for b in rebuilt.blocks] == [b.kinds for b in net.blocks]
    assert arch["blocks"][1]["branches"][0] == "ConvKxK"


def test_vgg_tiny_preset():
    p = PRESETS["vgg-tiny"]
    assert p["widths"] == [32, 32, 64, 64, 128, 128, 256, 256]
    assert [i + 1 for i, s in enumerate(p["strides"]) if s == 2] == [3, 5, 7]
    net = build_network(**p)
    assert net.total_branches() == 6 + 7 + 6 + 7 + 6 + 7 + 6 + 7


def test_bn_calibrate_mode_untaped(rng):
    blk = random_block(rng, 3, 3, 1)
    randomize_bn(blk.branches[0].bns[0], rng)
    x = Tensor(rng.standard_normal((4, 3, 5, 5)), requires_grad=True)
    with GradTape() as tape:
        block_forward(blk, x, mode="calibrate")
    assert all(n.op != "batch_norm" for n in tape.nodes)
