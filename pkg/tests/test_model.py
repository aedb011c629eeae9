"""Block and network assembly: shapes, counts, aliasing, determinism."""

import numpy as np
import pytest

from affinet import nn
from affinet.gradcheck import EPS, rel_error
from affinet.model import build_block, build_network, collect_filter_bank


def expected_parameter_count(channels, in_ch, n_classes, fc_dim, max_depth=3, input_size=32):
    """Independent hand count: conv w+b, bn gamma+beta, two FC layers."""
    total = 0
    prev = in_ch
    for out in channels:
        for depth in range(1, max_depth + 1):
            for unit in range(depth):
                cin = prev if unit == 0 else out
                total += out * cin * 9 + out  # conv
                total += 2 * out  # batchnorm
        prev = out
    flat = (input_size // 8) ** 2 * channels[-1]
    total += flat * fc_dim + fc_dim
    total += fc_dim * n_classes + n_classes
    return total


class TestBuildBlock:
    def test_default_depth_three_branches(self):
        block = build_block(3, 32, max_depth=3)
        assert [len(units) for units in block.branches] == [1, 2, 3]
        weights = sum(conv.w.data.size for conv in block.conv_layers())
        assert weights == 3 * (3 * 32 * 9) + (1 + 2) * (32 * 32 * 9)
        biases = sum(conv.b.data.size for conv in block.conv_layers())
        assert biases == 6 * 32

    def test_depth_two_variant(self):
        block = build_block(3, 16, max_depth=2)
        assert [len(units) for units in block.branches] == [1, 2]

    def test_square_block_preserves_shape(self):
        block = build_block(4, 4, max_depth=3, seed=1, dtype=np.float64)
        x = np.random.default_rng(0).uniform(-1, 1, (2, 6, 6, 4))
        out = block.forward(x, "train")
        assert out.shape == x.shape

    def test_nonpositive_channels_rejected(self):
        with pytest.raises(ValueError):
            build_block(0, 4)
        with pytest.raises(ValueError):
            build_block(4, -1)

    def test_depth_one_degenerates_to_conv_bn(self):
        block = build_block(3, 5, max_depth=1, seed=2, dtype=np.float64)
        x = np.random.default_rng(1).uniform(-1, 1, (2, 4, 4, 3))
        out = block.forward(x, "train")
        conv, bn = block.branches[0][0]
        ref = nn.batchnorm_nhwc(
            nn.conv2d_nhwc(x, conv.w.data, None), bn.gamma.data, bn.beta.data,
            nn.BatchNormState(5, np.float64), "train",
        )[0]
        np.testing.assert_array_equal(out, ref)


class TestBlockForward:
    def test_dominated_branches_yield_branch_one_output(self):
        block = build_block(2, 3, max_depth=3, seed=3, dtype=np.float64)
        # push branches 2 and 3 far down via their final batchnorm shift
        for units in block.branches[1:]:
            units[-1][1].beta.data[:] = -1e6
        x = np.random.default_rng(2).uniform(-1, 1, (2, 4, 4, 2))
        out = block.forward(x, "train")
        conv, bn = block.branches[0][0]
        branch1 = nn.batchnorm_nhwc(
            nn.conv2d_nhwc(x, conv.w.data, None), bn.gamma.data, bn.beta.data,
            nn.BatchNormState(3, np.float64), "train",
        )[0]
        np.testing.assert_array_equal(out, branch1)
        assert (block._arg == 0).all()

    def test_output_dominates_every_branch(self):
        block = build_block(2, 4, max_depth=3, seed=4, dtype=np.float64)
        x = np.random.default_rng(3).uniform(-1, 1, (2, 4, 4, 2))
        branch_outs = []
        for units in block.branches:
            h = x
            for conv, bn in units:
                state = nn.BatchNormState(4, np.float64)
                state.running_mean[:] = bn.state.running_mean
                state.running_var[:] = bn.state.running_var
                h = nn.batchnorm_nhwc(
                    nn.conv2d_nhwc(h, conv.w.data, None),
                    bn.gamma.data, bn.beta.data, state, "train",
                )[0]
            branch_outs.append(h)
        out = block.forward(x, "train")
        for b in branch_outs:
            assert (out >= b - 1e-12).all()

    def test_single_block_gradient_matches_finite_differences(self):
        block = build_block(2, 3, max_depth=3, seed=5, dtype=np.float64)
        rng = np.random.default_rng(4)
        x = rng.uniform(-1, 1, (2, 4, 4, 2))
        proj = rng.uniform(-1, 1, (2, 4, 4, 3))

        def f():
            return float(np.vdot(block.forward(x, "train"), proj))

        f()
        for p in block.params():
            p.grad[...] = 0
        block.backward(proj)
        target = block.branches[2][1][0].w  # deep conv inside branch 3
        flat = target.data.reshape(-1)
        gflat = target.grad.reshape(-1)
        analytic, numeric = [], []
        for c in rng.choice(flat.size, 8, replace=False):
            orig = flat[c]
            flat[c] = orig + EPS
            f_plus = f()
            flat[c] = orig - EPS
            f_minus = f()
            flat[c] = orig
            analytic.append(gflat[c])
            numeric.append((f_plus - f_minus) / (2 * EPS))
        assert rel_error(np.array(analytic), np.array(numeric)) <= 1e-4


class TestBuildNetwork:
    def test_smallest_configuration_flat_dim(self):
        net = build_network((4, 4, 4, 4, 4), 10)
        assert net.flat_dim == 4 * 4 * 4

    def test_parameter_count_matches_hand_count(self):
        for channels, in_ch, classes, fc in [
            ((4, 4, 4, 4, 4), 1, 10, 1024),
            ((32, 64, 64, 64, 64), 1, 10, 1024),
            ((8, 16, 16, 32, 32), 3, 43, 128),
        ]:
            net = build_network(channels, classes, input_channels=in_ch, fc_dim=fc)
            assert net.parameter_count() == expected_parameter_count(
                channels, in_ch, classes, fc
            )

    def test_spatial_ladder_halves_three_times(self):
        net = build_network((4, 4, 4, 4, 4), 10, seed=0)
        x = np.random.default_rng(0).uniform(0, 1, (2, 1, 32, 32)).astype(np.float32)
        net.forward(x, "train")
        assert net._conv_out_shape == (2, 4, 4, 4)

    def test_indivisible_input_size_rejected(self):
        with pytest.raises(ValueError):
            build_network((4, 4, 4, 4, 4), 10, input_size=30)

    def test_wrong_channel_count_rejected(self):
        with pytest.raises(ValueError):
            build_network((4, 4, 4), 10)

    def test_same_seed_same_parameters(self):
        a = build_network((4, 4, 4, 4, 4), 10, seed=11)
        b = build_network((4, 4, 4, 4, 4), 10, seed=11)
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert pa.name == pb.name
            np.testing.assert_array_equal(pa.data, pb.data)


class TestNetworkForward:
    def test_infer_mode_is_deterministic(self):
        net = build_network((4, 4, 4, 4, 4), 10, seed=6)
        rng = np.random.default_rng(5)
        x = rng.uniform(0, 1, (4, 1, 32, 32)).astype(np.float32)
        net.forward(x, "train")  # seed running stats
        a = net.forward(x, "infer")
        b = net.forward(x, "infer")
        np.testing.assert_array_equal(a, b)

    def test_zero_images_and_zero_head_give_uniform_logits(self):
        net = build_network((4, 4, 4, 4, 4), 10, seed=7)
        net.fc2.w.data[:] = 0
        net.fc2.b.data[:] = 0
        x = np.zeros((3, 1, 32, 32), dtype=np.float32)
        logits = net.forward(x, "train")
        assert not logits.any()
        loss, _ = nn.softmax_cross_entropy(logits, np.array([0, 5, 9]))
        assert loss == pytest.approx(np.log(10), rel=1e-6)

    def test_no_cross_sample_coupling_in_infer(self):
        net = build_network((4, 4, 4, 4, 4), 10, seed=8)
        rng = np.random.default_rng(6)
        x = rng.uniform(0, 1, (3, 1, 32, 32)).astype(np.float32)
        net.forward(x, "train")
        single = net.forward(x, "infer")
        doubled = net.forward(np.concatenate([x, x]), "infer")
        np.testing.assert_array_equal(doubled[:3], single)
        np.testing.assert_array_equal(doubled[3:], single)

    def test_wrong_input_shape_rejected(self):
        net = build_network((4, 4, 4, 4, 4), 10)
        with pytest.raises(nn.ShapeError):
            net.forward(np.zeros((1, 3, 32, 32), dtype=np.float32), "train")


class TestFilterBank:
    def test_block1_slice_count_hand_enumeration(self):
        net = build_network((4, 4, 4, 4, 4), 10, input_channels=1, max_depth=3)
        bank = collect_filter_bank(net)
        block1 = [w for lid, w in bank.entries if lid.startswith("block1.")]
        slices = sum(w.shape[0] * w.shape[1] for w in block1)
        assert slices == (1 * 4) + (1 * 4 + 4 * 4) + (1 * 4 + 4 * 4 + 4 * 4) == 60

    def test_order_stable_across_builds(self):
        a = collect_filter_bank(build_network((4, 4, 4, 4, 4), 10, seed=12))
        b = collect_filter_bank(build_network((4, 4, 4, 4, 4), 10, seed=12))
        assert [lid for lid, _ in a.entries] == [lid for lid, _ in b.entries]
        for (_, wa), (_, wb) in zip(a.entries, b.entries):
            np.testing.assert_array_equal(wa, wb)

    def test_bank_slices_alias_network_parameters(self):
        net = build_network((4, 4, 4, 4, 4), 10, seed=13)
        bank = collect_filter_bank(net)
        view = bank.slice(0)
        view[...] = 123.0
        assert (net.blocks[0].conv_layers()[0].w.data[0, 0] == 123.0).all()
