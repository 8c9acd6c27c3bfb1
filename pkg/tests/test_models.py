"""Structural audits of the concat-skip classifier and the add-skip reference
net, plus weight-checkpoint round-trips."""

import numpy as np
import pytest

from vigdc import weights as weights_io
from vigdc.models import (
    ConvBlock,
    build_conv_block,
    build_reference_net,
    build_vdcnet,
    count_params,
)
from vigdc.tensor import ShapeError, Tensor


def _rand_batch(rng, n, size):
    return Tensor(rng.random((n, 3, size, size)).astype(np.float32))


class TestConvBlock:
    def test_channel_arithmetic(self):
        block = build_conv_block("b", 32, [16, 16, 32], with_pool=True)
        assert block.out_ch == 64
        x = Tensor(np.random.default_rng(0).random((1, 32, 8, 8)).astype(np.float32))
        out = block(x, "train")
        assert out.data.shape == (1, 64, 4, 4)

    def test_three_convs_three_bns(self):
        block = build_conv_block("b", 8, [4, 4, 4], with_pool=False)
        kinds = [l.kind for l in block.sublayers()]
        assert kinds.count("conv") == 3
        assert kinds.count("bn") == 3
        assert [l.kernel_size for l in block.sublayers() if l.kind == "conv"] == [1, 3, 1]

    def test_zero_weights_skip_path_passes_input(self):
        rng = np.random.default_rng(1)
        block = build_conv_block("b", 4, [4, 4, 4], with_pool=False)
        for layer in block.sublayers():
            if layer.kind == "conv":
                layer.weight.data[:] = 0.0
        x = rng.random((2, 4, 6, 6)).astype(np.float32)
        out = block(Tensor(x), "train")
        np.testing.assert_array_equal(out.data[:, :4], x)

    def test_nonpositive_width_rejected(self):
        with pytest.raises(ValueError):
            build_conv_block("b", 8, [4, 0, 4], with_pool=False)


@pytest.fixture(scope="module")
def default_graph():
    return build_vdcnet()


class TestVdcnetStructure:

    def test_twenty_convs_four_pools(self, default_graph):
        assert default_graph.conv_count == 20
        assert default_graph.maxpool_count == 4

    def test_param_count_in_target_band(self, default_graph):
        assert 23_300_000 <= count_params(default_graph) <= 28_500_000

    def test_tap_at_22x22_for_352(self, default_graph):
        assert default_graph.tap_spatial_size() == 22
        assert default_graph.tap_channels() == 4096

    def test_channel_count_strictly_increases_across_blocks(self, default_graph):
        blocks = [s for _, s in default_graph.stages if isinstance(s, ConvBlock)]
        channels = [blocks[0].in_ch] + [b.out_ch for b in blocks]
        assert all(a < b for a, b in zip(channels, channels[1:]))

    def test_head_is_pool_dense_one_sigmoid(self, default_graph):
        assert default_graph.head_pool_mode == "avg"
        assert default_graph.head_dense_w.data.shape == (4096, 1)
        assert default_graph.head_dense_b.data.shape == (1,)

    def test_describe_reports_counts(self, default_graph):
        text = default_graph.describe()
        assert "conv layers: 20" in text
        assert "maxpool layers: 4" in text
        assert f"trainable params: {count_params(default_graph)}" in text

    def test_invalid_input_size_rejected(self):
        with pytest.raises(ValueError):
            build_vdcnet(input_size=350)

    def test_width_multiplier_shrinks_params(self):
        small = build_vdcnet(width_multiplier=0.0625, input_size=176)
        assert count_params(small) < count_params(build_vdcnet()) / 50
        assert small.conv_count == 20
        assert small.maxpool_count == 4


class TestReferenceNet:
    def test_tap_pixel_ratio_is_four(self):
        vdc = build_vdcnet(width_multiplier=0.0625, input_size=352)
        ref = build_reference_net(width_multiplier=0.25, input_size=352)
        assert vdc.tap_spatial_size() == 22
        assert ref.tap_spatial_size() == 11
        assert vdc.tap_spatial_size() ** 2 == 4 * ref.tap_spatial_size() ** 2

    def test_param_count_below_vdcnet_default(self):
        assert count_params(build_reference_net()) < count_params(build_vdcnet())

    def test_zero_weight_blocks_near_identity(self):
        # with conv weights zeroed, each add-skip block reduces to its skip path
        g = build_reference_net(width_multiplier=0.125, input_size=32)
        rng = np.random.default_rng(0)
        x = rng.random((1, 3, 32, 32)).astype(np.float32)
        params = g.parameters()
        for name, p in params.items():
            if "conv" in name and name.endswith(".weight") and "proj" not in name:
                p.data[:] = 0.0
        out = g.forward(Tensor(x), mode="infer")
        assert np.all(np.isfinite(out.data))

    def test_invalid_input_size_rejected(self):
        with pytest.raises(ValueError):
            build_reference_net(input_size=48)


@pytest.fixture(scope="module")
def small_graph():
    return build_vdcnet(width_multiplier=0.03125, input_size=64, final_floor=16)


class TestForward:

    def test_probs_in_unit_interval(self, small_graph):
        rng = np.random.default_rng(0)
        probs = small_graph.predict(_rand_batch(rng, 3, 64))
        assert np.all((probs > 0) & (probs < 1))

    def test_infer_deterministic(self, small_graph):
        rng = np.random.default_rng(1)
        x = _rand_batch(rng, 2, 64)
        small_graph.forward(Tensor(rng.random((4, 3, 64, 64)).astype(np.float32)), mode="train")
        a = small_graph.forward(x, mode="infer").data
        b = small_graph.forward(x, mode="infer").data
        np.testing.assert_array_equal(a, b)

    def test_tap_shape(self, small_graph):
        rng = np.random.default_rng(2)
        probs, taps = small_graph.forward_with_taps(_rand_batch(rng, 2, 64))
        assert "last_conv" in taps
        tap = taps["last_conv"]
        assert tap.data.shape == (2, small_graph.tap_channels(), 4, 4)

    def test_train_mode_updates_bn_infer_does_not(self, small_graph):
        rng = np.random.default_rng(3)
        state = next(iter(small_graph.bn_states().values()))
        before = state.moving_mean.copy()
        small_graph.forward(_rand_batch(rng, 2, 64), mode="infer")
        np.testing.assert_array_equal(state.moving_mean, before)
        small_graph.forward(_rand_batch(rng, 2, 64), mode="train")
        assert not np.array_equal(state.moving_mean, before)

    def test_wrong_input_size_raises(self, small_graph):
        with pytest.raises(ShapeError):
            small_graph.forward(Tensor(np.zeros((1, 3, 32, 32), dtype=np.float32)))


class TestCountParams:
    def test_dense_head_counts(self):
        g = build_vdcnet(width_multiplier=0.03125, input_size=32, final_floor=16)
        total = count_params(g)
        by_hand = sum(t.data.size for t in g.parameters().values())
        assert total == by_hand

    def test_conv_example(self):
        # 3x3 conv, 3 -> 32 channels, with bias
        g = build_reference_net(width_multiplier=1.0, input_size=32)
        stem = dict(g.parameters())
        assert stem["stem_conv.weight"].data.size + stem["stem_conv.bias"].data.size == 896


class TestWeightRoundtrip:
    def test_save_load_bit_identical_outputs(self, tmp_path):
        rng = np.random.default_rng(0)
        g = build_vdcnet(width_multiplier=0.03125, input_size=32, final_floor=8, seed=5)
        g.forward(_rand_batch(rng, 4, 32), mode="train")  # populate BN stats
        x = _rand_batch(rng, 2, 32)
        want = g.forward(x, mode="infer").data.copy()

        path = tmp_path / "model.vdcw"
        weights_io.save_weights(path, weights_io.collect_arrays(g))
        g2 = build_vdcnet(width_multiplier=0.03125, input_size=32, final_floor=8, seed=99)
        weights_io.load_state(g2, weights_io.load_weights(path))
        got = g2.forward(x, mode="infer").data
        np.testing.assert_array_equal(got, want)

    def test_truncated_file_rejected(self, tmp_path):
        g = build_vdcnet(width_multiplier=0.03125, input_size=32, final_floor=8)
        path = tmp_path / "model.vdcw"
        weights_io.save_weights(path, weights_io.collect_arrays(g))
        blob = path.read_bytes()
        path.write_bytes(blob[:len(blob) // 2])
        with pytest.raises(weights_io.WeightFormatError):
            weights_io.load_weights(path)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.vdcw"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(weights_io.WeightFormatError):
            weights_io.load_weights(path)

    def test_unknown_record_rejected(self):
        g = build_vdcnet(width_multiplier=0.03125, input_size=32, final_floor=8)
        with pytest.raises(weights_io.WeightFormatError):
            weights_io.load_state(g, {"no.such.layer": np.zeros(3, dtype=np.float32)})
