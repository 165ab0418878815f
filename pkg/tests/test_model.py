"""Architecture tests: shape contracts, group independence, heads, checkpoints."""

import numpy as np
import pytest

from rtnet.errors import ConfigError, ContractError, DimensionError
from rtnet.model import (ConvUnit, ModelConfig, RTBlock, RTNet, load_checkpoint,
                         save_checkpoint)
from rtnet.tensor import GradTape, Tensor, backward, mul, sum_axis


def small_cfg(**kw):
    base = dict(l_in=32, l_out=4, n_variates=3, d_channels=6, blocks=2, groups=3,
                n_time=6, time_mode="none", norm_kind="wn", dropout=0.0, kernel=3)
    base.update(kw)
    return ModelConfig(**base)


def make_model(cfg=None, seed=0, relation=None, **kw):
    cfg = cfg or small_cfg(**kw)
    return RTNet(cfg, np.random.default_rng(seed), relation=relation)


class TestConfig:
    def test_divisibility_checks(self):
        with pytest.raises(ConfigError):
            small_cfg(l_in=30).validate()  # not divisible by 2^blocks
        with pytest.raises(ConfigError):
            small_cfg(d_channels=7).validate()
        with pytest.raises(ConfigError):
            small_cfg(groups=2).validate()  # groups must be 1 or N
        with pytest.raises(ConfigError):
            small_cfg(kernel=4).validate()

    def test_from_dict_rejects_unknown_keys(self):
        with pytest.raises(ConfigError, match="unknown"):
            ModelConfig.from_dict(dict(small_cfg().to_dict(), bogus=1))


class TestRTBlock:
    def test_halve_double_shape(self):
        rng = np.random.default_rng(0)
        block = RTBlock(16, 3, 1, "wn", 0.0, rng)
        x = Tensor(rng.normal(size=(2, 16, 168)))
        assert block.forward(x, False, None).shape == (2, 32, 84)

    def test_odd_length_rejected(self):
        block = RTBlock(4, 3, 1, "wn", 0.0, np.random.default_rng(0))
        with pytest.raises(ConfigError):
            block.forward(Tensor(np.zeros((1, 4, 7))), False, None)

    def test_zero_main_path_reduces_to_shortcut(self):
        rng = np.random.default_rng(1)
        block = RTBlock(2, 3, 1, "none", 0.0, rng)
        block.conv1.weight.data[:] = 0.0
        block.conv2.weight.data[:] = 0.0
        block.conv1.bias.data[:] = 0.0
        block.conv2.bias.data[:] = 0.0
        x = np.abs(rng.normal(size=(1, 2, 8)))  # nonnegative input
        out = block.forward(Tensor(x), False, None)
        from rtnet.tensor import channel_upsample, maxpool1d
        shortcut = channel_upsample(maxpool1d(Tensor(x), 3, 2, 1), 2, 1)
        assert np.array_equal(out.data, shortcut.data)

    def test_three_stacked_blocks_shape_trace(self):
        """Shape oracle: (B,16,168) -> (B,32,84) -> (B,64,42) -> (B,128,21)."""
        rng = np.random.default_rng(2)
        x = Tensor(rng.normal(size=(2, 16, 168)))
        expected = [(2, 32, 84), (2, 64, 42), (2, 128, 21)]
        c = 16
        for want in expected:
            x = RTBlock(c, 3, 1, "wn", 0.0, rng).forward(x, False, None)
            assert x.shape == want
            c *= 2


class TestEmbedding:
    def test_each_variate_owns_its_channel_block(self):
        """7 variates, 56 channels, 7 groups: 8 channels per variate, and a
        variate's block reads that variate alone."""
        rng = np.random.default_rng(0)
        embed = ConvUnit(7, 56, 3, 1, 7, "wn", rng)
        assert embed.wn.v.data.shape == (56, 1, 3)
        x1 = rng.normal(size=(2, 7, 20))
        x2 = x1.copy()
        x2[:, 3] += 5.0
        y1 = embed.forward(Tensor(x1), False).data
        y2 = embed.forward(Tensor(x2), False).data
        changed = np.flatnonzero(np.any(y1 != y2, axis=(0, 2)))
        assert changed.min() >= 3 * 8 and changed.max() < 4 * 8

    def test_length_preserved(self):
        embed = ConvUnit(1, 4, 3, 1, 1, "wn", np.random.default_rng(1))
        assert embed.forward(Tensor(np.zeros((1, 1, 168))), False).shape == (1, 4, 168)

    def test_zero_weights_bias_constant(self):
        embed = ConvUnit(2, 4, 3, 1, 1, "none", np.random.default_rng(2))
        embed.weight.data[:] = 0.0
        embed.bias.data[:] = np.arange(4.0)
        out = embed.forward(Tensor(np.random.default_rng(3).normal(size=(1, 2, 10))), False)
        assert np.array_equal(out.data[0], np.tile(np.arange(4.0)[:, None], (1, 10)))


class TestPyramid:
    def test_documented_slice_lengths_at_168(self):
        """blocks=3, l_in=168: extractors read the last 168, 84, and 42 rows."""
        cfg = small_cfg(l_in=168, blocks=3, n_variates=1, groups=1, d_channels=4)
        model = make_model(cfg)
        lengths = []
        orig_forward = type(model.branches[0]).forward

        def spy(self, x, training, rng):
            lengths.append(x.data.shape[2])
            return orig_forward(self, x, training, rng)

        type(model.branches[0]).forward = spy
        try:
            model.representations(np.zeros((1, 168, 1)))
        finally:
            type(model.branches[0]).forward = orig_forward
        assert lengths == [168, 84, 42]

    def test_branch_slices_and_final_lengths(self):
        """Branch i sees the last 1/2^i of the input; all outputs share one length."""
        cfg = small_cfg(l_in=32, blocks=3, n_variates=1, groups=1, d_channels=4)
        model = make_model(cfg)
        marker = np.zeros((1, 32, 1))
        reps_zero = model.representations(marker).data
        # perturbing an element before the shallow branches' slices changes
        # only the branches that can see it
        feat_sizes = [32 * 4 >> i for i in range(3)]  # per-branch feature widths
        bounds = np.cumsum([0] + feat_sizes)
        marker[0, 0, 0] = 100.0  # visible to branch 0 only
        delta = model.representations(marker).data - reps_zero
        assert np.any(delta[0, 0, bounds[0]:bounds[1]] != 0)
        assert np.all(delta[0, 0, bounds[1]:] == 0)
        marker[0, 0, 0] = 0.0
        marker[0, 16, 0] = 100.0  # visible to branches 0 and 1, not 2
        delta = model.representations(marker).data - reps_zero
        assert np.any(delta[0, 0, bounds[1]:bounds[2]] != 0)
        assert np.all(delta[0, 0, bounds[2]:] == 0)

    def test_total_feature_width_invariant_in_depth(self):
        """Dominant-branch output width stays l_in * d regardless of block count."""
        for blocks in (1, 2, 3):
            cfg = small_cfg(l_in=32, blocks=blocks, n_variates=1, groups=1, d_channels=4)
            model = make_model(cfg)
            h = model.branches[0].forward(Tensor(np.zeros((1, 1, 32))), False, None)
            assert h.data.shape[1] * h.data.shape[2] == 32 * 4

    def test_branch_parameter_isolation(self):
        cfg = small_cfg(n_variates=1, groups=1, d_channels=4)
        model = make_model(cfg, seed=3)
        x = np.random.default_rng(4).normal(size=(2, cfg.l_in, 1))
        before = model.representations(x).data.copy()
        sizes = [cfg.l_in * cfg.d_channels >> i for i in range(cfg.blocks)]
        bounds = np.cumsum([0] + sizes)
        # perturb every parameter of branch 1
        for _, p in model.branches[1].named_parameters("b"):
            p.data += 0.37
        after = model.representations(x).data
        assert np.array_equal(before[:, :, bounds[0]:bounds[1]],
                              after[:, :, bounds[0]:bounds[1]])
        assert np.any(before[:, :, bounds[1]:bounds[2]]
                      != after[:, :, bounds[1]:bounds[2]])


class TestForward:
    def test_output_shape_univariate(self):
        cfg = small_cfg(n_variates=1, groups=1, d_channels=4, l_out=24)
        model = make_model(cfg)
        out = model.forward(np.zeros((5, cfg.l_in, 1)))
        assert out.shape == (5, 24, 1)

    def test_zero_weights_zero_prediction(self):
        cfg = small_cfg(norm_kind="none")
        model = make_model(cfg)
        model.head_linear.weight.data[:] = 0.0
        model.head_linear.bias.data[:] = 0.0
        out = model.forward(np.random.default_rng(0).normal(size=(2, 32, 3)))
        assert np.array_equal(out.data, np.zeros((2, 4, 3)))

    def test_grouped_independence_bit_exact(self):
        """With identity relation, variate j never touches variate i's prediction."""
        cfg = small_cfg()
        model = make_model(cfg, relation=np.eye(3))
        rng = np.random.default_rng(5)
        x1 = rng.normal(size=(2, 32, 3))
        x2 = x1.copy()
        x2[:, :, 0] = rng.normal(size=(2, 32)) * 1000.0
        y1 = model.forward(x1)
        y2 = model.forward(x2)
        assert np.array_equal(y1.data[:, :, 1], y2.data[:, :, 1])
        assert np.array_equal(y1.data[:, :, 2], y2.data[:, :, 2])
        assert not np.array_equal(y1.data[:, :, 0], y2.data[:, :, 0])

    def test_causality_outside_window(self):
        """Values beyond the input window cannot alter the prediction."""
        cfg = small_cfg(n_variates=1, groups=1, d_channels=4)
        model = make_model(cfg)
        series = np.random.default_rng(6).normal(size=(1, 64, 1))
        window = series[:, :32]
        y1 = model.forward(window.copy()).data
        series[:, 32:] += 1e6  # future values
        y2 = model.forward(series[:, :32].copy()).data
        assert np.array_equal(y1, y2)

    def test_time_branch_enabled_changes_output(self):
        cfg = small_cfg(time_mode="decoupled")
        model = make_model(cfg, seed=7)
        x = np.random.default_rng(8).normal(size=(2, 32, 3))
        marks = np.random.default_rng(9).uniform(-0.5, 0.5, size=(2, 4, 6))
        out = model.forward(x, marks)
        assert out.shape == (2, 4, 3)
        out2 = model.forward(x, marks + 0.3)
        assert not np.array_equal(out.data, out2.data)

    def test_decoupled_needs_marks(self):
        model = make_model(small_cfg(time_mode="decoupled"))
        with pytest.raises(DimensionError):
            model.forward(np.zeros((1, 32, 3)))

    def test_input_mode_consumes_input_marks(self):
        cfg = small_cfg(time_mode="input")
        model = make_model(cfg)
        x = np.zeros((2, 32, 3))
        with pytest.raises(DimensionError):
            model.forward(x)
        out = model.forward(x, input_marks=np.zeros((2, 32, 6)))
        assert out.shape == (2, 4, 3)

    def test_timenet_channel_trace(self):
        """Time features pass D -> 2D -> 4D at constant length."""
        cfg = small_cfg(time_mode="decoupled")
        model = make_model(cfg)
        marks = Tensor(np.zeros((2, 6 * 3, 4)))
        h = model.timenet.embed.forward(marks, False)
        assert h.shape == (2, 6, 4)
        h = model.timenet.blocks[0].forward(h, False, None)
        assert h.shape == (2, 12, 4)
        h = model.timenet.blocks[1].forward(h, False, None)
        assert h.shape == (2, 24, 4)


class TestContrastiveHead:
    def test_detached_features_block_cpn_gradients(self):
        cfg = small_cfg()
        model = make_model(cfg)
        model.freeze_cpn()
        x = np.random.default_rng(0).normal(size=(2, 32, 3))
        params = list(model.named_parameters())
        with GradTape() as tape:
            out = model.forward(x, training=True, detach_features=True,
                                rng=np.random.default_rng(1))
            loss = sum_axis(mul(out, out))
        backward(tape, loss, params=[p for _, p in params])
        for name, p in params:
            if name.startswith("cpn."):
                assert not p.requires_grad
            else:
                assert p.grad is not None and np.any(p.grad != 0.0)

    def test_stage2_training_requires_freeze(self):
        model = make_model(small_cfg())
        with pytest.raises(ContractError):
            model.forward(np.zeros((2, 32, 3)), training=True, detach_features=True)

    def test_eval_contrastive_forward_matches_e2e_shape(self):
        model = make_model(small_cfg())
        out = model.forward(np.zeros((2, 32, 3)), detach_features=True)
        assert out.shape == (2, 4, 3)


class TestWeightNormEquivalence:
    def test_wn_model_matches_plain_model_bitwise(self):
        """Swapping WN for its effective weights changes no output bit."""
        cfg_wn = small_cfg(norm_kind="wn")
        wn_model = make_model(cfg_wn, seed=11)
        plain_model = make_model(small_cfg(norm_kind="none"), seed=11)
        # copy every effective weight into the plain model
        def convs(m):
            units = []
            for br in m.branches:
                units.append(br.embed)
                for bl in br.blocks:
                    units.extend([bl.conv1, bl.conv2])
            return units
        for wn_unit, plain_unit in zip(convs(wn_model), convs(plain_model)):
            plain_unit.weight.data = wn_unit.effective_weight().data.copy()
            plain_unit.bias.data = wn_unit.bias.data.copy()
        plain_model.head_linear.weight.data = wn_model.head_linear.effective_weight().data.copy()
        plain_model.head_linear.bias.data = wn_model.head_linear.bias.data.copy()
        x = np.random.default_rng(12).normal(size=(3, 32, 3))
        assert np.array_equal(wn_model.forward(x).data, plain_model.forward(x).data)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        cfg = small_cfg(time_mode="decoupled", norm_kind="bn")
        model = make_model(cfg, seed=13, relation=np.eye(3))
        # make running stats non-trivial
        x = np.random.default_rng(14).normal(size=(4, 32, 3))
        marks = np.zeros((4, 4, 6))
        model.forward(x, marks, training=True, rng=np.random.default_rng(15))
        path = str(tmp_path / "model.rtnet")
        save_checkpoint(model, path)
        with open(path, "rb") as fh:
            assert fh.read(6) == b"RTNET1"
        loaded = load_checkpoint(path)
        assert loaded.cfg == model.cfg
        assert np.array_equal(loaded.relation, model.relation)
        y1 = model.forward(x, marks).data
        y2 = loaded.forward(x, marks).data
        assert np.array_equal(y1, y2)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.rtnet"
        path.write_bytes(b"NOTRTN" + b"\x00" * 32)
        from rtnet.errors import DataError
        with pytest.raises(DataError, match="magic"):
            load_checkpoint(str(path))


class TestFullModelGradients:
    @pytest.mark.parametrize("norm_kind", ["wn", "none", "ln"])
    def test_forward_gradcheck(self, gradcheck, norm_kind):
        cfg = ModelConfig(l_in=8, l_out=2, n_variates=2, d_channels=4, blocks=2,
                          groups=2, time_mode="none", norm_kind=norm_kind,
                          dropout=0.0, kernel=3)
        model = make_model(cfg, seed=21, relation=np.array([[0.7, 0.2], [0.3, 0.8]]))
        x = np.random.default_rng(22).normal(size=(2, 8, 2))
        truth = np.random.default_rng(23).normal(size=(2, 2, 2))
        params = [p for _, p in model.named_parameters()]

        def build():
            from rtnet.tensor import mse_per_variate
            pred = model.forward(x)
            return sum_axis(mse_per_variate(pred, truth))

        gradcheck(build, params, n_coords=4)

    def test_forward_gradcheck_with_timenet(self, gradcheck):
        cfg = ModelConfig(l_in=8, l_out=2, n_variates=1, d_channels=3, blocks=2,
                          groups=1, time_mode="decoupled", norm_kind="wn",
                          dropout=0.0, kernel=3)
        model = make_model(cfg, seed=31)
        x = np.random.default_rng(32).normal(size=(2, 8, 1))
        marks = np.random.default_rng(33).uniform(-0.5, 0.5, (2, 2, 6))
        params = [p for _, p in model.named_parameters()]

        def build():
            from rtnet.tensor import mse_per_variate
            pred = model.forward(x, marks)
            return sum_axis(mse_per_variate(pred, np.zeros((2, 2, 1))))

        gradcheck(build, params, n_coords=3)
