"""SubSpectral Norm, frequency Instance Norm, BC ResBlocks and AB Blocks."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from numpy.testing import assert_allclose, assert_array_equal

from tornet import numerics as nx
from tornet.blocks import (
    ABBlock,
    ABBlockSpec,
    BCResBlock,
    BCResBlockSpec,
    bc_resblock_forward,
    freq_instance_norm,
    subspectral_norm,
)
from tornet.errors import ConfigError
from tornet.numerics import no_grad


def make_block(c_in, c_out, stride=(1, 1), kind="normal", seed=0, ssn_groups=5, dtype=np.float64):
    spec = BCResBlockSpec(c_in, c_out, stride, kind, ssn_groups)
    return BCResBlock(spec, rng=np.random.default_rng(seed), dtype=dtype)


class TestSubSpectralNorm:
    def _ssn(self, x, S, gamma=None, beta=None):
        C = x.shape[1]
        gamma = np.ones(C * S) if gamma is None else gamma
        beta = np.zeros(C * S) if beta is None else beta
        return subspectral_norm(x, gamma, beta, np.zeros(C * S), np.ones(C * S), S, True, eps=1e-12).data

    def test_s1_equals_batchnorm(self, rng):
        x = rng.standard_normal((4, 3, 10, 6))
        g, b = rng.uniform(0.5, 2, 3), rng.standard_normal(3)
        ssn = subspectral_norm(x, g, b, np.zeros(3), np.ones(3), 1, True).data
        bn = nx.batchnorm2d(x, g, b, np.zeros(3), np.ones(3), True).data
        assert_allclose(ssn, bn, atol=1e-6)

    def test_constant_input(self):
        assert_allclose(self._ssn(np.full((2, 2, 10, 3), 3.0), 5), 0.0, atol=1e-6)

    def test_two_bands_hand_computed(self):
        # F=4, S=2: band 0 holds {0, 2}, band 1 holds {10, 30}
        x = np.array([0.0, 2.0, 10.0, 30.0]).reshape(1, 1, 4, 1)
        assert_allclose(self._ssn(x, 2).ravel(), [-1, 1, -1, 1], rtol=1e-9)

    def test_bands_use_their_own_affine(self):
        x = np.array([0.0, 2.0, 10.0, 30.0]).reshape(1, 1, 4, 1)
        out = self._ssn(x, 2, gamma=np.array([1.0, 3.0]), beta=np.array([0.0, 5.0]))
        assert_allclose(out.ravel(), [-1, 1, 2, 8], rtol=1e-9)

    def test_indivisible_frequency(self):
        with pytest.raises(ConfigError, match="F=7"):
            self._ssn(np.zeros((1, 1, 7, 2)), 5)

    def test_running_stats_per_band(self):
        x = np.array([0.0, 2.0, 10.0, 30.0]).reshape(1, 1, 4, 1)
        rm, rv = np.zeros(2), np.ones(2)
        subspectral_norm(x, np.ones(2), np.zeros(2), rm, rv, 2, True)
        assert_allclose(rm, [0.1, 2.0])


class TestFreqInstanceNorm:
    def test_constant_per_bin(self, rng):
        x = np.broadcast_to(rng.standard_normal((2, 1, 4, 1)), (2, 3, 4, 5)).copy()
        assert_allclose(freq_instance_norm(x).data, 0.0, atol=1e-12)

    def test_two_values(self):
        x = np.array([1.0, 3.0]).reshape(1, 2, 1, 1)
        assert_allclose(freq_instance_norm(x, eps=1e-14).data.ravel(), [-1, 1], rtol=1e-9)

    def test_statistics_over_channels_and_time(self, rng):
        x = rng.standard_normal((2, 3, 4, 5)) * rng.uniform(0.5, 4, (2, 1, 4, 1)) + 7
        out = freq_instance_norm(x).data
        for n in range(2):
            for f in range(4):
                sl = x[n, :, f, :]
                expected = (sl - sl.mean()) / np.sqrt(sl.var() + 1e-5)
                assert_allclose(out[n, :, f, :], expected, rtol=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(
        arrays(np.float64, (2, 3, 4, 5), elements=st.floats(-1, 1)),
        st.floats(0.01, 100),
        st.floats(-50, 50),
    )
    def test_mean_and_variance_invariant(self, base, scale, shift):
        x = base * scale + shift
        out = freq_instance_norm(x, eps=1e-5).data
        var = x.var(axis=(1, 3))
        assert np.abs(out.mean(axis=(1, 3))).max() < 1e-6
        assert np.abs(out.var(axis=(1, 3)) - var / (var + 1e-5)).max() < 1e-6

    def test_train_eval_identical(self, rng):
        from tornet.blocks import FreqInstanceNorm

        m = FreqInstanceNorm()
        x = rng.standard_normal((2, 3, 4, 5))
        a = m(x).data
        m.eval()
        assert_array_equal(m(x).data, a)


class TestBCResBlock:
    def test_normal_spec_validation(self):
        with pytest.raises(ConfigError):
            BCResBlockSpec(4, 8, (1, 1), "normal")
        with pytest.raises(ConfigError):
            BCResBlockSpec(4, 4, (2, 1), "normal")
        with pytest.raises(ConfigError):
            BCResBlockSpec(4, 4, kind="other")

    def test_normal_preserves_shape(self, rng):
        block = make_block(4, 4)
        x = rng.standard_normal((2, 4, 10, 6))
        assert block(x, rng).shape == x.shape

    def test_transition_table_shape(self):
        block = make_block(32, 64, (2, 1), "transition", dtype=np.float32)
        assert block.out_shape((32, 20, 256)) == (64, 10, 256)
        block.eval()
        with no_grad():
            out = block(np.zeros((1, 32, 20, 256), np.float32))
        assert out.shape == (1, 64, 10, 256)

    def test_transition_has_no_identity(self, rng):
        block = make_block(3, 3, kind="transition")
        for p in (block.ssn.gamma, block.ssn.beta, block.pw.weight, block.pw.bias):
            p.data[...] = 0
        block.eval()
        assert_array_equal(block(rng.standard_normal((2, 3, 10, 4))).data, 0)

    def test_zero_parameters_give_identity(self, rng):
        block = make_block(4, 4, seed=3)
        block.ssn.gamma.data[...] = 0
        block.ssn.beta.data[...] = 0
        block.pw.weight.data[...] = 0
        block.pw.bias.data[...] = 0
        x = rng.standard_normal((2, 4, 10, 6))
        assert_array_equal(block(x, np.random.default_rng(0)).data, x)

    @pytest.mark.parametrize("training", [True, False])
    def test_matches_primitive_composition(self, rng, training):
        block = make_block(5, 5, seed=11)
        for _, p in block.named_parameters():
            p.data = p.data + 0.1 * rng.standard_normal(p.shape)
        block.train(training)
        x = rng.standard_normal((3, 5, 10, 7))

        ssn = block.ssn
        rm, rv = ssn.running_mean.copy(), ssn.running_var.copy()
        bn_rm, bn_rv = block.bn.running_mean.copy(), block.bn.running_var.copy()
        f2 = subspectral_norm(
            nx.conv2d(x, block.dw_f.weight, block.dw_f.bias, (1, 1), (1, 0), 5),
            ssn.gamma, ssn.beta, rm, rv, 5, training,
        )
        pooled = nx.freq_avgpool(f2)
        h = nx.conv2d(pooled, block.dw_t.weight, block.dw_t.bias, (1, 1), (0, 1), 5)
        h = nx.swish(nx.batchnorm2d(h, block.bn.gamma, block.bn.beta, bn_rm, bn_rv, training))
        h = nx.conv2d(h, block.pw.weight, block.pw.bias)
        h = nx.dropout(h, 0.5, training, np.random.default_rng(99), style="channel")
        manual = nx.add(nx.as_tensor(x), f2, nx.broadcast_freq(h, 10)).data

        out = bc_resblock_forward(x, block, np.random.default_rng(99)).data
        assert_array_equal(out, manual)

    def test_broadcast_term_is_frequency_constant(self, rng):
        block = make_block(4, 4, seed=5)
        block.eval()
        x = rng.standard_normal((2, 4, 10, 6))
        f2 = block.f2(x)
        term = nx.broadcast_freq(block.f1(nx.freq_avgpool(f2)), 10).data
        assert_array_equal(term, np.broadcast_to(term[:, :, :1, :], term.shape))
        # and the block output minus x and f2 is exactly that term
        assert_allclose(block(x).data - x - f2.data, term, atol=1e-12)

    def test_eval_deterministic(self, rng):
        block = make_block(4, 4)
        block.eval()
        x = rng.standard_normal((2, 4, 10, 6))
        assert_array_equal(block(x).data, block(x).data)

    def test_ssn_must_divide_frequency(self):
        block = make_block(4, 4)
        with pytest.raises(ConfigError, match="does not divide"):
            block.out_shape((4, 12, 6))

    def test_channel_mismatch(self, rng):
        with pytest.raises(ConfigError):
            make_block(4, 4)(rng.standard_normal((1, 3, 10, 4)))


class TestABBlock:
    def test_table_row_shape(self):
        ab = ABBlock(ABBlockSpec(32, 64, (2, 1)), rng=np.random.default_rng(0))
        assert ab.out_shape((32, 20, 256)) == (64, 10, 256)

    def test_forward_shape(self, rng):
        ab = ABBlock(ABBlockSpec(4, 6, (2, 1)), rng=np.random.default_rng(0), dtype=np.float64)
        assert ab(rng.standard_normal((2, 4, 20, 5)), rng).shape == (2, 6, 10, 5)

    def test_submodule_names(self):
        ab = ABBlock(ABBlockSpec(4, 6, (2, 1), n_normal=2), rng=np.random.default_rng(0))
        names = {n.split(".")[0] for n, _ in ab.named_parameters()}
        assert names == {"trans", "norm1", "norm2", "last_conv", "last_bn"}

    @pytest.mark.parametrize("c", [64, 128, 256, 512])
    def test_last_conv_parameter_gap(self, c):
        full = ABBlock(ABBlockSpec(c, c, leading="normal"), rng=np.random.default_rng(0))
        bare = ABBlock(ABBlockSpec(c, c, leading="normal", last_conv=False), rng=np.random.default_rng(0))
        assert full.num_parameters() - bare.num_parameters() == 9 * c * c + c + 2 * c

    @pytest.mark.parametrize("c", [64, 128, 256, 512])
    def test_normal_block_parameter_count(self, c):
        # dw_f (3c + c) + SSN (2 * 5c) + dw_t (3c + c) + BN (2c) + pw (c^2 + c)
        one = ABBlock(ABBlockSpec(c, c, n_normal=1), rng=np.random.default_rng(0))
        none = ABBlock(ABBlockSpec(c, c, n_normal=0), rng=np.random.default_rng(0))
        assert one.num_parameters() - none.num_parameters() == c * c + 21 * c

    def test_leading_normal_requires_same_shape(self):
        with pytest.raises(ConfigError):
            ABBlockSpec(4, 8, leading="normal")

    def test_negative_normal_count(self):
        with pytest.raises(ConfigError):
            ABBlockSpec(4, 4, n_normal=-1)
