import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bnnkit.binarizers import LC_1, BinarizerSpec, Kind, TrainingProgress, sign
from bnnkit.blocks import (
    ActivationSpec, ActKind, Activation, BinaryConv, BlockConfig, BuildingBlock, ConfigError, Residual, ScaleKind,
    ScalingFactorSpec, activation_apply, binary_conv_train, building_block_forward, prelu_family, scaling_factor,
    with_residual,
)
from bnnkit.normalizers import BatchNormParams, NormalizerSpec, NormKind
from bnnkit.tensor import Tape, Tensor, parameter, tsum

from conftest import naive_conv


def test_am_example():
    alpha = scaling_factor(ScalingFactorSpec(ScaleKind.AM), Tensor(np.array([0.5, -1.5]).reshape(1, 2, 1, 1)))
    assert alpha.data.tolist() == [1.0]


def test_lf_starts_at_one():
    alpha = scaling_factor(ScalingFactorSpec(ScaleKind.LF), Tensor(np.ones((4, 2, 3, 3))))
    assert alpha.data.tolist() == [1.0] * 4


def test_lfi_ratio():
    y_real = np.full((2, 1, 3, 3), 3.0)
    y_bin = np.full((2, 1, 3, 3), -6.0)
    alpha = scaling_factor(ScalingFactorSpec(ScaleKind.LFI), Tensor(np.ones((1, 1, 3, 3))), y_real, y_bin)
    assert alpha.data.tolist() == [0.5]


def test_lfi_zero_binary_output_fails():
    with pytest.raises(ValueError, match="LFI"):
        scaling_factor(ScalingFactorSpec(ScaleKind.LFI), Tensor(np.ones((1, 1, 3, 3))),
                       np.ones((1, 1, 2, 2)), np.zeros((1, 1, 2, 2)))


def test_no_scaling_returns_none():
    assert scaling_factor(ScalingFactorSpec(), Tensor(np.ones((1, 1, 1, 1)))) is None


def test_lfi_initializes_on_first_forward(rng):
    cfg = BlockConfig(scaling=ScalingFactorSpec(ScaleKind.LFI))
    conv = BinaryConv(cfg, 2, 3, rng=rng, use_bn=False)
    assert not conv.alpha_initialized
    conv(Tensor(rng.normal(size=(2, 2, 5, 5))))
    assert conv.alpha_initialized and np.all(conv.alpha.data > 0) and not np.all(conv.alpha.data == 1)


def act(variant, **kw):
    return activation_apply(ActivationSpec(variant, **kw), Tensor(np.array([-2.0, 0.0, 2.0]).reshape(1, 3, 1, 1)))


def test_identity_parameters_leave_input_unchanged(rng):
    x = Tensor(rng.normal(size=(2, 3, 2, 2)))
    one = Tensor(np.ones(3))
    zero = Tensor(np.zeros(3))
    assert np.array_equal(prelu_family(x, one, one, zero, zero).data, x.data)
    assert np.array_equal(act(ActKind.HTANH_ID).data.reshape(-1), [-2.0, 0.0, 2.0])


def test_prelu_example():
    out = act(ActKind.PRELU, alpha=0.25).data.reshape(-1)
    assert out[0] == -0.5 and out[2] == 2.0


def test_rprelu_example():
    out = act(ActKind.RPRELU, alpha=0.25, gamma=1.0, zeta=-1.0).data.reshape(-1)
    assert out[1] == -1.0


def test_relu_variant():
    assert act(ActKind.RELU).data.reshape(-1).tolist() == [0.0, 0.0, 2.0]


def test_learnable_parameters_per_variant():
    names = lambda v: {n for n, _ in Activation(ActivationSpec(v), 2).named_parameters()}  # noqa: E731
    assert names(ActKind.NONE) == set()
    assert names(ActKind.PRELU) == {"alpha"}
    assert names(ActKind.RPRELU) == {"alpha", "gamma", "zeta"}
    assert names(ActKind.DPRELU) == {"alpha", "beta", "gamma", "zeta"}


def test_activation_channel_mismatch():
    with pytest.raises(ValueError):
        prelu_family(Tensor(np.ones((1, 2, 1, 1))), *(Tensor(np.ones(3)) for _ in range(4)))


@given(st.integers(0, 2**32 - 1))
def test_dprelu_contains_prelu_and_rprelu(seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(2, 3, 2, 2)))
    a, g, z = rng.normal(size=3), rng.normal(size=3), rng.normal(size=3)
    for spec, params in [(ActivationSpec(ActKind.PRELU), (a, np.ones(3), np.zeros(3), np.zeros(3))),
                         (ActivationSpec(ActKind.RPRELU), (a, np.ones(3), g, z))]:
        layer = Activation(spec, 3)
        layer.alpha.data, layer.beta.data, layer.gamma.data, layer.zeta.data = (p.copy() for p in params)
        dp = Activation(ActivationSpec(ActKind.DPRELU), 3)
        dp.alpha.data, dp.beta.data, dp.gamma.data, dp.zeta.data = (p.copy() for p in params)
        assert np.array_equal(layer(x).data, dp(x).data)


def test_all_ones_binary_conv_gives_nine():
    conv = BinaryConv(BlockConfig(), 1, 1, weight=np.ones((1, 1, 3, 3)), use_bn=False)
    conv.padding = 0
    out = conv(Tensor(np.ones((1, 1, 3, 3))), TrainingProgress(0.0))
    assert out.data.reshape(-1).tolist() == [9.0]


def test_binary_conv_matches_straightline_oracle(rng):
    x = rng.normal(size=(2, 3, 6, 6))
    w = rng.normal(size=(4, 3, 3, 3))
    got = binary_conv_train(BlockConfig(), Tensor(x), Tensor(w)).data
    ref = naive_conv(sign(x), sign(w), 1, 1, -1.0)
    assert np.max(np.abs(got - ref)) < 1e-10


def test_baseline_config_is_all_none():
    cfg = BlockConfig()
    assert cfg.feature_binarizer == LC_1 and cfg.weight_binarizer == LC_1
    assert cfg.feature_norm.kind is NormKind.NONE and cfg.weight_norm.kind is NormKind.NONE
    assert cfg.scaling.kind is ScaleKind.NONE and cfg.residual is Residual.SINGLE
    assert cfg.activation.is_identity


def test_conv_input_is_exactly_binary(rng):
    cfg = BlockConfig(feature_norm=NormalizerSpec(NormKind.STD), feature_binarizer=BinarizerSpec(Kind.SS))
    conv = BinaryConv(cfg, 2, 2, rng=rng)
    _, xb = conv.binary_input(Tensor(rng.normal(size=(2, 2, 4, 4))), TrainingProgress(0.3), "train")
    assert set(np.unique(xb.data)) == {-1.0, 1.0}


def test_stage_one_keeps_weights_real(rng):
    conv = BinaryConv(BlockConfig(), 2, 2, rng=rng)
    wn, wb = conv.binary_weight(TrainingProgress(0.0), stage=1)
    assert np.array_equal(wb.data, conv.weight.data)
    _, wb2 = conv.binary_weight(TrainingProgress(0.0), stage=2)
    assert set(np.unique(wb2.data)) == {-1.0, 1.0}
    _, xb = conv.binary_input(Tensor(rng.normal(size=(1, 2, 3, 3))), TrainingProgress(0.0), "train")
    assert set(np.unique(xb.data)) <= {-1.0, 1.0}


def test_invalid_stage():
    with pytest.raises(ValueError):
        BinaryConv(BlockConfig(), 1, 1)(Tensor(np.ones((1, 1, 3, 3))), stage=3)


@pytest.mark.parametrize("residual", [Residual.SINGLE, Residual.DOUBLE])
def test_zero_branch_block_is_identity(rng, residual):
    cfg = BlockConfig(residual=residual)
    block = BuildingBlock(cfg, 3, 3, 1, rng)
    block.conv1.weight.data[:] = 0
    block.conv2.weight.data[:] = 0
    x = Tensor(rng.normal(size=(2, 3, 4, 4)))
    out = building_block_forward(cfg, x, block, TrainingProgress(0.0), stage=1)
    assert np.allclose(out.data, x.data, atol=1e-12)


def test_double_and_single_differ(rng):
    single = BuildingBlock(BlockConfig(), 4, 4, 1, np.random.default_rng(3))
    double = BuildingBlock(BlockConfig(residual=Residual.DOUBLE), 4, 4, 1, np.random.default_rng(3))
    x = Tensor(rng.normal(size=(2, 4, 5, 5)))
    assert not np.allclose(single(x).data, double(x).data)


def test_block_config_mismatch():
    block = BuildingBlock(BlockConfig(), 2, 2, 1, np.random.default_rng(0))
    with pytest.raises(ConfigError):
        building_block_forward(with_residual(BlockConfig(), Residual.DOUBLE), Tensor(np.ones((1, 2, 3, 3))), block)


def test_downsampling_block_uses_projection(rng):
    block = BuildingBlock(BlockConfig(), 2, 4, 2, rng)
    assert block.shortcut is not None and block.shortcut.weight.shape == (4, 2, 1, 1)
    assert block(Tensor(rng.normal(size=(1, 2, 8, 8)))).shape == (1, 4, 4, 4)


def test_bad_normalizer_placement():
    with pytest.raises(ConfigError):
        BlockConfig(feature_norm=NormalizerSpec(NormKind.MSTD))
    with pytest.raises(ConfigError):
        BlockConfig(weight_norm=NormalizerSpec(NormKind.BN))


@given(st.integers(0, 2**32 - 1), st.floats(0.01, 100))
def test_scaling_factor_absorbed_by_batch_norm(seed, c):
    rng = np.random.default_rng(seed)
    cfg = BlockConfig(scaling=ScalingFactorSpec(ScaleKind.LF))
    x = Tensor(rng.normal(size=(2, 3, 5, 5)))
    w = rng.normal(size=(4, 3, 3, 3))

    def run(scale):
        conv = BinaryConv(cfg, 3, 4, weight=w.copy())
        conv.alpha.data = np.abs(rng_alpha) * scale
        conv.bn.gamma.data = gamma / scale
        conv.bn.beta.data = beta.copy()
        conv.bn.running_mu = mu * scale
        conv.bn.running_var = var.copy()
        return conv(x, mode="eval").data

    rng_alpha = rng.normal(size=4) + 0.1
    gamma, beta, mu, var = rng.normal(size=4), rng.normal(size=4), rng.normal(size=4), rng.random(4) + 0.5
    assert np.max(np.abs(run(1.0) - run(c))) < 1e-9


def test_ste_gradients_reach_latent_weights(rng):
    conv = BinaryConv(BlockConfig(), 2, 3, rng=rng)
    x = parameter(rng.normal(size=(2, 2, 4, 4)))
    with Tape() as tape:
        loss = tsum(conv(x, TrainingProgress(0.0)))
    tape.backward(loss)
    assert x.grad is not None and conv.weight.grad is not None
    assert np.all(conv.weight.grad[np.abs(conv.weight.data) > 1] == 0)
