import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bnnkit.binarizers import sign
from bnnkit.normalizers import (
    BatchNormParams, NormalizerSpec, NormKind, batch_norm, normalize_feature, normalize_weight,
)
from bnnkit.tensor import Tape, Tensor, finite_diff_grad, mul, parameter, tsum

from conftest import rel_err


def test_std_gives_unit_channel_std(rng):
    x = rng.normal(size=(8, 3, 5, 5))
    x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True) * 2.0 + 0.7
    out = normalize_feature(NormalizerSpec(NormKind.STD), Tensor(x)).data
    # two-pass population std oracle
    mean = out.mean(axis=(0, 2, 3), keepdims=True)
    std = np.sqrt(((out - mean) ** 2).mean(axis=(0, 2, 3)))
    assert np.allclose(std, 1.0, atol=1e-9)


def test_lb_with_zero_bias_is_identity(rng):
    x = rng.normal(size=(2, 3, 4, 4))
    out = normalize_feature(NormalizerSpec(NormKind.LB), Tensor(x), bias=Tensor(np.zeros(3))).data
    assert np.array_equal(out, x)


def test_bn_eval_identity(rng):
    bn = BatchNormParams.create(3)
    bn.running_var = np.full(3, 1 - bn.eps)
    x = rng.normal(size=(2, 3, 4, 4))
    out = normalize_feature(NormalizerSpec(NormKind.BN), Tensor(x), mode="eval", bn=bn).data
    assert np.max(np.abs(out - x)) < 1e-9


def test_mstd_example():
    out = normalize_weight(NormalizerSpec(NormKind.MSTD), Tensor([1.0, 2.0, 3.0])).data
    assert np.allclose(out, [-1.2247, 0.0, 1.2247], atol=1e-4)


def test_mstdb_with_b_one_equals_mstd(rng):
    w = Tensor(rng.normal(size=(4, 3, 3, 3)))
    a = normalize_weight(NormalizerSpec(NormKind.MSTDB, b=1.0), w).data
    b = normalize_weight(NormalizerSpec(NormKind.MSTD), w).data
    assert np.array_equal(a, b)


def test_mstdb_default_divides_by_root_two():
    w = Tensor([1.0, 2.0, 3.0])
    mstd = normalize_weight(NormalizerSpec(NormKind.MSTD), w).data
    mstdb = normalize_weight(NormalizerSpec(NormKind.MSTDB), w).data
    assert np.allclose(mstdb, mstd / 1.41421356, atol=1e-8)


def test_zero_std_is_guarded():
    out = normalize_weight(NormalizerSpec(NormKind.MSTD), Tensor(np.full(5, 3.0))).data
    assert np.all(np.isfinite(out)) and np.all(out == 0)
    out = normalize_feature(NormalizerSpec(NormKind.STD), Tensor(np.zeros((2, 2, 3, 3)))).data
    assert np.all(np.isfinite(out))


def test_spec_kind_checks():
    with pytest.raises(ValueError):
        normalize_weight(NormalizerSpec(NormKind.BN), Tensor(np.ones(3)))
    with pytest.raises(ValueError):
        normalize_feature(NormalizerSpec(NormKind.MSTD), Tensor(np.ones((1, 1, 2, 2))))


def test_parse_prefixed_names():
    assert NormalizerSpec.parse("FN_LB").kind is NormKind.LB
    assert NormalizerSpec.parse("WN_MSTDB").kind is NormKind.MSTDB
    assert NormalizerSpec.parse("none").kind is NormKind.NONE


def test_median_centering_switch():
    w = Tensor([0.0, 1.0, 10.0])
    out = normalize_weight(NormalizerSpec(NormKind.MSTD, center="median"), w).data
    assert out[1] == 0.0


@given(st.integers(0, 2**32 - 1), st.floats(1e-3, 1e3))
def test_std_positive_scale_invariance(seed, c):
    x = np.random.default_rng(seed).normal(size=(3, 2, 4, 4))
    spec = NormalizerSpec(NormKind.STD)
    a = sign(normalize_feature(spec, Tensor(c * x)).data)
    b = sign(normalize_feature(spec, Tensor(x)).data)
    assert np.array_equal(a, b)


@given(st.integers(0, 2**32 - 1), st.floats(0.01, 100))
def test_mstd_moments(seed, scale):
    w = np.random.default_rng(seed).normal(size=(3, 2, 3, 3)) * scale + 1.0
    out = normalize_weight(NormalizerSpec(NormKind.MSTD), Tensor(w)).data
    assert abs(out.mean()) < 1e-9 and abs(out.std() - 1) < 1e-9


@given(st.integers(0, 2**32 - 1), st.floats(0.01, 10))
def test_mstdb_sign_pattern_matches_mstd(seed, b):
    w = Tensor(np.random.default_rng(seed).normal(size=(4, 2, 3, 3)))
    a = sign(normalize_weight(NormalizerSpec(NormKind.MSTDB, b=b), w).data)
    m = sign(normalize_weight(NormalizerSpec(NormKind.MSTD), w).data)
    assert np.array_equal(a, m)


def test_bn_train_mode_statistics(rng):
    bn = BatchNormParams.create(3)
    bn.gamma.data = np.array([0.5, 2.0, -1.5])
    bn.beta.data = np.array([0.1, -0.3, 2.0])
    x = rng.normal(3.0, 4.0, size=(64, 3, 16, 16))
    out = batch_norm(Tensor(x), bn, training=True).data
    assert np.allclose(out.mean(axis=(0, 2, 3)), bn.beta.data, atol=1e-9)
    assert np.allclose(out.std(axis=(0, 2, 3)), np.abs(bn.gamma.data), atol=1e-6)


def test_bn_running_stats_update(rng):
    bn = BatchNormParams.create(2)
    x = rng.normal(2.0, 3.0, size=(10, 2, 4, 4))
    batch_norm(Tensor(x), bn, training=True)
    assert np.allclose(bn.running_mu, 0.1 * x.mean(axis=(0, 2, 3)), atol=1e-12)
    assert np.allclose(bn.running_var, 0.9 + 0.1 * x.var(axis=(0, 2, 3)), atol=1e-12)
    assert np.all(bn.running_var >= 0)


def test_bn_eval_uses_only_running_stats(rng):
    bn = BatchNormParams.create(2)
    bn.running_mu = np.array([1.0, -1.0])
    bn.running_var = np.array([4.0, 0.25])
    x = rng.normal(size=(3, 2, 2, 2))
    a = batch_norm(Tensor(x), bn, training=False).data
    b = batch_norm(Tensor(np.concatenate([x, 100 + x])), bn, training=False).data[:3]
    assert np.array_equal(a, b)
    assert np.array_equal(bn.running_mu, [1.0, -1.0])


@pytest.mark.parametrize("training", [True, False])
def test_bn_gradients(rng, training):
    bn = BatchNormParams.create(2)
    bn.gamma.data = np.array([1.5, -0.7])
    bn.beta.data = np.array([0.2, 0.1])
    bn.running_mu = np.array([0.3, -0.2])
    bn.running_var = np.array([1.3, 0.6])
    x = parameter(rng.normal(size=(3, 2, 4, 5)))
    coef = rng.normal(size=x.shape)

    def f_of(which):
        def f(a):
            b2 = BatchNormParams.create(2)
            b2.gamma.data, b2.beta.data = bn.gamma.data.copy(), bn.beta.data.copy()
            b2.running_mu, b2.running_var = bn.running_mu.copy(), bn.running_var.copy()
            inp = x.data
            if which == "x":
                inp = a
            elif which == "gamma":
                b2.gamma.data = a
            else:
                b2.beta.data = a
            return float((batch_norm(Tensor(inp), b2, training).data * coef).sum())
        return f

    snapshot = (bn.running_mu.copy(), bn.running_var.copy())
    with Tape() as tape:
        loss = tsum(mul(batch_norm(x, bn, training), Tensor(coef)))
    tape.backward(loss)
    bn.running_mu, bn.running_var = snapshot
    assert rel_err(x.grad, finite_diff_grad(f_of("x"), x.data)) < 1e-4
    assert rel_err(bn.gamma.grad, finite_diff_grad(f_of("gamma"), bn.gamma.data)) < 1e-4
    assert rel_err(bn.beta.grad, finite_diff_grad(f_of("beta"), bn.beta.data)) < 1e-4


@pytest.mark.parametrize("kind", [NormKind.MSTD, NormKind.MSTDB])
@pytest.mark.parametrize("center", ["mean", "median"])
def test_weight_norm_gradients(rng, kind, center):
    w = parameter(rng.normal(size=(3, 2, 3, 3)))
    coef = rng.normal(size=w.shape)
    spec = NormalizerSpec(kind, center=center)
    with Tape() as tape:
        loss = tsum(mul(normalize_weight(spec, w), Tensor(coef)))
    tape.backward(loss)
    fd = finite_diff_grad(lambda a: (normalize_weight(spec, Tensor(a)).data * coef).sum(), w.data, 1e-6)
    assert rel_err(w.grad, fd) < 1e-4


def test_std_gradient(rng):
    x = parameter(rng.normal(size=(2, 3, 3, 3)))
    coef = rng.normal(size=x.shape)
    spec = NormalizerSpec(NormKind.STD)
    with Tape() as tape:
        loss = tsum(mul(normalize_feature(spec, x), Tensor(coef)))
    tape.backward(loss)
    fd = finite_diff_grad(lambda a: (normalize_feature(spec, Tensor(a)).data * coef).sum(), x.data, 1e-6)
    assert rel_err(x.grad, fd) < 1e-4


def test_mstdb_rejects_nonpositive_divisor():
    with pytest.raises(ValueError):
        NormalizerSpec(NormKind.MSTDB, b=0.0)
    assert math.isclose(NormalizerSpec().b, math.sqrt(2))
