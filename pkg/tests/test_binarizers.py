import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from bnnkit.binarizers import (
    IDENTITY, LC_1, SQRT2, BinarizerSpec, ConfigError, Kind, TrainingProgress, schedule_lambda, sign, sign_forward,
    ste_backward, surrogate,
)
from bnnkit.tensor import Tape, Tensor, mul, parameter, tsum

SURROGATE_KINDS = [Kind.PN, Kind.GPN, Kind.T, Kind.EDE, Kind.SS]
ALL_SPECS = [LC_1, BinarizerSpec(Kind.LC, 1.3), BinarizerSpec(Kind.LC_A), BinarizerSpec(Kind.PN),
             BinarizerSpec(Kind.GPN), BinarizerSpec(Kind.T), BinarizerSpec(Kind.EDE), BinarizerSpec(Kind.SS),
             BinarizerSpec(Kind.EWGS)]


def kinks(spec: BinarizerSpec, progress: TrainingProgress) -> list[float]:
    if spec.kind in (Kind.LC, Kind.LC_A):
        return [spec.clip_width]
    if spec.kind is Kind.PN:
        return [1.0]
    if spec.kind is Kind.GPN:
        return [SQRT2 / schedule_lambda(Kind.GPN, progress)]
    return []


def surrogate_fd(spec, x, progress, h=1e-6):
    return (surrogate(spec, x + h, progress) - surrogate(spec, x - h, progress)) / (2 * h)


def test_sign_examples():
    assert sign_forward(Tensor([0.3, -0.2])).data.tolist() == [1.0, -1.0]
    assert sign_forward(Tensor([0.0])).data.tolist() == [1.0]
    assert np.all(sign_forward(Tensor(-np.arange(1.0, 6.0))).data == -1.0)


def test_lc_examples():
    g = ste_backward(LC_1, np.array([0.5, 1.5]), np.ones(2))
    assert g.tolist() == [1.0, 0.0]


def test_ewgs_without_quantization_error_passes_gradient():
    x = np.array([1.0, -1.0, 1.0])
    g = np.array([0.3, -2.0, 5.0])
    assert np.array_equal(ste_backward(BinarizerSpec(Kind.EWGS, delta=0.5), x, g), g)


def test_pn_at_zero():
    assert ste_backward(BinarizerSpec(Kind.PN), np.array([0.0]), np.array([1.0])).tolist() == [2.0]


def test_swishsign_at_zero_matches_finite_difference():
    spec = BinarizerSpec(Kind.SS, beta=5.0)
    got = ste_backward(spec, np.array([0.0]), np.array([1.0]))[0]
    assert abs(got - surrogate_fd(spec, np.array([0.0]), None)[0]) < 1e-6


def test_schedule_examples():
    assert schedule_lambda(Kind.EDE, 0.0) == 0.001
    assert schedule_lambda(Kind.EDE, 1.0) == 10.0
    assert abs(schedule_lambda(Kind.GPN, 0.5) - 10 ** -0.5) < 1e-15
    assert abs(schedule_lambda(Kind.GPN, 0.5) - 0.3162) < 1e-4
    assert TrainingProgress(0.0).lambda_gpn == 0.01
    assert TrainingProgress(1.0).lambda_gpn == 10.0


def test_t_reuses_the_ede_schedule():
    assert schedule_lambda(Kind.T, 0.37) == schedule_lambda(Kind.EDE, 0.37)


@pytest.mark.parametrize("t", [-0.1, 1.5])
def test_progress_out_of_range(t):
    with pytest.raises(ValueError):
        TrainingProgress(t)


@pytest.mark.parametrize("kind", [Kind.T, Kind.EDE, Kind.GPN])
def test_unresolved_schedule_is_a_config_error(kind):
    with pytest.raises(ConfigError):
        ste_backward(BinarizerSpec(kind), np.zeros(2), np.ones(2))
    with pytest.raises(ConfigError):
        sign_forward(parameter(np.zeros(2)), BinarizerSpec(kind))


def test_schedules_strictly_increase():
    ts = np.linspace(0, 1, 101)
    for kind in (Kind.EDE, Kind.GPN):
        lam = [schedule_lambda(kind, t) for t in ts]
        assert all(b > a for a, b in zip(lam, lam[1:]))


def test_gpn_k_literal_and_clamped():
    x = np.array([0.01])
    p = TrainingProgress(1.0)  # lambda 10, so 1/lambda < 1
    literal = ste_backward(BinarizerSpec(Kind.GPN), x, np.ones(1), p)
    clamped = ste_backward(BinarizerSpec(Kind.GPN, gpn_k_clamp_at_one=True), x, np.ones(1), p)
    assert math.isclose(clamped[0] / literal[0], 10.0, rel_tol=1e-12)


@pytest.mark.parametrize("name,kind,width", [("LC_1", Kind.LC, 1.0), ("LC_1.3", Kind.LC, 1.3), ("LC_2", Kind.LC, 2.0),
                                             ("LC_A", Kind.LC_A, 1.0), ("ede", Kind.EDE, 1.0)])
def test_parse_names(name, kind, width):
    spec = BinarizerSpec.parse(name)
    assert spec.kind is kind and spec.clip_width == width


def test_parse_rejects_unknown():
    with pytest.raises(ConfigError):
        BinarizerSpec.parse("XNOR")


@pytest.mark.parametrize("kind", SURROGATE_KINDS)
def test_surrogate_gradient_fidelity(kind):
    rng = np.random.default_rng(11)
    spec = BinarizerSpec(kind)
    checked = 0
    while checked < 1000:
        progress = TrainingProgress(float(rng.random()))
        x = rng.uniform(-3, 3, size=64)
        for k in kinks(spec, progress):
            x = x[np.abs(np.abs(x) - k) > 1e-3]
        got = ste_backward(spec, x, np.ones_like(x), progress)
        ref = surrogate_fd(spec, x, progress)
        err = np.abs(got - ref) / np.maximum(np.abs(ref), 1.0)
        assert err.max() < 1e-4, (kind, progress.T)
        checked += len(x)


@given(arrays(np.float64, st.integers(1, 50), elements=st.floats(-5, 5)), st.floats(0.1, 3.0))
def test_lc_support_is_exact(x, width):
    g = ste_backward(BinarizerSpec(Kind.LC, width), x, np.ones_like(x))
    assert np.array_equal(g != 0, np.abs(x) <= width)


@given(arrays(np.float64, st.integers(1, 50), elements=st.floats(-5, 5)),
       arrays(np.float64, 50, elements=st.floats(-5, 5)))
def test_ewgs_with_zero_delta_is_identity(x, g):
    g = g[: len(x)]
    assert np.array_equal(ste_backward(BinarizerSpec(Kind.EWGS, delta=0.0), x, g), g)


@given(arrays(np.float64, st.integers(1, 40), elements=st.floats(-1e6, 1e6)))
def test_forward_independent_of_kind(x):
    progress = TrainingProgress(0.5)
    clip = parameter([1.0])
    outs = [sign_forward(Tensor(x), spec, progress, clip=clip).data for spec in ALL_SPECS]
    for out in outs:
        assert np.array_equal(out, outs[0])
    assert set(np.unique(outs[0])) <= {-1.0, 1.0}
    assert np.array_equal(outs[0], sign(x))


def test_identity_passes_through():
    x = Tensor([0.3, -2.0])
    assert sign_forward(x, IDENTITY) is x


def test_sign_node_uses_the_ste_on_the_tape():
    x = parameter([0.5, 1.5, -0.2, -3.0])
    coef = np.array([1.0, 2.0, 3.0, 4.0])
    with Tape() as tape:
        loss = tsum(mul(sign_forward(x, LC_1), Tensor(coef)))
    tape.backward(loss)
    assert x.grad.tolist() == [1.0, 0.0, 3.0, 0.0]


def test_lc_a_clip_receives_gradient():
    x = parameter([0.5, 1.5, -2.0])
    clip = parameter([1.0])
    with Tape() as tape:
        loss = tsum(sign_forward(x, BinarizerSpec(Kind.LC_A), clip=clip))
    tape.backward(loss)
    assert x.grad.tolist() == [1.0, 0.0, 0.0]
    # sum of g * sign(x) over |x| > clip: (+1) + (-1)
    assert clip.grad.tolist() == [0.0]


def test_lc_a_requires_clip():
    with pytest.raises(ConfigError):
        sign_forward(parameter([1.0]), BinarizerSpec(Kind.LC_A))


def test_ewgs_scales_by_quantization_error():
    x = np.array([0.5, -0.25])
    g = np.array([2.0, -1.0])
    got = ste_backward(BinarizerSpec(Kind.EWGS, delta=0.1), x, g)
    # g * (1 + delta * sign(g) * (x - sign(x)))
    assert np.allclose(got, [2.0 * (1 + 0.1 * (0.5 - 1)), -1.0 * (1 - 0.1 * (-0.25 + 1))], atol=1e-15)
