import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from dualsynth import autodiff as ad
from dualsynth import losses as L
from dualsynth.autodiff import DimensionError, SecondOrderUnsupportedError, Tensor
from dualsynth.networks import build_global_discriminator


@pytest.fixture(autouse=True)
def _verify_precision():
    with ad.precision("verify"):
        yield


floats = st.floats(-4, 4, allow_nan=False)


def linear_critic(w):
    wt = Tensor(np.asarray(w, dtype=np.float64).reshape(-1, 1), requires_grad=True)
    return wt, lambda x: ad.reshape(ad.matmul(ad.reshape(x, (x.shape[0], -1)), wt), (x.shape[0],))


# weights

@pytest.mark.parametrize("kw", [{"lambda1": -1}, {"p": 3}, {"beta": -0.5}, {"reduction": "max"}])
def test_loss_weights_validation(kw):
    with pytest.raises(ValueError):
        L.LossWeights(**kw)


def test_loss_weight_defaults():
    w = L.LossWeights()
    assert (w.lambda_gp, w.lambda1, w.lambda2, w.p, w.beta, w.reduction) == (10.0, 0.05, 0.1, 1, 1.0, "mean")


# reconstruction

def test_recon_identity_zero():
    y = np.random.default_rng(0).standard_normal((2, 1, 4, 4))
    assert L.recon_loss(y, y, 1).item() == 0.0


def test_recon_constant_difference():
    y = np.zeros((3, 1, 4, 4))
    assert L.recon_loss(y, y + 5, 1).item() == 5.0


def test_recon_squares():
    assert L.recon_loss(np.array([3.0, -3.0]), np.zeros(2), 2).item() == 9.0


def test_recon_shape_mismatch():
    with pytest.raises(DimensionError):
        L.recon_loss(np.zeros((2, 2)), np.zeros((2, 3)), 1)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (2, 3), elements=floats), arrays(np.float64, (2, 3), elements=floats))
def test_recon_nonnegative_zero_iff_equal(a, b):
    v = L.recon_loss(a, b, 1).item()
    assert v >= 0
    assert (v == 0) == np.array_equal(a, b)


# interpolation

def test_interpolate_endpoints_and_midpoint():
    y, g = np.full((2, 1, 2, 2), 4.0), np.zeros((2, 1, 2, 2))
    np.testing.assert_array_equal(L.interpolate(y, g, None, [1.0, 1.0]).x_hat.data, y)
    np.testing.assert_array_equal(L.interpolate(y, g, None, [0.0, 0.0]).x_hat.data, g)
    s = L.interpolate(y, g, None, [0.25, 0.25])
    np.testing.assert_array_equal(s.x_hat.data, 1.0)
    assert s.x_hat.requires_grad


def test_interpolate_one_draw_per_sample():
    y, g = np.ones((5, 1, 3, 3)), np.zeros((5, 1, 3, 3))
    s = L.interpolate(y, g, np.random.default_rng(0))
    assert s.epsilon.shape == (5,)
    np.testing.assert_allclose(s.x_hat.data, s.epsilon.reshape(5, 1, 1, 1) * np.ones((1, 1, 3, 3)))
    assert np.all((s.epsilon >= 0) & (s.epsilon <= 1))


# critic loss

def test_constant_critic_value_is_lambda():
    y, g = np.random.default_rng(0).standard_normal((2, 4)), np.random.default_rng(1).standard_normal((2, 4))
    critic = lambda x: Tensor(np.full(x.shape[0], 2.5))  # noqa: E731
    assert L.critic_loss_d1(critic, y, g, 10.0, np.random.default_rng(2)).item() == pytest.approx(10.0, abs=1e-12)


def test_constant_critic_through_input_graph():
    y, g = np.ones((3, 2)), np.zeros((3, 2))
    critic = lambda x: ad.add(ad.mul(ad.sum_(x, axis=1), 0.0), 7.0)  # noqa: E731
    assert L.critic_loss_d1(critic, y, g, 3.0, np.random.default_rng(0)).item() == pytest.approx(3.0, abs=1e-12)


def test_unit_linear_critic_zero_penalty():
    _, critic = linear_critic([0.6, 0.8])
    _, parts = L.critic_loss_d1(critic, np.ones((4, 2)), np.zeros((4, 2)), 10.0, np.random.default_rng(0),
                                return_parts=True)
    assert parts["gp"] == pytest.approx(0.0, abs=1e-24)


def test_linear_critic_penalty_160():
    _, critic = linear_critic([3.0, 4.0])
    y, g = np.random.default_rng(0).standard_normal((4, 2)), np.random.default_rng(1).standard_normal((4, 2))
    loss, parts = L.critic_loss_d1(critic, y, g, 10.0, np.random.default_rng(2), return_parts=True)
    assert 10.0 * parts["gp"] == pytest.approx(160.0, abs=1e-9)
    assert loss.item() == pytest.approx(parts["d1_fake"] - parts["d1_real"] + 160.0, abs=1e-9)


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, 3, elements=st.floats(-2, 2)))
def test_penalty_zero_iff_unit_norm(w):
    _, critic = linear_critic(w)
    _, parts = L.critic_loss_d1(critic, np.ones((2, 3)), np.zeros((2, 3)), 1.0, np.random.default_rng(0),
                                return_parts=True)
    norm = np.linalg.norm(w)
    assert parts["gp"] == pytest.approx((norm - 1) ** 2, abs=1e-12)


def test_critic_loss_detaches_generator_output():
    _, critic = linear_critic([1.0, 2.0])
    g = Tensor(np.zeros((2, 2)), requires_grad=True)
    loss = L.critic_loss_d1(critic, np.ones((2, 2)), g, 1.0, np.random.default_rng(0))
    np.testing.assert_array_equal(ad.backward(loss)[g], 0)


def test_batch_stat_critic_on_penalty_path_rejected():
    gamma, beta = Tensor(np.ones(1), requires_grad=True), Tensor(np.zeros(1), requires_grad=True)

    def critic(x):
        y, _, _ = ad.batchnorm_train(x, gamma, beta)
        return ad.sum_(y, axis=(1, 2, 3))

    with pytest.raises(SecondOrderUnsupportedError):
        L.critic_loss_d1(critic, np.ones((2, 1, 4, 4)), np.zeros((2, 1, 4, 4)), 1.0, np.random.default_rng(0))


def test_batch_norm_critic_uses_frozen_statistics():
    d1 = build_global_discriminator(8, widths=(2, 2, 2), conv_width=2, fc_widths=(4,), norm_kind="batch",
                                    dtype=np.float64)
    rng = np.random.default_rng(0)
    loss = L.critic_loss_d1(d1, rng.standard_normal((3, 1, 8, 8)), rng.standard_normal((3, 1, 8, 8)), 10.0, rng)
    assert np.isfinite(loss.item())
    assert len(ad.backward(loss)) > 0


# global adversarial term

def test_gen_adv1_examples():
    assert L.gen_adv1(lambda x: Tensor(np.full(4, 3.0)), None).item() == -3.0
    assert L.gen_adv1(lambda x: Tensor(np.array([1.0, -1.0])), None).item() == 0.0
    d1 = build_global_discriminator(8, widths=(2, 2, 2), conv_width=2, fc_widths=(4,), dtype=np.float64)
    for p in d1.parameters().values():
        p.data[...] = 0
    assert L.gen_adv1(d1, Tensor(np.ones((2, 1, 8, 8)))).item() == 0.0


# binary cross-entropy

def test_bce_perfect_is_zero():
    assert L.bce_map(np.ones((2, 2)), 1.0).item() == pytest.approx(0.0, abs=1e-6)


def test_bce_half_sum_and_mean():
    q = np.full((2, 2), 0.5)
    assert L.bce_map(q, 1.0, "sum").item() == pytest.approx(4 * math.log(2), abs=1e-12)
    assert L.bce_map(q, 1.0, "mean").item() == pytest.approx(math.log(2), abs=1e-12)


def test_bce_sum_averages_batch():
    q = np.full((3, 1, 2, 2), 0.5)
    assert L.bce_map(q, 1.0, "sum").item() == pytest.approx(4 * math.log(2), abs=1e-12)


def test_bce_clamps_exact_zero():
    v = L.bce_map(np.zeros((2, 2)), 1.0).item()
    assert np.isfinite(v) and v == pytest.approx(-math.log(1e-7), rel=1e-9)


def test_bce_label_map():
    q_hat = np.array([[0.9, 0.2], [0.6, 0.3]])
    q = np.array([[1, 0], [1, 0]])
    expected = -np.mean(q * np.log(q_hat) + (1 - q) * np.log(1 - q_hat))
    assert L.bce_map(q_hat, q).item() == pytest.approx(expected, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (3, 3), elements=st.floats(0, 1)))
def test_bce_always_finite(q_hat):
    assert np.isfinite(L.bce_map(q_hat, 1.0).item()) and np.isfinite(L.bce_map(q_hat, 0.0, "sum").item())


def test_d2_loss_half_everywhere():
    half = lambda x: Tensor(np.full(x.shape, 0.5))  # noqa: E731
    y = np.zeros((2, 1, 4, 4))
    assert L.d2_loss(half, y, y).item() == pytest.approx(2 * math.log(2), abs=1e-12)


def test_d2_loss_perfect_discriminator():
    perfect = lambda x: Tensor((x.data > 0).astype(float))  # noqa: E731
    assert L.d2_loss(perfect, np.ones((1, 1, 4, 4)), -np.ones((1, 1, 4, 4))).item() < 1e-6


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, 16, elements=st.floats(0.01, 0.99)), arrays(np.float64, 16, elements=st.floats(0.01, 0.99)),
       st.permutations(list(range(16))))
def test_d2_loss_pixel_order_symmetry(a, b, perm):
    table = {}

    def d2(x):
        return Tensor(table[x.data.tobytes()])

    y, g = np.arange(16.0).reshape(1, 1, 4, 4), -np.arange(16.0).reshape(1, 1, 4, 4)
    table[y.tobytes()], table[g.tobytes()] = a.reshape(1, 1, 4, 4), b.reshape(1, 1, 4, 4)
    base = L.d2_loss(d2, y, g).item()
    yp, gp = y.ravel()[perm].reshape(y.shape), g.ravel()[perm].reshape(g.shape)
    table[yp.tobytes()], table[gp.tobytes()] = a[perm].reshape(1, 1, 4, 4), b[perm].reshape(1, 1, 4, 4)
    assert L.d2_loss(d2, yp, gp).item() == pytest.approx(base, rel=1e-12)


def test_gen_adv2_examples():
    assert L.gen_adv2(lambda x: Tensor(np.ones((1, 1, 4, 4))), None).item() < 1e-6
    assert L.gen_adv2(lambda x: Tensor(np.full((1, 1, 4, 4), 0.5)), None).item() == pytest.approx(math.log(2))


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (1, 1, 2, 2), elements=st.floats(0.01, 0.9)), st.floats(0.001, 0.09))
def test_gen_adv2_monotone(m, delta):
    lo = L.gen_adv2(lambda x: Tensor(m), None).item()
    hi = L.gen_adv2(lambda x: Tensor(m + delta), None).item()
    assert hi < lo


# attention

def test_attention_weight_examples():
    np.testing.assert_array_equal(L.attention_weights(np.zeros(3), 2.0), 1.0)
    np.testing.assert_array_equal(L.attention_weights(np.random.default_rng(0).random(5), 0.0), 1.0)
    assert L.attention_weights(np.array(0.75), 2.0) == 0.0625


def test_attention_weights_are_constants():
    m = Tensor(np.full((2, 2), 0.3), requires_grad=True)
    assert isinstance(L.attention_weights(m, 1.0), np.ndarray)


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1), st.floats(0, 5), st.floats(0, 5))
def test_attention_monotone(m1, m2, b1, b2):
    lo_m, hi_m = sorted((m1, m2))
    lo_b, hi_b = sorted((b1, b2))
    assert L.attention_weights(np.array(hi_m), lo_b) <= L.attention_weights(np.array(lo_m), lo_b)
    if hi_m > 0:
        assert L.attention_weights(np.array(hi_m), hi_b) <= L.attention_weights(np.array(hi_m), lo_b)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (2, 1, 3, 3), elements=floats), arrays(np.float64, (2, 1, 3, 3), elements=floats),
       st.sampled_from([1, 2]))
def test_unit_attention_equals_recon_bitwise(y, g, p):
    a = L.attention_recon_loss(y, g, np.ones_like(y), p).item()
    b = L.recon_loss(y, g, p).item()
    assert a == b


def test_attention_recon_examples():
    y = np.random.default_rng(0).standard_normal((1, 1, 3, 3))
    assert L.attention_recon_loss(y, y, np.random.default_rng(1).random(y.shape), 1).item() == 0.0
    assert L.attention_recon_loss(np.array([2.0]), np.array([0.0]), np.array([0.25]), 1).item() == 0.5


def test_attention_recon_shape_mismatch():
    with pytest.raises(DimensionError):
        L.attention_recon_loss(np.zeros((2, 2)), np.zeros((2, 2)), np.ones((3, 2)))


# total

def test_total_example():
    assert L.total_gen_loss(1.0, 2.0, 3.0, L.LossWeights()).item() == pytest.approx(1.4, abs=1e-12)


def test_total_with_zero_adversarial_weights():
    w = L.LossWeights(lambda1=0.0, lambda2=0.0)
    assert L.total_gen_loss(0.7, 5.0, -3.0, w).item() == 0.7


def test_total_gradient_is_weighted_sum():
    x = Tensor(np.array([0.3, -0.7, 1.1]), requires_grad=True)
    parts = [ad.sum_(ad.mul(x, x)), ad.sum_(ad.sigmoid(x)), ad.sum_(ad.exp(x))]
    w = L.LossWeights()
    total_grad = ad.backward(L.total_gen_loss(*parts, w))[x]
    expected = 2 * x.data + w.lambda1 * (lambda s: s * (1 - s))(1 / (1 + np.exp(-x.data))) + w.lambda2 * np.exp(x.data)
    np.testing.assert_allclose(total_grad, expected, rtol=1e-12)


def test_loss_gradients_match_finite_differences():
    from dualsynth.gradcheck import loss_cases

    for name, thunk in loss_cases(np.random.default_rng(3)):
        rep = thunk()
        assert rep.passed, f"{name}: {rep}"
