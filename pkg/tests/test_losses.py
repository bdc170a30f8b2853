import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp
from scipy import special, stats

from artda import tensor as T
from artda.data import TARGET
from artda.losses import (LossContractError, LossWeights, cross_entropy, entropy_min,
                          kl_consistency, total_loss)


@pytest.fixture(autouse=True)
def float64():
    with T.default_dtype(np.float64):
        yield


def logp(p):
    with np.errstate(divide="ignore"):
        return np.log(np.asarray(p, dtype=np.float64))


def test_cross_entropy_examples():
    assert cross_entropy(np.zeros((2, 1)) + logp([[1.0]]), [0, 0]).item() == 0.0
    assert cross_entropy(logp(np.full((3, 5), 0.2)), [0, 3, 4]).item() == pytest.approx(math.log(5))
    lp = logp([[0.9, 0.1], [0.4, 0.6]])
    assert cross_entropy(lp, [0, 1]).item() == pytest.approx(-(math.log(0.9) + math.log(0.6)) / 2, abs=1e-15)


def test_cross_entropy_rejects_bad_labels_and_target_tags():
    with pytest.raises(ValueError):
        cross_entropy(logp(np.full((2, 3), 1 / 3)), [0, 3])
    with pytest.raises(LossContractError):
        cross_entropy(logp(np.full((2, 3), 1 / 3)), [0, 1], domain_tags=[0, TARGET])


def test_kl_examples():
    p = logp([[0.3, 0.7], [0.5, 0.5]])
    assert abs(kl_consistency(p, p).item()) <= 1e-9
    assert kl_consistency(logp([[1.0, 0.0]]), logp([[0.5, 0.5]])).item() == pytest.approx(math.log(2), abs=1e-12)


def test_kl_matches_scipy_rel_entr():
    rng = np.random.default_rng(0)
    a = special.softmax(rng.standard_normal((6, 4)), axis=1)
    b = special.softmax(rng.standard_normal((6, 4)), axis=1)
    want = special.rel_entr(a, b).sum(axis=1).mean()
    assert kl_consistency(np.log(a), np.log(b)).item() == pytest.approx(want, abs=1e-12)


def test_kl_gradient_only_through_augmented_side():
    rng = np.random.default_rng(1)
    z_clean = T.Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    z_aug = T.Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    clean = T.log_softmax(z_clean)
    kl_consistency(T.stop_gradient(clean), T.log_softmax(z_aug)).backward()
    assert z_clean.grad is None
    assert np.any(z_aug.grad != 0)
    # passing a graph-attached clean side still never differentiates it
    z_clean.grad = None
    kl_consistency(clean, T.log_softmax(z_aug)).backward()
    assert z_clean.grad is None


def test_kl_shape_mismatch():
    with pytest.raises(T.ShapeError):
        kl_consistency(np.zeros((2, 3)), np.zeros((3, 3)))


@settings(max_examples=60, deadline=None)
@given(hnp.arrays(np.float64, (3, 4), elements=st.floats(-20, 20)),
       hnp.arrays(np.float64, (3, 4), elements=st.floats(-20, 20)))
def test_kl_nonnegative(za, zb):
    value = kl_consistency(special.log_softmax(za, axis=1), special.log_softmax(zb, axis=1)).item()
    assert value >= -1e-12


def test_entropy_examples():
    assert entropy_min(logp([[1.0, 0.0, 0.0]])).item() == pytest.approx(0.0, abs=1e-9)
    assert entropy_min(logp(np.full((2, 7), 1 / 7))).item() == pytest.approx(math.log(7), abs=1e-9)
    want = -(0.75 * math.log(0.75) + 0.25 * math.log(0.25))
    assert entropy_min(logp([[0.75, 0.25]])).item() == pytest.approx(want, abs=1e-15)


@settings(max_examples=60, deadline=None)
@given(hnp.arrays(np.float64, (4, 5), elements=st.floats(-30, 30)))
def test_entropy_bounds_and_scipy(z):
    lp = special.log_softmax(z, axis=1)
    value = entropy_min(lp).item()
    assert -1e-12 <= value <= math.log(5) + 1e-12
    assert value == pytest.approx(stats.entropy(np.exp(lp), axis=1).mean(), abs=1e-9)


def one():
    return T.Tensor(np.array(1.0), requires_grad=True)


def test_total_loss_weighted_sum():
    parts = {"l_m": one(), "l_c": one(), "l_e": one(), "l_adv": one()}
    assert total_loss("DA", parts, LossWeights(0.5, 0.1, 0.2)).item() == pytest.approx(1.8)
    assert total_loss("DA", parts, LossWeights(0, 0, 0)).item() == 1.0
    dg = {k: v for k, v in parts.items() if k != "l_e"}
    assert total_loss("DG", dg, LossWeights(1.0, 0.1, 0.5)).item() == pytest.approx(2.5)


def test_total_loss_contracts():
    parts = {"l_m": one(), "l_c": one()}
    with pytest.raises(LossContractError):
        total_loss("DG", parts, LossWeights(), domain_tags=[0, 1, TARGET])
    with pytest.raises(LossContractError):
        total_loss("DA", parts, LossWeights(), domain_tags=[0, 1])
    with pytest.raises(LossContractError):
        total_loss("DG", {**parts, "l_e": one()}, LossWeights())
    with pytest.raises(ValueError):
        LossWeights(lambda_c=-1)


def test_adversarial_term_gradient_sign():
    rng = np.random.default_rng(2)
    theta = T.Tensor(rng.standard_normal(3), requires_grad=True)
    target = special.log_softmax(rng.standard_normal((1, 3)), axis=1)

    def kl(reversed_):
        z = T.grad_reverse(theta) if reversed_ else theta
        return kl_consistency(target, T.log_softmax(T.reshape(z, (1, 3))))

    total_loss("DG", {"l_m": T.Tensor(np.array(0.0)), "l_adv": kl(True)}, LossWeights(lambda_t=0.3)).backward()
    g_total = theta.grad.copy()
    theta.grad = None
    kl(False).backward()
    np.testing.assert_allclose(g_total, -0.3 * theta.grad, atol=1e-15)
