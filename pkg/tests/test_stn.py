import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from artda import stn
from artda import tensor as T
from artda.losses import kl_consistency
from artda.model import init_classifier, predict_logprobs


@pytest.fixture(autouse=True)
def float64():
    with T.default_dtype(np.float64):
        yield


def kernel_sample(x, grid):
    """Literal double sum of the bilinear kernel over every source pixel."""
    b, c, h, w = x.shape
    _, ho, wo, _ = grid.shape
    out = np.zeros((b, c, ho, wo))
    m = np.arange(w)[None, :]
    n = np.arange(h)[:, None]
    for k in range(b):
        for i in range(ho):
            for j in range(wo):
                u, v = grid[k, i, j]
                upx, vpx = (u + 1) * (w - 1) / 2, (v + 1) * (h - 1) / 2
                weight = np.maximum(0, 1 - np.abs(upx - m)) * np.maximum(0, 1 - np.abs(vpx - n))
                out[k, :, i, j] = np.tensordot(x[k], weight, axes=([1, 2], [0, 1]))
    return out


def test_bilinear_matches_kernel_formula():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 3, 5, 6))
    grid = rng.uniform(-1.3, 1.3, (2, 4, 7, 2))
    np.testing.assert_allclose(stn.bilinear_sample(x, grid).data, kernel_sample(x, grid), atol=1e-12)


def test_identity_grid_reproduces_input_exactly():
    rng = np.random.default_rng(1)
    for dtype in (np.float32, np.float64):
        x = rng.uniform(0, 1, (3, 3, 32, 32)).astype(dtype)
        phi = np.broadcast_to(stn.IDENTITY_AFFINE, (3, 2, 3)).astype(dtype)
        grid = stn.generate_grid(phi, 32, 32).data
        out = stn.bilinear_sample(x, grid).data
        assert np.array_equal(out, x)


def test_midpoint_is_average():
    x = np.zeros((1, 1, 2, 3))
    x[0, 0, 0, 0], x[0, 0, 0, 1] = 0.2, 0.6
    # u_px = 0.5 lies midway between columns 0 and 1, v_px = 0 on row 0
    grid = np.array([[[[0.5 * 2 / 2 - 1, -1.0]]]])
    assert stn.bilinear_sample(x, grid).data.item() == pytest.approx(0.4)


def test_grid_identity_and_translation():
    ident = stn.generate_grid(stn.IDENTITY_AFFINE[None], 5, 4).data[0]
    j = np.arange(4)
    i = np.arange(5)
    np.testing.assert_array_equal(ident[..., 0], np.broadcast_to(2 * j / 3 - 1, (5, 4)))
    np.testing.assert_array_equal(ident[..., 1], np.broadcast_to((2 * i / 4 - 1)[:, None], (5, 4)))
    phi = np.array([[[1.0, 0, 0.5], [0, 1.0, 0]]])
    # on a 5x21 grid, pixel (1, 13) sits at (u~, v~) = (0.3, -0.5)
    grid = stn.generate_grid(phi, 5, 21).data[0]
    assert grid[1, 13] == pytest.approx([0.8, -0.5], abs=1e-15)


def test_grid_rotation_oracle():
    th = 0.3
    rot = np.array([[[np.cos(th), -np.sin(th), 0], [np.sin(th), np.cos(th), 0]]])
    got = stn.generate_grid(rot, 6, 6).data[0]
    base = stn.generate_grid(stn.IDENTITY_AFFINE[None], 6, 6).data[0]
    want = np.stack([np.cos(th) * base[..., 0] - np.sin(th) * base[..., 1],
                     np.sin(th) * base[..., 0] + np.cos(th) * base[..., 1]], axis=-1)
    np.testing.assert_allclose(got, want, atol=1e-15)


def test_grid_rejects_tiny_output():
    with pytest.raises(ValueError):
        stn.generate_grid(stn.IDENTITY_AFFINE[None], 1, 4)


def test_zero_init_localization_is_identity():
    net = stn.init_localization(0, (3, 16, 16))
    x = np.random.default_rng(2).uniform(0, 1, (4, 3, 16, 16))
    phi = stn.localize(T.Tensor(x), net).data
    np.testing.assert_array_equal(phi, np.broadcast_to(stn.IDENTITY_AFFINE, (4, 2, 3)))
    assert np.array_equal(stn.adversarial_transform(T.Tensor(x), net).data, x)


@settings(max_examples=25, deadline=None)
@given(st.floats(-1e3, 1e3), st.integers(0, 5))
def test_phi_stays_inside_cap(raw_value, slot):
    net = stn.init_localization(0, (1, 8, 8))
    bias = np.zeros(6)
    bias[slot] = raw_value
    net.params["fc2.b"].data = bias
    phi = stn.localize(T.Tensor(np.zeros((1, 1, 8, 8))), net).data[0]
    lo, hi = stn.IDENTITY_AFFINE - stn.AFFINE_CAP, stn.IDENTITY_AFFINE + stn.AFFINE_CAP
    assert np.all((lo <= phi) & (phi <= hi))
    if abs(raw_value) < 10:
        assert np.all((lo < phi) & (phi < hi))


def test_grl_gradient_is_negated_plain_gradient():
    rng = np.random.default_rng(4)
    net = stn.init_localization(rng, (1, 8, 8))
    net.params["fc2.w"].data = 0.3 * rng.standard_normal((32, 6))
    clf = init_classifier(rng, 3, (1, 8, 8))
    x = T.Tensor(rng.uniform(0, 1, (3, 1, 8, 8)))
    clean = predict_logprobs(x, clf).data

    def grads(transform):
        for p in net.parameters():
            p.grad = None
        kl_consistency(clean, predict_logprobs(transform(x, net), clf)).backward()
        return [p.grad.copy() for p in net.parameters()]

    plain = grads(stn.spatial_transform)
    reversed_ = grads(stn.adversarial_transform)
    for a, b in zip(plain, reversed_):
        np.testing.assert_array_equal(b, -a)


def test_sampler_zero_fill_outside():
    x = np.ones((1, 1, 4, 4))
    grid = np.full((1, 1, 1, 2), 3.0)
    assert stn.bilinear_sample(x, grid).data.item() == 0.0
