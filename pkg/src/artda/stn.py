"""Differentiable affine spatial transformer and its adversarial wrapper.

Coordinates follow the normalized convention: the output pixel ``(i, j)``
sits at ``(2j/(W-1) - 1, 2i/(H-1) - 1)`` and the affine matrix maps it to a
source location ``(u, v)`` in the same [-1, 1] square.  Source locations
outside the image read zeros.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .model import Module, check_image_shape, conv_pool_relu, dense, init_module
from .tensor import Function, Tensor

IDENTITY_AFFINE = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
AFFINE_CAP = np.array([[0.3, 0.3, 0.5], [0.3, 0.3, 0.5]])


def _snap(px: np.ndarray) -> np.ndarray:
    # pull coordinates within a few ulps of a pixel center onto it, so the
    # identity grid reproduces its input exactly
    nearest = np.rint(px)
    tol = 64 * np.finfo(px.dtype).eps * max(1.0, float(np.max(np.abs(px), initial=1.0)))
    return np.where(np.abs(px - nearest) <= tol, nearest, px)


def _corners(grid: np.ndarray, h: int, w: int):
    upx = _snap((grid[..., 0] + 1) * ((w - 1) / 2))
    vpx = _snap((grid[..., 1] + 1) * ((h - 1) / 2))
    x0 = np.floor(upx).astype(np.int64)
    y0 = np.floor(vpx).astype(np.int64)
    wx1 = (upx - x0).astype(grid.dtype)
    wy1 = (vpx - y0).astype(grid.dtype)
    return upx, vpx, x0, y0, 1 - wx1, wx1, 1 - wy1, wy1


def _gather(img_bhwc: np.ndarray, b_idx, yy, xx):
    """Values at integer (yy, xx) with zeros outside; returns (B, Ho, Wo, C)."""
    _, h, w, _ = img_bhwc.shape
    valid = (xx >= 0) & (xx < w) & (yy >= 0) & (yy < h)
    vals = img_bhwc[b_idx, np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)]
    return vals * valid[..., None].astype(vals.dtype), valid


def sample_bilinear_array(images: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """Plain-array bilinear sampler: NCHW images, (B, Ho, Wo, 2) grid."""
    return BilinearSample().forward(images, grid.astype(images.dtype, copy=False))


class BilinearSample(Function):
    """out(i,j) = sum_nm x(n,m) * max(0, 1-|u_px-m|) * max(0, 1-|v_px-n|)."""

    kind = "bilinear_sample"

    def __init__(self, *inputs):
        super().__init__(*inputs)
        if not inputs:
            self.needs_grad = (False, False)

    def forward(self, x, grid):
        if x.ndim != 4 or grid.ndim != 4 or grid.shape[-1] != 2 or grid.shape[0] != x.shape[0]:
            raise T.ShapeError(f"bilinear_sample: need NCHW images and (B, Ho, Wo, 2) grid, "
                               f"got {x.shape} and {grid.shape}")
        b, c, h, w = x.shape
        upx, vpx, x0, y0, wx0, wx1, wy0, wy1 = _corners(grid, h, w)
        img = np.ascontiguousarray(x.transpose(0, 2, 3, 1))
        b_idx = np.arange(b)[:, None, None]
        v00, m00 = _gather(img, b_idx, y0, x0)
        v01, m01 = _gather(img, b_idx, y0, x0 + 1)
        v10, m10 = _gather(img, b_idx, y0 + 1, x0)
        v11, m11 = _gather(img, b_idx, y0 + 1, x0 + 1)
        out = (v00 * (wy0 * wx0)[..., None] + v01 * (wy0 * wx1)[..., None]
               + v10 * (wy1 * wx0)[..., None] + v11 * (wy1 * wx1)[..., None])
        if any(self.needs_grad):
            self.saved = (x.shape, upx, vpx, x0, y0, wx0, wx1, wy0, wy1,
                          (v00, v01, v10, v11), (m00, m01, m10, m11))
        return np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def backward(self, grad):
        (shape, upx, vpx, x0, y0, wx0, wx1, wy0, wy1,
         (v00, v01, v10, v11), masks) = self.saved
        b, c, h, w = shape
        g = grad.transpose(0, 2, 3, 1)  # (B, Ho, Wo, C)
        gx = ggrid = None
        if self.needs_grad[0]:
            flat = np.zeros(b * h * w * c, dtype=np.float64)
            b_idx = np.arange(b)[:, None, None]
            chan = np.arange(c)
            for (dy, dx), weight, mask in zip(
                    ((0, 0), (0, 1), (1, 0), (1, 1)),
                    (wy0 * wx0, wy0 * wx1, wy1 * wx0, wy1 * wx1), masks):
                yy = np.clip(y0 + dy, 0, h - 1)
                xx = np.clip(x0 + dx, 0, w - 1)
                base = ((b_idx * h + yy) * w + xx) * c
                idx = base[..., None] + chan
                contrib = g * (weight * mask)[..., None]
                flat += np.bincount(idx.ravel(), weights=contrib.ravel(), minlength=flat.size)
            gx = flat.reshape(b, h, w, c).transpose(0, 3, 1, 2).astype(grad.dtype)
        if self.needs_grad[1]:
            d_upx = np.sum(g * (wy0[..., None] * (v01 - v00) + wy1[..., None] * (v11 - v10)), axis=-1)
            d_vpx = np.sum(g * (wx0[..., None] * (v10 - v00) + wx1[..., None] * (v11 - v01)), axis=-1)
            ggrid = np.stack([d_upx * ((w - 1) / 2), d_vpx * ((h - 1) / 2)], axis=-1).astype(grad.dtype)
        return gx, ggrid

    def kink_distance(self):
        if not self.needs_grad[1]:
            return np.inf
        shape, upx, vpx = self.saved[:3]
        h, w = shape[2], shape[3]
        du = np.min(np.abs(upx - np.rint(upx))) / ((w - 1) / 2)
        dv = np.min(np.abs(vpx - np.rint(vpx))) / ((h - 1) / 2)
        return float(min(du, dv))

    def pattern(self):
        if not any(self.needs_grad):
            return None
        x0, y0 = self.saved[3:5]
        return np.stack([x0, y0])


def bilinear_sample(x, grid) -> Tensor:
    return BilinearSample.apply(x, grid)


def base_grid(out_h: int, out_w: int, dtype=np.float64) -> np.ndarray:
    """Rows ``(u~, v~, 1)`` for every output pixel in row-major order."""
    if out_h < 2 or out_w < 2:
        raise ValueError(f"grid needs out_h, out_w >= 2, got {out_h}x{out_w}")
    j = np.arange(out_w)
    i = np.arange(out_h)
    ut = 2.0 * j / (out_w - 1) - 1.0
    vt = 2.0 * i / (out_h - 1) - 1.0
    uu, vv = np.meshgrid(ut, vt)
    return np.stack([uu.ravel(), vv.ravel(), np.ones(out_h * out_w)], axis=1).astype(dtype)


def generate_grid(phi, out_h: int, out_w: int) -> Tensor:
    """Sampling grid (B, out_h, out_w, 2) with ``(u, v) = phi @ (u~, v~, 1)``."""
    phi = T.as_tensor(phi)
    if phi.ndim != 3 or phi.shape[1:] != (2, 3):
        raise T.ShapeError(f"generate_grid: phi must be (B, 2, 3), got {phi.shape}")
    base = base_grid(out_h, out_w, dtype=phi.dtype)
    coords = T.matmul(base, T.transpose(phi, (0, 2, 1)))  # (B, HW, 2)
    return T.reshape(coords, (phi.shape[0], out_h, out_w, 2))


class LocalizationNet(Module):
    """conv(8)-pool-relu, conv(16)-pool-relu, dense(32)-relu, dense(6).

    The output layer starts at zero, so the initial transform is the identity.
    """

    def __init__(self, input_shape=(3, 32, 32)):
        super().__init__()
        c, h, w = input_shape
        if h % 4 or w % 4:
            raise ValueError(f"input height and width must be multiples of 4, got {h}x{w}")
        self.input_shape = (c, h, w)
        self.flat = 16 * (h // 4) * (w // 4)

    def shapes(self):
        c = self.input_shape[0]
        return {
            "conv1.w": (8, c, 3, 3), "conv1.b": (8,),
            "conv2.w": (16, 8, 3, 3), "conv2.b": (16,),
            "fc1.w": (self.flat, 32), "fc1.b": (32,),
            "fc2.w": (32, 6), "fc2.b": (6,),
        }

    def raw(self, x) -> Tensor:
        check_image_shape(x, self.input_shape, "localization net")
        p = self.params
        h = conv_pool_relu(x, p["conv1.w"], p["conv1.b"])
        h = conv_pool_relu(h, p["conv2.w"], p["conv2.b"])
        h = T.reshape(h, (h.shape[0], self.flat))
        h = T.relu(dense(h, p["fc1.w"], p["fc1.b"]))
        return dense(h, p["fc2.w"], p["fc2.b"])


def init_localization(seed, input_shape=(3, 32, 32)) -> LocalizationNet:
    net = LocalizationNet(input_shape)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    init_module(net, net.shapes(), rng, zero=("fc2.w",))
    return net


def localize(x, net: LocalizationNet) -> Tensor:
    """Affine parameters ``phi_id + cap * tanh(raw)``, shape (B, 2, 3)."""
    raw = net.raw(x)
    dtype = raw.dtype
    cap = AFFINE_CAP.reshape(1, 6).astype(dtype)
    ident = IDENTITY_AFFINE.reshape(1, 6).astype(dtype)
    phi = T.add(ident, T.mul(cap, T.tanh(raw)))
    return T.reshape(phi, (raw.shape[0], 2, 3))


def spatial_transform(x, net: LocalizationNet) -> Tensor:
    """T(x): localize, build the grid, resample bilinearly."""
    x = T.as_tensor(x)
    phi = localize(x, net)
    grid = generate_grid(phi, x.shape[2], x.shape[3])
    return bilinear_sample(x, grid)


def adversarial_transform(x, net: LocalizationNet) -> Tensor:
    """R(T(x)): forward equals T(x); gradients reaching the STN are negated."""
    return T.grad_reverse(spatial_transform(x, net))
