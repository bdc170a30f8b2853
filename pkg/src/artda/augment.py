"""RandAugment-style image transformations on CHW float images in [0, 1].

Magnitudes are normalized to [0, 10] and mapped linearly onto each op's
range.  Geometric ops resample bilinearly with zero fill, and shear,
translate and rotate get a random sign.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import ImageBatch
from .stn import sample_bilinear_array

log = logging.getLogger(__name__)

MAX_LEVEL = 10.0
REFERENCE_WIDTH = 224
LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class AugmentOp:
    name: str
    magnitude_type: str  # "continuous", "discrete" or "none"
    lo: float | None = None
    hi: float | None = None
    group: str = "other"


OPS: dict[str, AugmentOp] = {op.name: op for op in (
    AugmentOp("ShearX", "continuous", 0.0, 0.3, "geometric"),
    AugmentOp("ShearY", "continuous", 0.0, 0.3, "geometric"),
    AugmentOp("TranslateX", "continuous", 0.0, 100.0, "geometric"),
    AugmentOp("TranslateY", "continuous", 0.0, 100.0, "geometric"),
    AugmentOp("Rotate", "continuous", 0.0, 30.0, "geometric"),
    AugmentOp("Flip", "none", group="geometric"),
    AugmentOp("Solarize", "discrete", 0, 255, "color"),
    AugmentOp("Posterize", "discrete", 0, 4, "color"),
    AugmentOp("Invert", "none", group="color"),
    AugmentOp("Contrast", "continuous", 0.1, 1.9, "color"),
    AugmentOp("Color", "continuous", 0.1, 1.9, "color"),
    AugmentOp("Brightness", "continuous", 0.1, 1.9, "color"),
    AugmentOp("Sharpness", "continuous", 0.1, 1.9, "color"),
    AugmentOp("AutoContrast", "none", group="color"),
    AugmentOp("Equalize", "none", group="color"),
    AugmentOp("CutOut", "discrete", 0, 40, "other"),
    AugmentOp("SamplePairing", "continuous", 0.0, 0.4, "other"),
)}

OP_SETS: dict[str, tuple[str, ...]] = {
    "rnd-all": tuple(OPS),
    "rnd-color": tuple(n for n, op in OPS.items() if op.group == "color"),
    "rnd-geo": tuple(n for n, op in OPS.items() if op.group == "geometric"),
}


@dataclass(frozen=True)
class AugmentPolicy:
    n_aug: int = 2
    m_aug: float = 9.0
    seed: int | None = None

    def __post_init__(self):
        if self.n_aug < 0:
            raise ValueError(f"n_aug must be >= 0, got {self.n_aug}")
        if not 0 <= self.m_aug <= MAX_LEVEL:
            raise ValueError(f"m_aug must lie in [0, 10], got {self.m_aug}")


def _op(op) -> AugmentOp:
    if isinstance(op, AugmentOp):
        return op
    try:
        return OPS[op]
    except KeyError:
        raise ValueError(f"unknown augmentation {op!r}; known: {', '.join(OPS)}") from None


def resolve_op_set(op_set) -> tuple[str, ...]:
    if isinstance(op_set, str):
        if op_set in OP_SETS:
            return OP_SETS[op_set]
        op_set = [op_set]
    names = tuple(_op(o).name for o in op_set)
    if not names:
        raise ValueError("op_set is empty")
    return names


def denormalize_magnitude(op, m: float):
    """Map a normalized magnitude in [0, 10] onto the op's own range."""
    op = _op(op)
    if not 0 <= m <= MAX_LEVEL:
        raise ValueError(f"{op.name}: normalized magnitude must lie in [0, 10], got {m}")
    if op.magnitude_type == "none":
        return None
    value = op.lo + (m / MAX_LEVEL) * (op.hi - op.lo)
    if op.magnitude_type == "discrete":
        return int(np.floor(value + 0.5))
    return float(value)


def sample_policy(policy: AugmentPolicy, op_set, rng: np.random.Generator):
    """Draw ``n_aug`` ops uniformly with replacement, each at magnitude ``m_aug``."""
    names = resolve_op_set(op_set)
    picks = rng.integers(0, len(names), size=policy.n_aug)
    return [(names[k], denormalize_magnitude(names[k], policy.m_aug)) for k in picks]


# pixel kernels -----------------------------------------------------------

def _luma(img: np.ndarray) -> np.ndarray:
    if img.shape[0] == 1:
        return img[0]
    return np.tensordot(LUMA.astype(img.dtype), img[:3], axes=1)


def _blend(degenerate: np.ndarray, img: np.ndarray, factor: float) -> np.ndarray:
    return degenerate + img.dtype.type(factor) * (img - degenerate)


def _to_uint8(img: np.ndarray) -> np.ndarray:
    return np.floor(np.clip(img, 0, 1) * 255 + 0.5).astype(np.int64)


def warp_affine(img: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    """Resample ``img`` where output pixel (x, y) reads source ``matrix @ (x, y, 1)``."""
    c, h, w = img.shape
    ys, xs = np.mgrid[0:h, 0:w]
    pts = np.stack([xs.ravel(), ys.ravel(), np.ones(h * w)])
    src = matrix @ pts
    u = 2.0 * src[0] / (w - 1) - 1.0
    v = 2.0 * src[1] / (h - 1) - 1.0
    grid = np.stack([u, v], axis=-1).reshape(1, h, w, 2)
    return sample_bilinear_array(img[None], grid)[0]


def _centered(h: int, w: int, linear: np.ndarray) -> np.ndarray:
    cx, cy = (w - 1) / 2, (h - 1) / 2
    offset = np.array([cx, cy]) - linear @ np.array([cx, cy])
    return np.hstack([linear, offset[:, None]])


def shear_x(img, factor):
    _, h, w = img.shape
    return warp_affine(img, _centered(h, w, np.array([[1.0, factor], [0.0, 1.0]])))


def shear_y(img, factor):
    _, h, w = img.shape
    return warp_affine(img, _centered(h, w, np.array([[1.0, 0.0], [factor, 1.0]])))


def translate(img, dx, dy):
    """Move content by (dx, dy) pixels."""
    return warp_affine(img, np.array([[1.0, 0.0, -dx], [0.0, 1.0, -dy]]))


def rotate(img, degrees):
    """Counter-clockwise rotation about the image center."""
    _, h, w = img.shape
    t = np.deg2rad(degrees)
    linear = np.array([[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]])
    return warp_affine(img, _centered(h, w, linear))


def flip(img):
    return img[:, :, ::-1].copy()


def solarize(img, threshold):
    t = threshold / 255.0
    return np.where(img >= t, 1 - img, img)


def posterize(img, bits):
    """Keep the ``bits`` most significant bits of each 8-bit value (at least 1)."""
    keep = min(8, max(1, int(bits)))
    mask = (0xFF << (8 - keep)) & 0xFF
    return ((_to_uint8(img) & mask) / 255.0).astype(img.dtype)


def invert(img):
    return 1 - img


def contrast(img, factor):
    return _blend(np.full_like(img, _luma(img).mean()), img, factor)


def color(img, factor):
    return _blend(np.broadcast_to(_luma(img), img.shape), img, factor)


def brightness(img, factor):
    return _blend(np.zeros_like(img), img, factor)


def sharpness(img, factor):
    # smoothing kernel [[1,1,1],[1,5,1],[1,1,1]] / 13 inside, borders kept
    smooth = img.copy()
    _, h, w = img.shape
    if h >= 3 and w >= 3:
        acc = 4 * img[:, 1:-1, 1:-1]
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                acc = acc + img[:, 1 + dy:h - 1 + dy, 1 + dx:w - 1 + dx]
        smooth[:, 1:-1, 1:-1] = acc / 13
    return _blend(smooth, img, factor)


def autocontrast(img):
    out = img.copy()
    for ch in range(img.shape[0]):
        lo, hi = img[ch].min(), img[ch].max()
        if hi > lo:
            out[ch] = (img[ch] - lo) / (hi - lo)
    return out


def equalize(img):
    """Per-channel 256-bin histogram equalization."""
    out = img.copy()
    for ch in range(img.shape[0]):
        vals = _to_uint8(img[ch])
        hist = np.bincount(vals.ravel(), minlength=256)
        last = hist[np.nonzero(hist)[0][-1]]
        step = (hist.sum() - last) // 255
        if step == 0:
            continue
        lut = np.clip((np.cumsum(hist) - hist + step // 2) // step, 0, 255)
        out[ch] = lut[vals] / 255.0
    return out


def cutout(img, size, cy, cx):
    out = img.copy()
    if size <= 0:
        return out
    _, h, w = img.shape
    y0, x0 = cy - size // 2, cx - size // 2
    out[:, max(0, y0):min(h, y0 + size), max(0, x0):min(w, x0 + size)] = 0
    return out


def sample_pairing(img, partner, weight):
    return (1 - weight) * img + weight * partner


def _sign(rng) -> float:
    return -1.0 if rng.random() < 0.5 else 1.0


def apply_transform(op, magnitude, img: np.ndarray, rng: np.random.Generator,
                    partners: Sequence[np.ndarray] | np.ndarray | None = None) -> np.ndarray:
    """Apply one op at a concrete (already denormalized) magnitude.

    ``partners`` are the candidate images for SamplePairing, normally the
    other members of the batch.
    """
    op = _op(op)
    if op.magnitude_type != "none":
        if magnitude is None or not op.lo <= magnitude <= op.hi:
            raise ValueError(f"{op.name}: magnitude {magnitude} outside [{op.lo}, {op.hi}]")
    _, h, w = img.shape
    name = op.name
    if name == "ShearX":
        out = shear_x(img, _sign(rng) * magnitude)
    elif name == "ShearY":
        out = shear_y(img, _sign(rng) * magnitude)
    elif name == "TranslateX":
        out = translate(img, _sign(rng) * magnitude * w / REFERENCE_WIDTH, 0.0)
    elif name == "TranslateY":
        out = translate(img, 0.0, _sign(rng) * magnitude * h / REFERENCE_WIDTH)
    elif name == "Rotate":
        out = rotate(img, _sign(rng) * magnitude)
    elif name == "Flip":
        out = flip(img)
    elif name == "Solarize":
        out = solarize(img, magnitude)
    elif name == "Posterize":
        out = posterize(img, magnitude)
    elif name == "Invert":
        out = invert(img)
    elif name == "Contrast":
        out = contrast(img, magnitude)
    elif name == "Color":
        out = color(img, magnitude)
    elif name == "Brightness":
        out = brightness(img, magnitude)
    elif name == "Sharpness":
        out = sharpness(img, magnitude)
    elif name == "AutoContrast":
        out = autocontrast(img)
    elif name == "Equalize":
        out = equalize(img)
    elif name == "CutOut":
        size = int(np.floor(magnitude * w / REFERENCE_WIDTH + 0.5))
        out = cutout(img, size, int(rng.integers(0, h)), int(rng.integers(0, w)))
    elif name == "SamplePairing":
        if partners is None or len(partners) == 0:
            log.info("SamplePairing skipped: no partner image in batch")
            out = img
        else:
            partner = partners[int(rng.integers(0, len(partners)))]
            out = sample_pairing(img, partner, magnitude)
    else:  # pragma: no cover - OPS and this table are kept in sync
        raise ValueError(name)
    return np.clip(out, 0, 1).astype(img.dtype, copy=False)


class _Others:
    """The batch minus one member, without copying."""

    def __init__(self, images: np.ndarray, skip: int):
        self.images, self.skip = images, skip

    def __len__(self):
        return len(self.images) - 1

    def __getitem__(self, k: int) -> np.ndarray:
        return self.images[k if k < self.skip else k + 1]


def augment_images(images: np.ndarray, policy: AugmentPolicy, op_set,
                   rng: np.random.Generator) -> np.ndarray:
    """Augment an NCHW array; each image gets its own derived rng stream."""
    names = resolve_op_set(op_set)
    seeds = rng.integers(0, 2**63 - 1, size=len(images))
    out = np.empty_like(images)
    for i, img in enumerate(images):
        r = np.random.default_rng(seeds[i])
        partners = _Others(images, i)
        for name, magnitude in sample_policy(policy, names, r):
            img = apply_transform(name, magnitude, img, r, partners)
        out[i] = img
    return out


def augment_batch(batch: ImageBatch, policy: AugmentPolicy, op_set,
                  rng: np.random.Generator | None = None) -> ImageBatch:
    if rng is None:
        rng = np.random.default_rng(policy.seed)
    return batch.with_images(augment_images(batch.images, policy, op_set, rng))


def weak_augment(images: np.ndarray, rng: np.random.Generator, max_shift: int = 2,
                 jitter: float = 0.2) -> np.ndarray:
    """Baseline view: random horizontal flip, small shift, brightness/contrast jitter."""
    n, _, h, w = images.shape
    flips = rng.random(n) < 0.5
    shifts = rng.integers(-max_shift, max_shift + 1, size=(n, 2))
    factors = rng.uniform(1 - jitter, 1 + jitter, size=(n, 2))
    out = np.empty_like(images)
    for i, img in enumerate(images):
        if flips[i]:
            img = img[:, :, ::-1]
        dy, dx = shifts[i]
        shifted = np.zeros_like(img)
        shifted[:, max(0, dy):h + min(0, dy), max(0, dx):w + min(0, dx)] = \
            img[:, max(0, -dy):h - max(0, dy), max(0, -dx):w - max(0, dx)]
        img = brightness(shifted, factors[i, 0])
        img = contrast(img, factors[i, 1])
        out[i] = np.clip(img, 0, 1)
    return out

