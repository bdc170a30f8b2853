"""Domains, batches, synthetic domain shift, corruptions and batching."""

from __future__ import annotations

import colorsys
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator

import numpy as np
from PIL import Image as PILImage
from scipy import fft, ndimage

from .seeding import derive_rng

TARGET = -1


class DataError(ValueError):
    pass


@dataclass
class ImageBatch:
    """NCHW images in [0, 1] with per-sample domain tags.

    ``domain_tags`` holds the source-domain index, or ``TARGET`` (-1) for
    target-domain samples.  ``labels`` is ``None`` for unlabeled batches.
    """

    images: np.ndarray
    labels: np.ndarray | None
    domain_tags: np.ndarray

    def __post_init__(self):
        n = len(self.images)
        if len(self.domain_tags) != n or (self.labels is not None and len(self.labels) != n):
            raise DataError("images, labels and domain_tags disagree in length")

    def __len__(self) -> int:
        return len(self.images)

    def subset(self, index) -> "ImageBatch":
        labels = None if self.labels is None else self.labels[index]
        return ImageBatch(self.images[index], labels, self.domain_tags[index])

    def with_images(self, images: np.ndarray) -> "ImageBatch":
        return replace(self, images=images)

    def unlabeled(self) -> "ImageBatch":
        return replace(self, labels=None)

    @property
    def has_target(self) -> bool:
        return bool(np.any(self.domain_tags == TARGET))

    @staticmethod
    def concat(batches) -> "ImageBatch":
        batches = list(batches)
        if any(b.labels is None for b in batches):
            labels = None
        else:
            labels = np.concatenate([b.labels for b in batches])
        return ImageBatch(np.concatenate([b.images for b in batches]), labels,
                          np.concatenate([b.domain_tags for b in batches]))


@dataclass
class Domain:
    name: str
    images: np.ndarray
    labels: np.ndarray
    class_names: tuple[str, ...] = ()

    def __len__(self) -> int:
        return len(self.images)

    def as_batch(self, tag: int, labeled: bool = True) -> ImageBatch:
        return ImageBatch(self.images, self.labels if labeled else None,
                          np.full(len(self), tag, dtype=np.int64))


@dataclass
class DatasetSpec:
    kind: str = "synthetic"
    num_classes: int = 7
    samples_per_class: int = 40
    image_size: int = 32
    channels: int = 3
    domains: tuple[str, ...] = ("A", "B", "C", "D")
    sources: tuple[str, ...] = ("A", "C", "D")
    target: str = "B"
    root: str | None = None
    train_fraction: float = 0.8
    seed: int = 0

    def validate(self) -> None:
        if self.kind not in ("synthetic", "directory"):
            raise DataError(f"dataset kind must be synthetic or directory, got {self.kind!r}")
        if self.kind == "directory" and not self.root:
            raise DataError("directory datasets need a root")
        if self.num_classes < 2:
            raise DataError(f"need at least 2 classes, got {self.num_classes}")
        if self.kind == "synthetic":
            if self.samples_per_class < 40:
                raise DataError("synthetic data needs >= 40 samples per class per domain")
            if self.num_classes > len(SHAPES):
                raise DataError(f"synthetic data supports at most {len(SHAPES)} classes")
            unknown = set(self.domains) - set(STYLES)
            if unknown:
                raise DataError(f"unknown synthetic domains {sorted(unknown)}; known: {sorted(STYLES)}")
        if self.channels not in (1, 3):
            raise DataError(f"channels must be 1 or 3, got {self.channels}")
        if len(self.sources) < 1:
            raise DataError("need at least one source domain")
        if self.target in self.sources:
            raise DataError(f"target domain {self.target!r} is also listed as a source")
        if not 0 < self.train_fraction <= 1:
            raise DataError(f"train_fraction must be in (0, 1], got {self.train_fraction}")


# synthetic glyphs ------------------------------------------------------------

def _disk(px, py):
    return px * px + py * py <= 0.9


def _square(px, py):
    return np.maximum(np.abs(px), np.abs(py)) <= 0.75


def _triangle(px, py):
    return (py <= 0.6) & (py >= -0.9 + (1.5 / 0.9) * np.abs(px))


def _plus(px, py):
    return ((np.abs(px) <= 0.25) & (np.abs(py) <= 0.9)) | ((np.abs(py) <= 0.25) & (np.abs(px) <= 0.9))


def _ring(px, py):
    r2 = px * px + py * py
    return (r2 >= 0.5 ** 2) & (r2 <= 0.92 ** 2)


def _cross(px, py):
    a, b = (px + py) / np.sqrt(2), (px - py) / np.sqrt(2)
    return _plus(a, b)


def _bars(px, py):
    return ((np.abs(py - 0.45) <= 0.2) | (np.abs(py + 0.45) <= 0.2)) & (np.abs(px) <= 0.9)


def _diamond(px, py):
    return np.abs(px) + np.abs(py) <= 0.95


def _columns(px, py):
    return _bars(py, px)


SHAPES = (_disk, _square, _triangle, _plus, _ring, _cross, _bars, _diamond, _columns)


def render_mask(shape_id: int, size: int, rng: np.random.Generator, extra_rotation: float = 0.0,
                supersample: int = 2) -> np.ndarray:
    """Anti-aliased coverage mask in [0, 1] for one glyph with random pose."""
    s = size * supersample
    c = (s - 1) / 2 + rng.uniform(-0.1, 0.1, size=2) * s
    radius = rng.uniform(0.28, 0.4) * s
    angle = np.deg2rad(rng.uniform(-10, 10) + extra_rotation)
    ys, xs = np.mgrid[0:s, 0:s].astype(np.float64)
    dx, dy = xs - c[0], ys - c[1]
    cos, sin = np.cos(angle), np.sin(angle)
    px = (cos * dx + sin * dy) / radius
    py = (-sin * dx + cos * dy) / radius
    mask = SHAPES[shape_id](px, py).astype(np.float64)
    return mask.reshape(size, supersample, size, supersample).mean(axis=(1, 3))


def _hsv_to_rgb(h: float, s: float, v: float) -> np.ndarray:
    return np.array(colorsys.hsv_to_rgb(h % 1.0, s, v))


def _style_a(mask, rng):
    fg = rng.uniform(0.7, 1.0)
    return np.repeat((mask * fg)[None], 3, axis=0)


def _style_b(mask, rng):
    size = mask.shape[0]
    ys, xs = np.mgrid[0:size, 0:size]
    a = rng.uniform(0, np.pi)
    freq = rng.uniform(0.5, 1.2)
    texture = 0.72 + 0.18 * np.sin(freq * (xs * np.cos(a) + ys * np.sin(a)) + rng.uniform(0, 2 * np.pi))
    texture = texture + rng.normal(0, 0.04, size=mask.shape)
    fg = rng.uniform(0.0, 0.25)
    gray = mask * fg + (1 - mask) * texture
    return np.repeat(gray[None], 3, axis=0)


def _style_c(mask, rng):
    rgb = _hsv_to_rgb(rng.uniform(0.55, 0.75), rng.uniform(0.6, 0.9), rng.uniform(0.7, 1.0))
    bg = _hsv_to_rgb(rng.uniform(0.05, 0.15), 0.6, 0.25)
    return mask[None] * rgb[:, None, None] + (1 - mask[None]) * bg[:, None, None]


def _style_d(mask, rng):
    fg = rng.uniform(0.7, 1.0)
    gray = 0.4 + 0.25 * mask * fg + rng.normal(0, 0.12, size=mask.shape)
    return np.repeat(gray[None], 3, axis=0)


STYLES = {"A": _style_a, "B": _style_b, "C": _style_c, "D": _style_d}
EXTRA_ROTATION = {"C": 15.0}


def generate_domain(name: str, num_classes: int, samples_per_class: int, image_size: int,
                    channels: int, rng: np.random.Generator) -> Domain:
    n = num_classes * samples_per_class
    labels = np.arange(n) % num_classes
    images = np.empty((n, 3, image_size, image_size))
    style = STYLES[name]
    for i, label in enumerate(labels):
        rot = EXTRA_ROTATION.get(name, 0.0) * (1 if rng.random() < 0.5 else -1)
        mask = render_mask(int(label), image_size, rng, extra_rotation=rot)
        images[i] = style(mask, rng)
    images = np.clip(images, 0, 1)
    if channels == 1:
        images = np.tensordot(np.array([0.299, 0.587, 0.114]), images, axes=([0], [1]))[:, None]
    names = tuple(SHAPES[k].__name__.lstrip("_") for k in range(num_classes))
    return Domain(name, images.astype(np.float32), labels.astype(np.int64), names)


def generate_synthetic(spec: DatasetSpec) -> dict[str, Domain]:
    """Class-balanced K-class glyph images, one fixed visual style per domain.

    A: clean grayscale.  B: inverted, on a striped texture.  C: colored,
    rotated by +-15 degrees.  D: low contrast under heavy noise.
    """
    spec.validate()
    return {
        name: generate_domain(name, spec.num_classes, spec.samples_per_class, spec.image_size,
                              spec.channels, derive_rng(spec.seed, "data", idx))
        for idx, name in enumerate(spec.domains)
    }


# directory ingestion ---------------------------------------------------------

def _read_image(path: Path, size: int, channels: int) -> np.ndarray:
    try:
        with PILImage.open(path) as im:
            im = im.convert("L" if channels == 1 else "RGB")
            im = im.resize((size, size), PILImage.BILINEAR)
            arr = np.asarray(im, dtype=np.float32) / 255.0
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot decode image {path}: {exc}") from exc
    return arr[None] if channels == 1 else arr.transpose(2, 0, 1)


def load_directory(root, image_size: int = 32, channels: int = 3) -> dict[str, Domain]:
    """Read ``root/<domain>/<class>/<image>``; class ids follow sorted class names."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} is not a directory")
    domain_dirs = sorted(p for p in root.iterdir() if p.is_dir() and not p.name.startswith("."))
    if not domain_dirs:
        raise DataError(f"{root}: no domain directories")
    class_sets = {}
    for d in domain_dirs:
        classes = sorted(p.name for p in d.iterdir() if p.is_dir() and not p.name.startswith("."))
        if len(classes) < 2:
            raise DataError(f"{d}: need at least 2 class directories, found {len(classes)}")
        class_sets[d.name] = classes
    class_names = tuple(sorted(set().union(*class_sets.values())))
    class_id = {c: i for i, c in enumerate(class_names)}
    domains = {}
    for d in domain_dirs:
        images, labels = [], []
        for cls in class_sets[d.name]:
            files = sorted(p for p in (d / cls).iterdir() if p.is_file() and not p.name.startswith("."))
            for f in files:
                images.append(_read_image(f, image_size, channels))
                labels.append(class_id[cls])
        if not images:
            raise DataError(f"{d}: domain contains no images")
        domains[d.name] = Domain(d.name, np.stack(images), np.asarray(labels, dtype=np.int64),
                                 class_names)
    return domains


def load_domains(spec: DatasetSpec) -> dict[str, Domain]:
    spec.validate()
    if spec.kind == "synthetic":
        return generate_synthetic(spec)
    domains = load_directory(spec.root, spec.image_size, spec.channels)
    wanted = set(spec.sources) | {spec.target}
    missing = wanted - set(domains)
    if missing:
        raise DataError(f"{spec.root}: missing domains {sorted(missing)}")
    return domains


@dataclass
class Task:
    """Train/test views for one source(s) -> target transfer."""

    source_train: ImageBatch
    source_test: ImageBatch
    target: ImageBatch
    source_names: tuple[str, ...]
    target_name: str
    num_classes: int
    input_shape: tuple[int, int, int]
    info: dict = field(default_factory=dict)


def split_domain(domain: Domain, fraction: float, seed: int, index: int):
    perm = derive_rng(seed, "split", index).permutation(len(domain))
    cut = int(round(fraction * len(domain)))
    return perm[:cut], perm[cut:]


def prepare_task(spec: DatasetSpec, domains: dict[str, Domain] | None = None) -> Task:
    if domains is None:
        domains = load_domains(spec)
    train_parts, test_parts = [], []
    for idx, name in enumerate(spec.sources):
        dom = domains[name]
        tr, te = split_domain(dom, spec.train_fraction, spec.seed, idx)
        full = dom.as_batch(idx)
        train_parts.append(full.subset(tr))
        test_parts.append(full.subset(te if len(te) else tr))
    target = domains[spec.target].as_batch(TARGET)
    seen = int(max(d.labels.max() for d in domains.values())) + 1
    num_classes = seen if spec.kind == "directory" else max(spec.num_classes, seen)
    return Task(ImageBatch.concat(train_parts), ImageBatch.concat(test_parts), target,
                tuple(spec.sources), spec.target, num_classes, tuple(target.images.shape[1:]))


# corruptions -----------------------------------------------------------------

SEVERITY = {
    "gaussian-noise": (0.14, 0.28, 0.42, 0.56, 0.70),
    "shot-noise": (30, 10, 4, 2, 1),
    "box-blur": (3, 4, 5, 7, 9),
    "motion-blur": (5, 9, 13, 17, 21),
    "brightness": (0.14, 0.28, 0.42, 0.56, 0.70),
    "contrast": (0.5, 0.35, 0.22, 0.13, 0.08),
    "pixelate": (24, 16, 10, 7, 5),
    "jpeg": (30, 15, 8, 4, 1),
}
CORRUPTIONS = tuple(SEVERITY)

_JPEG_LUMA = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61], [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56], [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77], [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101], [72, 92, 95, 98, 112, 100, 103, 99]], dtype=np.float64)


def _jpeg_quantize(img: np.ndarray, quality: int) -> np.ndarray:
    scale = 5000 / quality if quality < 50 else 200 - 2 * quality
    table = np.maximum(np.floor((_JPEG_LUMA * scale + 50) / 100), 1)
    c, h, w = img.shape
    ph, pw = -h % 8, -w % 8
    x = np.pad(img.astype(np.float64) * 255 - 128, ((0, 0), (0, ph), (0, pw)), mode="edge")
    hb, wb = x.shape[1] // 8, x.shape[2] // 8
    blocks = x.reshape(c, hb, 8, wb, 8).transpose(0, 1, 3, 2, 4)
    coef = fft.dctn(blocks, axes=(-2, -1), norm="ortho")
    coef = np.round(coef / table) * table
    rec = fft.idctn(coef, axes=(-2, -1), norm="ortho")
    rec = rec.transpose(0, 1, 3, 2, 4).reshape(c, hb * 8, wb * 8)[:, :h, :w]
    return (rec + 128) / 255


def _pixelate(img: np.ndarray, size: int) -> np.ndarray:
    c, h, w = img.shape
    out = np.empty_like(img)
    for ch in range(c):
        im = PILImage.fromarray(img[ch].astype(np.float32), mode="F")
        small = im.resize((min(size, w), min(size, h)), PILImage.BOX)
        out[ch] = np.asarray(small.resize((w, h), PILImage.NEAREST))
    return out


def corrupt(img: np.ndarray, kind: str, severity: int, rng: np.random.Generator) -> np.ndarray:
    """One CHW image corrupted at severity 1..5 (5 strongest)."""
    if kind not in SEVERITY:
        raise ValueError(f"unknown corruption {kind!r}; valid kinds: {', '.join(CORRUPTIONS)}")
    if severity not in (1, 2, 3, 4, 5):
        raise ValueError(f"severity must be an integer in 1..5, got {severity!r}")
    p = SEVERITY[kind][severity - 1]
    x = img.astype(np.float64)
    if kind == "gaussian-noise":
        out = x + rng.normal(0, p, size=x.shape)
    elif kind == "shot-noise":
        out = rng.poisson(np.clip(x, 0, 1) * p) / p
    elif kind == "box-blur":
        out = ndimage.uniform_filter(x, size=(1, p, p), mode="nearest")
    elif kind == "motion-blur":
        out = ndimage.uniform_filter1d(x, size=p, axis=-1, mode="nearest")
    elif kind == "brightness":
        out = x + p
    elif kind == "contrast":
        m = x.mean()
        out = (x - m) * p + m
    elif kind == "pixelate":
        out = _pixelate(x, p)
    else:
        out = _jpeg_quantize(x, p)
    return np.clip(out, 0, 1).astype(img.dtype)


def corrupt_images(images: np.ndarray, kind: str, severity: int, rng: np.random.Generator) -> np.ndarray:
    return np.stack([corrupt(img, kind, severity, rng) for img in images]) if len(images) else images


# batching --------------------------------------------------------------------

def batcher(dataset: ImageBatch, batch_size: int, seed: int, epoch: int = 0) -> Iterator[ImageBatch]:
    """One seeded shuffle pass over ``dataset``; the last batch may be short."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    order = derive_rng(seed, "batcher", epoch).permutation(len(dataset))
    for start in range(0, len(order), batch_size):
        yield dataset.subset(order[start:start + batch_size])


def _cycled_order(n: int, count: int, seed: int, epoch: int) -> np.ndarray:
    reps = math.ceil(count / n)
    parts = [derive_rng(seed, "batcher", epoch, 1, k).permutation(n) for k in range(reps)]
    return np.concatenate(parts)[:count]


def paired_batches(source: ImageBatch, target: ImageBatch, batch_size: int, seed: int,
                   epoch: int = 0) -> Iterator[tuple[ImageBatch, ImageBatch]]:
    """Equal-size (source, target) batches; the smaller set cycles through reshuffles."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    if len(source) >= len(target):
        lead = derive_rng(seed, "batcher", epoch).permutation(len(source))
        follow = _cycled_order(len(target), len(lead), seed, epoch)
        s_idx, t_idx = lead, follow
    else:
        lead = derive_rng(seed, "batcher", epoch).permutation(len(target))
        follow = _cycled_order(len(source), len(lead), seed, epoch)
        s_idx, t_idx = follow, lead
    target = target.unlabeled()
    for start in range(0, len(s_idx), batch_size):
        sl = slice(start, start + batch_size)
        yield source.subset(s_idx[sl]), target.subset(t_idx[sl])
