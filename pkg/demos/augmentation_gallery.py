"""The random augmentation ops on synthetic glyphs, one column per op.

Writes gallery.png next to this script.
"""

from pathlib import Path

import numpy as np
from PIL import Image

from artda.augment import OPS, OP_SETS, AugmentPolicy, apply_transform, augment_images, denormalize_magnitude
from artda.data import DatasetSpec, generate_synthetic

domains = generate_synthetic(DatasetSpec(num_classes=7, samples_per_class=40))
img = domains["A"].images[3].astype(np.float64)

# magnitude m in [0, 10] maps linearly onto each op's range
for name in ("Rotate", "Solarize", "Posterize", "Contrast"):
    print(f"{name:10s} m=0 -> {denormalize_magnitude(name, 0)!s:6s} m=9 -> {denormalize_magnitude(name, 9)}")

print("color ops:", ", ".join(OP_SETS["rnd-color"]))
print("geometric ops:", ", ".join(OP_SETS["rnd-geo"]))

rng = np.random.default_rng(0)
partners = domains["B"].images[:4].astype(np.float64)
columns = [img]
for name in OPS:
    m = denormalize_magnitude(name, 9)
    columns.append(apply_transform(name, m, img, rng, partners))

# a random policy: 2 ops per image at magnitude 9, rng stream per image
batch = np.stack([d.images[5] for d in domains.values()]).astype(np.float64)
mixed = augment_images(batch, AugmentPolicy(2, 9.0), "rnd-all", np.random.default_rng(1))
print("augmented batch stays in [0, 1]:", mixed.min() >= 0 and mixed.max() <= 1)

strip = np.concatenate([np.transpose(c, (1, 2, 0)) for c in columns], axis=1)
out = Path(__file__).with_name("gallery.png")
Image.fromarray((strip * 255 + 0.5).astype(np.uint8)).save(out)
print("wrote", out, "(original, then", ", ".join(OPS) + ")")
