"""Affine spatial transformer: identity at init, and what the adversary learns.

The classifier is frozen; the localization net is updated through gradient
reversal, so each SGD step increases the consistency KL between clean and
transformed predictions.
"""

import numpy as np

from artda import tensor as T
from artda.data import DatasetSpec, prepare_task
from artda.losses import kl_consistency
from artda.model import predict_logprobs
from artda.stn import adversarial_transform, generate_grid, bilinear_sample, init_localization, localize
from artda.trainer import TrainConfig, train_seed, sgd_step

task = prepare_task(DatasetSpec(num_classes=4, samples_per_class=40, image_size=16))
x = task.source_train.images[:16]

# zero-initialized output layer: T(x) == x exactly
net = init_localization(0, task.input_shape)
phi = localize(x, net)
same = bilinear_sample(x, generate_grid(phi, 16, 16)).data
print("identity at init, max |T(x) - x| =", np.abs(same - x).max())

# a hand-made rotation by 20 degrees
a = np.deg2rad(20)
rot = np.array([[[np.cos(a), -np.sin(a), 0.0], [np.sin(a), np.cos(a), 0.0]]] * len(x))
turned = bilinear_sample(x, generate_grid(rot, 16, 16)).data
print("rotation moves pixels, mean |T(x) - x| =", round(float(np.abs(turned - x).mean()), 4))

# a quickly trained classifier, then frozen
result, clf, _ = train_seed(TrainConfig(mode="DG", strategy="none", epochs=4, lr=0.05), task, 0)
print("classifier source accuracy", round(result.source_acc, 1))
clean = predict_logprobs(x, clf).data

net.params["fc2.w"].data = 0.05 * np.random.default_rng(1).standard_normal(net.params["fc2.w"].shape).astype(np.float32)
for step in range(31):
    T.zero_grads(net.parameters())
    kl = kl_consistency(clean, predict_logprobs(adversarial_transform(x, net), clf))
    kl.backward()
    sgd_step(net.parameters(), 0.5)  # descent on the reversed gradient = ascent on KL
    if step % 10 == 0:
        print(f"step {step:2d}  KL {kl.item():.4f}")
print("learned affine for the first image:\n", localize(x[:1], net).data[0].round(3))
