"""
Checking gradients with central differences
===========================================

Every operator in the autodiff engine, and the assembled network, can be
verified against finite differences in float64.
"""

import numpy as np

from lidar_voice import autodiff as ad
from lidar_voice.autodiff import finite_difference_check, parameter
from lidar_voice.model import ModelConfig, init_params, model_forward

rng = np.random.default_rng(0)

# A single op: cross-entropy with the class weights used in training.
logits = parameter(rng.normal(size=(6, 4)))
targets = rng.integers(0, 4, size=6)
err = finite_difference_check(lambda t: ad.weighted_softmax_ce(t, targets, [1.0, 5.0, 20.0, 5.0]), logits)
print(f"weighted cross-entropy: max rel err {err:.2e}")

# A small convolution.
x = parameter(rng.normal(size=(1, 6, 6, 2)))
k = parameter(rng.normal(size=(3, 3, 2, 3)))
b = parameter(np.zeros(3))
err = finite_difference_check(lambda t: ad.total(ad.conv2d(t, k, b)), x)
print(f"conv2d wrt input:       max rel err {err:.2e}")

# The fused network, narrowed so the check runs in a second or two.
config = ModelConfig(width=1 / 32, image_size=16, n_points=16)
params = init_params(config)
for name, p in params.items():
    if name.endswith(".b") and not name.startswith("tnet.out"):
        p.data[:] = rng.normal(scale=0.1, size=p.shape)
pts = rng.normal(size=(2, 16, 3))
imgs = rng.random((2, 16, 16, 3))
y = np.array([0, 2])


def loss_fn(_):
    return model_forward(params, config, pts, imgs, y)[1]


worst = 0.0
for name in params:
    for p in params.values():
        p.zero_grad()
    worst = max(worst, finite_difference_check(loss_fn, params[name], max_coords=4, rng=rng))
print(f"full model ({len(params)} tensors): max rel err {worst:.2e}")
