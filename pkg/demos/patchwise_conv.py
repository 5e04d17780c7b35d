"""Patch-wise decorrelation in a convolution layer.

A conv layer with K x K kernels over C input channels sees its input as
K*K*C dimensional patch vectors, one column per output position. Its
decorrelation matrix R lives in that patch space, so it stays small even for
large images. Natural images have strongly correlated neighbouring pixels;
here a smoothed random field stands in for them, and we watch the correlation
metric of the patches fall as R is updated batch after batch.

    python demos/patchwise_conv.py
"""

import numpy as np

from decorrnet.decorrelation import DecorrConfig, correlation_metric
from decorrnet.layers import ConvDecorrelated, extract_patches

rng = np.random.default_rng(0)


def smooth_images(n, size=16, channels=3):
    """White noise blurred with a 5x5 box filter, then standardized."""
    x = rng.standard_normal((channels, size + 4, size + 4, n))
    out = np.zeros((channels, size, size, n))
    for dy in range(5):
        for dx in range(5):
            out += x[:, dy : dy + size, dx : dx + size]
    return ((out - out.mean()) / out.std()).astype(np.float32)


layer = ConvDecorrelated(3, 8, 3, padding=1, decorr=DecorrConfig(kappa=0.0, epsilon=1e-3, sample_fraction=0.1), rng=rng)
print("patch dimension (K*K*C):", layer.decorr.d, "-> R is", layer.decorr.r.shape)

images = smooth_images(32)
p = extract_patches(images, 3, 1, 1)
print("patch matrix:", p.shape, "(one column per sample and output position)")

for step in range(301):
    batch = smooth_images(32)
    layer.forward(batch)
    if step % 50 == 0:
        print(f"step {step:3d}: correlation metric {correlation_metric(layer.input_stats()):.5f}")
    layer.update_decorrelation(rng)
    layer.refuse()

# the forward pass uses the fused matrix A = W R; check it against W (R z)
a = layer.forward(images)
b = layer.forward_unfused(images)
print("fused vs unfused max difference:", float(np.abs(a - b).max()))
