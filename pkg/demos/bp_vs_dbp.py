"""Backpropagation versus decorrelated backpropagation on a small ConvNet.

Uses the CIFAR-10 binary batches under $DECORR_DATA_DIR when set (class
balanced subset, 500 train and 100 test images per class). Without them a
synthetic stand-in is generated: spatially smooth, correlated images whose
class is set by a faint template, which is enough to see the mechanics but
says nothing about CIFAR-10.

    DECORR_DATA_DIR=~/data/cifar-10-batches-bin python demos/bp_vs_dbp.py
"""

from dataclasses import replace

import numpy as np

from decorrnet import harness
from decorrnet.data import Dataset, channel_stats, default_data_dir, normalize
from decorrnet.decorrelation import DecorrConfig
from decorrnet.training import AdamConfig, RunConfig, train

EPOCHS = 10


def synthetic(n, seed):
    rng = np.random.default_rng(seed)
    templates = np.random.default_rng(99).standard_normal((10, 3, 32, 32))
    labels = rng.integers(0, 10, n)
    noise = rng.standard_normal((3, 36, 36, n))
    imgs = sum(noise[:, dy : dy + 32, dx : dx + 32] for dy in range(5) for dx in range(5)) / 5
    imgs += 0.25 * templates[labels].transpose(1, 2, 3, 0)
    return imgs.astype(np.float32), labels


if default_data_dir() is not None:
    source = "CIFAR-10 subset"
    train_set, test_set = harness.load_data(harness.parse_config(""))
else:
    source = "synthetic stand-in"
    xtr, ytr = synthetic(2000, 0)
    xte, yte = synthetic(500, 1)
    mean, std = channel_stats(xtr)
    train_set = Dataset(normalize(xtr, mean, std), ytr, "train", mean, std)
    test_set = Dataset(normalize(xte, mean, std), yte, "test", mean, std)
print(f"data: {source}, {len(train_set)} train / {len(test_set)} test")

base = RunConfig(adam=AdamConfig(eta=1e-3), epochs=EPOCHS, decorr=DecorrConfig(kappa=0.0, epsilon=1e-3))
runs = {"bp": replace(base, decorr=None), "dbp": base}
results = {}
for name, cfg in runs.items():
    print(f"\n{name}: epoch  train acc  test acc  time   corr metric per layer")
    results[name] = train(
        cfg, train_set, test_set,
        on_epoch=lambda r: print(
            f"      {r.epoch:5d}  {r.train_acc:9.3f}  {r.test_acc:8.3f}  {r.wall_clock_s:5.1f}s  "
            + " ".join(f"{c:.4f}" for c in r.corr_metrics)
        ),
    )

target = results["bp"][-1].train_acc
for name, recs in results.items():
    hit = harness.epochs_to_threshold(recs, target, "train_acc")
    print(f"{name}: reaches BP's final train accuracy {target:.3f} at", "never" if hit is None else f"epoch {hit[0]}")
