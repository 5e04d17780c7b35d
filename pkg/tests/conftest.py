import numpy as np
import pytest

from decorrnet.data import write_cifar_batch


def make_fake_cifar(root, n_train_per_file=100, n_test=200, seed=0):
    """CIFAR-format files with class-dependent colour blobs, so models can learn something."""
    rng = np.random.default_rng(seed)
    root.mkdir(parents=True, exist_ok=True)
    yy, xx = np.mgrid[0:32, 0:32]

    def draw(n):
        labels = np.arange(n) % 10
        rng.shuffle(labels)
        imgs = rng.integers(0, 120, size=(n, 3, 32, 32)).astype(np.float64)
        for i, c in enumerate(labels):
            cy, cx = 8 + 16 * (c % 2), 6 + 5 * (c // 2)
            blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / 30.0)
            imgs[i, c % 3] += 130 * blob
        return np.clip(imgs, 0, 255).astype(np.uint8), labels

    for i in range(1, 6):
        write_cifar_batch(root / f"data_batch_{i}.bin", *draw(n_train_per_file))
    write_cifar_batch(root / "test_batch.bin", *draw(n_test))
    return root


@pytest.fixture(scope="session")
def fake_cifar_dir(tmp_path_factory):
    return make_fake_cifar(tmp_path_factory.mktemp("cifar"))


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
