"""Adam, the decorrelated training loop and the learning-rate grid search.

A training step is: forward with the condensed matrices, task backward,
Adam on every W and bias, one decorrelation update per decorrelated layer
from the same batch's raw inputs, then a re-fuse. With ``epsilon = 0`` the
decorrelation matrices stay at the identity and the run is identical to
plain backpropagation.
"""

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .data import Dataset
from .decorrelation import DecorrConfig, DivergenceError, correlation_metric, decorrelation_loss
from .layers import (
    ConvDecorrelated,
    DenseDecorrelated,
    Flatten,
    Pool2x2,
    ResidualBlock,
    Sequential,
    softmax_cross_entropy,
)
from .tensor import NonFiniteError, ShapeError

log = logging.getLogger(__name__)

# two conv layers and a dense head: the three weighted layers of the small ConvNet preset
SMALL_CONVNET = "conv:32:5:2:2, conv:64:3:2:1, pool:mean, pool:mean, flatten, dense:10"


@dataclass(frozen=True)
class AdamConfig:
    eta: float = 1.6e-4
    beta1: float = 0.9
    beta2: float = 0.999
    denom_epsilon: float = 1e-8

    def __post_init__(self):
        if self.eta <= 0:
            raise ValueError(f"eta must be positive, got {self.eta}")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")


class Adam:
    """Adam with bias correction; one moment pair per parameter tensor."""

    def __init__(self, config: AdamConfig = AdamConfig()):
        self.config = config
        self.m: dict = {}
        self.v: dict = {}
        self.t = 0

    def update(self, key, param: np.ndarray, grad: np.ndarray):
        """In-place update of ``param``; call :meth:`tick` once per step first."""
        if not np.isfinite(grad).all():
            raise DivergenceError(f"non-finite gradient for parameter {key}")
        cfg = self.config
        if key not in self.m:
            self.m[key] = np.zeros_like(param)
            self.v[key] = np.zeros_like(param)
        m, v = self.m[key], self.v[key]
        m *= cfg.beta1
        m += (1 - cfg.beta1) * grad
        v *= cfg.beta2
        v += (1 - cfg.beta2) * (grad * grad)
        m_hat = m / (1 - cfg.beta1**self.t)
        v_hat = v / (1 - cfg.beta2**self.t)
        param -= (cfg.eta * m_hat / (np.sqrt(v_hat) + cfg.denom_epsilon)).astype(param.dtype, copy=False)

    def tick(self):
        self.t += 1

    def step(self, layers):
        self.tick()
        for i, layer in enumerate(layers):
            for name, param in layer.params.items():
                self.update((i, name), param, layer.grads[name])
            layer.touch()


@dataclass(frozen=True)
class RunConfig:
    name: str = "run"
    layers: str = SMALL_CONVNET
    adam: AdamConfig = field(default_factory=AdamConfig)
    decorr: DecorrConfig | None = field(default_factory=DecorrConfig)  # None means plain BP
    batch_size: int = 256
    epochs: int = 20
    seed: int = 0
    dataset: str = "cifar10"
    train_per_class: int | None = 500
    test_per_class: int | None = 100

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")


@dataclass
class MetricsRecord:
    epoch: int
    wall_clock_s: float
    train_loss: float
    train_acc: float
    test_loss: float = float("nan")
    test_acc: float = float("nan")
    corr_metrics: list = field(default_factory=list)
    decorr_losses: list = field(default_factory=list)

    def same_trajectory(self, other: "MetricsRecord") -> bool:
        """Equality of everything except wall-clock time."""
        a = replace(self, wall_clock_s=0.0)
        b = replace(other, wall_clock_s=0.0)
        return _nan_equal(a.__dict__, b.__dict__)


def _nan_equal(a, b):
    if isinstance(a, dict):
        return a.keys() == b.keys() and all(_nan_equal(a[k], b[k]) for k in a)
    if isinstance(a, list):
        return len(a) == len(b) and all(_nan_equal(x, y) for x, y in zip(a, b))
    if isinstance(a, float) and isinstance(b, float) and np.isnan(a) and np.isnan(b):
        return True
    return a == b


def build_model(spec: str, input_shape=(3, 32, 32), decorr: DecorrConfig | None = None, rng=None, dtype=np.float32):
    """Build a :class:`Sequential` from a comma-separated layer list.

    Tokens: ``conv:OUT:K:STRIDE:PAD``, ``res:OUT:STRIDE``, ``pool:max``,
    ``pool:mean``, ``flatten``, ``dense:OUT``. The last weighted layer gets an
    identity activation; all others use ReLU.
    """
    rng = rng if rng is not None else np.random.default_rng()
    tokens = [t.strip() for t in spec.split(",") if t.strip()]
    weighted = [i for i, t in enumerate(tokens) if t.split(":")[0] in ("conv", "dense", "res")]
    if not weighted:
        raise ValueError("model has no weighted layers")
    shape = tuple(input_shape)
    layers = []
    for i, tok in enumerate(tokens):
        kind, *args = tok.split(":")
        act = "identity" if i == weighted[-1] else "relu"
        try:
            nums = [int(a) for a in args] if kind != "pool" else []
        except ValueError:
            raise ValueError(f"bad layer token {tok!r}") from None
        name = f"{kind}{len(layers)}"
        if kind == "conv":
            if not 1 <= len(nums) <= 4:
                raise ValueError(f"bad layer token {tok!r}")
            out, k, s, p = nums + [3, 1, 0][len(nums) - 1 :]
            if len(shape) != 3:
                raise ShapeError(f"{tok}: conv needs a (C, H, W) input, have {shape}")
            layer = ConvDecorrelated(shape[0], out, k, s, p, act, decorr, rng, dtype, name)
            h = (shape[1] + 2 * p - k) // s + 1
            w = (shape[2] + 2 * p - k) // s + 1
            shape = (out, h, w)
        elif kind == "res":
            out, s = (nums + [1])[:2]
            layer = ResidualBlock(shape[0], out, s, decorr, rng, dtype, name)
            shape = (out, (shape[1] - 1) // s + 1, (shape[2] - 1) // s + 1)
        elif kind == "pool":
            layer = Pool2x2(args[0] if args else "max")
            shape = (shape[0], shape[1] // 2, shape[2] // 2)
        elif kind == "flatten":
            layer = Flatten()
            shape = (int(np.prod(shape)),)
        elif kind == "dense":
            if len(shape) != 1:
                raise ShapeError(f"{tok}: dense needs a flat input, have {shape}; add 'flatten'")
            layer = DenseDecorrelated(shape[0], nums[0], act, decorr, rng, dtype, name)
            shape = (nums[0],)
        else:
            raise ValueError(f"unknown layer kind {kind!r} in {tok!r}")
        layers.append(layer)
    return Sequential(layers)


def shuffle_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed, 1, epoch])


@dataclass
class EpochStats:
    train_loss: float
    train_acc: float
    seconds: float
    corr_metrics: list
    decorr_losses: list


def train_epoch(model: Sequential, data: Dataset, optimizer: Adam, batch_size: int, rng, decorr_rngs, epoch=0):
    """One pass over ``data`` in shuffled minibatches.

    Layer statistics are taken from the last minibatch (full batch, not the
    update subsample) and their cost is excluded from ``seconds``.
    """
    weighted = model.weighted_layers()
    decorrelated = model.decorrelated_layers()
    n = len(data)
    order = rng.permutation(n)
    loss_sum = 0.0
    correct = 0
    seconds = 0.0
    corr, dloss = [], []
    for start in range(0, n, batch_size):
        t0 = time.perf_counter()
        idx = order[start : start + batch_size]
        x = data.images[..., idx]
        y = data.labels[idx]
        try:
            logits = model.forward(x)
            loss, grad = softmax_cross_entropy(logits, y)
            model.backward(grad)
            optimizer.step(weighted)
        except (NonFiniteError, DivergenceError) as exc:
            raise DivergenceError(f"epoch {epoch}: {exc}") from exc
        loss_sum += loss * idx.size
        correct += int((logits.argmax(axis=0) == y).sum())
        seconds += time.perf_counter() - t0

        if start + batch_size >= n:
            corr, dloss = [], []
            for layer in weighted:
                stats = layer.input_stats()
                kappa = layer.decorr.config.kappa if layer.decorr is not None else 0.0
                corr.append(correlation_metric(stats))
                dloss.append(decorrelation_loss(stats, kappa))

        t0 = time.perf_counter()
        for layer, lrng in zip(decorrelated, decorr_rngs):
            try:
                layer.update_decorrelation(lrng)
            except DivergenceError as exc:
                raise DivergenceError(f"epoch {epoch}: {exc}") from exc
        model.refuse()
        seconds += time.perf_counter() - t0
    return EpochStats(loss_sum / n, correct / n, seconds, corr, dloss)


def evaluate(model: Sequential, data: Dataset, batch_size: int = 500):
    loss_sum = 0.0
    correct = 0
    n = len(data)
    for start in range(0, n, batch_size):
        x = data.images[..., start : start + batch_size]
        y = data.labels[start : start + batch_size]
        logits = model.forward(x)
        loss, _ = softmax_cross_entropy(logits, y)
        loss_sum += loss * y.size
        correct += int((logits.argmax(axis=0) == y).sum())
    return loss_sum / n, correct / n


class Trainer:
    """Owns the model, optimizer and random streams of one run."""

    def __init__(self, config: RunConfig, input_shape, dtype=np.float32):
        self.config = config
        init_rng = np.random.default_rng([config.seed, 0])
        self.model = build_model(config.layers, input_shape, config.decorr, init_rng, dtype)
        n = len(self.model.decorrelated_layers())
        self.decorr_rngs = [np.random.default_rng([config.seed, 2, i]) for i in range(n)]
        self.optimizer = Adam(config.adam)
        self.epoch = 0
        self.wall_clock = 0.0

    def run_epoch(self, train: Dataset, test: Dataset | None = None) -> MetricsRecord:
        self.epoch += 1
        stats = train_epoch(
            self.model,
            train,
            self.optimizer,
            self.config.batch_size,
            shuffle_rng(self.config.seed, self.epoch),
            self.decorr_rngs,
            self.epoch,
        )
        self.wall_clock += stats.seconds
        record = MetricsRecord(
            self.epoch, self.wall_clock, stats.train_loss, stats.train_acc,
            corr_metrics=stats.corr_metrics, decorr_losses=stats.decorr_losses,
        )
        if test is not None:
            record.test_loss, record.test_acc = evaluate(self.model, test)
        log.info(
            "%s epoch %d: train %.4f/%.4f test %.4f/%.4f (%.1fs)",
            self.config.name, record.epoch, record.train_loss, record.train_acc,
            record.test_loss, record.test_acc, record.wall_clock_s,
        )
        return record


def train(config: RunConfig, train_set: Dataset, test_set: Dataset | None = None, on_epoch=None):
    trainer = Trainer(config, train_set.images.shape[:-1], train_set.images.dtype)
    records = []
    for _ in range(config.epochs):
        record = trainer.run_epoch(train_set, test_set)
        records.append(record)
        if on_epoch is not None:
            on_epoch(record)
    return records


@dataclass
class GridResult:
    etas: list
    epsilons: list
    train_acc: np.ndarray  # (len(etas), len(epsilons)), NaN where diverged
    diverged: np.ndarray

    def best(self):
        if np.all(self.diverged):
            return None
        i, j = np.unravel_index(np.nanargmax(self.train_acc), self.train_acc.shape)
        return self.etas[i], self.epsilons[j]


def grid_search(base: RunConfig, eta_grid, epsilon_grid, budget_epochs: int, train_set: Dataset) -> GridResult:
    """Train accuracy after ``budget_epochs`` for every (eta, epsilon) cell.

    All cells share the base seed, so they see the same initialization and
    data order. ``epsilon = 0`` cells are plain backpropagation.
    """
    etas, epsilons = list(eta_grid), list(epsilon_grid)
    if not etas or not epsilons:
        raise ValueError("grids must be non-empty")
    decorr = base.decorr or DecorrConfig()
    acc = np.full((len(etas), len(epsilons)), np.nan)
    diverged = np.zeros(acc.shape, dtype=bool)
    for i, eta in enumerate(etas):
        for j, eps in enumerate(epsilons):
            cfg = replace(
                base,
                name=f"{base.name}-eta{eta:g}-eps{eps:g}",
                adam=replace(base.adam, eta=eta),
                decorr=replace(decorr, epsilon=eps),
                epochs=budget_epochs,
            )
            try:
                acc[i, j] = train(cfg, train_set)[-1].train_acc
            except DivergenceError as exc:
                log.warning("cell eta=%g eps=%g diverged: %s", eta, eps, exc)
                diverged[i, j] = True
    return GridResult(etas, epsilons, acc, diverged)
