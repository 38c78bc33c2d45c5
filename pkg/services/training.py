"""
Toy set-classification harness for SoftMax and Sinkhorn attention.

Main functions:
- synth_dataset: labelled point-set datasets (two_gaussians, ring_vs_blob)
- cloud_mean_baseline: least-squares linear classifier on set means
- SetClassifier: attention -> tanh features -> mean pooling -> linear head
- train_toy: plain minibatch SGD with per-epoch records and column-sum stats
"""

import time
from dataclasses import dataclass, field
from typing import Dict, List, Literal, Optional, Tuple

import numpy as np
import pandas as pd

from services.attention import HISTOGRAM_RANGE, ColumnSumStats, NormalizationSpec, column_sum_stats
from services.autodiff import Graph, attention_block
from services.errors import DimensionMismatchError, DivergenceError, InvalidParameterError
from services.numerics import SeededRng
from utils.logger import logger

DatasetKind = Literal["two_gaussians", "ring_vs_blob"]

GAUSSIAN_CLASS_MEAN = 3.0
RING_RADIAL_NOISE = 0.05
BLOB_ANGULAR_JITTER = 0.2


# ════════════════════════════════════════════════════════════════════════════
# Datasets
# ════════════════════════════════════════════════════════════════════════════


@dataclass
class SetDataset:
    """N point sets of equal size: X is N×n×d, y holds labels in {0, 1}."""

    X: np.ndarray
    y: np.ndarray
    kind: str = ""

    def __post_init__(self) -> None:
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.X.ndim != 3:
            raise DimensionMismatchError(f"sets must be stacked as N×n×d, got shape {self.X.shape}")
        if self.y.shape != (self.X.shape[0],):
            raise DimensionMismatchError(f"{self.y.size} labels for {self.X.shape[0]} sets")

    def __len__(self) -> int:
        return self.X.shape[0]

    @property
    def points_per_set(self) -> int:
        return self.X.shape[1]

    @property
    def d(self) -> int:
        return self.X.shape[2]

    def subset(self, index: np.ndarray) -> "SetDataset":
        return SetDataset(self.X[index], self.y[index], self.kind)

    def split(self, test_fraction: float) -> Tuple["SetDataset", "SetDataset"]:
        """(train, test); the test part is the tail of the stored order."""
        if not 0 < test_fraction < 1:
            raise InvalidParameterError(f"test fraction must lie in (0, 1), got {test_fraction}")
        n_test = max(1, int(round(len(self) * test_fraction)))
        if n_test >= len(self):
            raise InvalidParameterError(f"dataset of {len(self)} sets is too small to split")
        cut = len(self) - n_test
        return self.subset(np.arange(cut)), self.subset(np.arange(cut, len(self)))


def _ring(gen: np.random.Generator, n: int) -> np.ndarray:
    angles = gen.uniform(0.0, 2.0 * np.pi, n)
    radii = 1.0 + RING_RADIAL_NOISE * gen.standard_normal(n)
    return radii[:, None] * np.stack([np.cos(angles), np.sin(angles)], axis=1)


def _blob(gen: np.random.Generator, n: int) -> np.ndarray:
    center = gen.uniform(0.0, 2.0 * np.pi)
    angles = center + BLOB_ANGULAR_JITTER * gen.standard_normal(n)
    radii = 1.0 + RING_RADIAL_NOISE * gen.standard_normal(n)
    return radii[:, None] * np.stack([np.cos(angles), np.sin(angles)], axis=1)


def synth_dataset(
    kind: DatasetKind,
    n_per_class: int,
    points_per_set: int = 16,
    seed: int = 0,
) -> SetDataset:
    """
    Balanced, shuffled set-classification dataset in the plane.

    two_gaussians: class 0 sets come from N(-3·1, I), class 1 from N(+3·1, I).
    ring_vs_blob: class 0 spreads its points around the unit circle, class 1
    bunches them at one random angle. Every single point is uniform in angle
    with the same radial law in both classes, so only the joint layout of a
    set carries the label.
    """
    if n_per_class < 1:
        raise InvalidParameterError(f"n_per_class must be >= 1, got {n_per_class}")
    if points_per_set < 1:
        raise InvalidParameterError(f"points_per_set must be >= 1, got {points_per_set}")
    gen = SeededRng(seed).generator

    if kind == "two_gaussians":
        def make(label: int) -> np.ndarray:
            center = GAUSSIAN_CLASS_MEAN * (2 * label - 1)
            return center + gen.standard_normal((points_per_set, 2))
    elif kind == "ring_vs_blob":
        def make(label: int) -> np.ndarray:
            return _blob(gen, points_per_set) if label else _ring(gen, points_per_set)
    else:
        raise InvalidParameterError(f"unknown dataset kind '{kind}'")

    labels = np.repeat([0, 1], n_per_class)
    sets = np.stack([make(int(label)) for label in labels])
    order = gen.permutation(labels.size)
    logger.debug(f"Dataset {kind}: {labels.size} sets of {points_per_set} points")
    return SetDataset(sets[order], labels[order], kind)


def cloud_mean_baseline(train: SetDataset, test: SetDataset) -> float:
    """Test accuracy of a least-squares linear classifier on [set mean, 1] with ±1 targets."""
    def features(ds: SetDataset) -> np.ndarray:
        means = ds.X.mean(axis=1)
        return np.hstack([means, np.ones((len(ds), 1))])

    targets = 2.0 * train.y - 1.0
    weights, *_ = np.linalg.lstsq(features(train), targets, rcond=None)
    predicted = (features(test) @ weights > 0).astype(np.int64)
    return float(np.mean(predicted == test.y))


# ════════════════════════════════════════════════════════════════════════════
# Classifier
# ════════════════════════════════════════════════════════════════════════════


PARAMETER_NAMES = ("W_Q", "W_K", "W_V", "W_1", "b_1", "W_2", "b_2")


class SetClassifier:
    """
    One residual attention layer, a pointwise tanh layer, mean pooling and a
    linear head, built once as an autodiff graph for sets of a fixed size.

    Query/key weights start small so the initial attention is close to
    uniform; W_V starts at value_init·I plus the same small noise.
    """

    def __init__(
        self,
        points_per_set: int,
        d: int = 2,
        hidden: int = 16,
        classes: int = 2,
        normalization: Optional[NormalizationSpec] = None,
        rng: Optional[SeededRng] = None,
        init_scale: float = 0.01,
        value_init: float = -0.5,
        params: Optional[Dict[str, np.ndarray]] = None,
    ):
        if hidden < 1 or classes < 2:
            raise InvalidParameterError(f"need hidden >= 1 and classes >= 2, got {hidden}, {classes}")
        self.normalization = normalization or NormalizationSpec.softmax()
        self.points_per_set = points_per_set
        self.d = d
        initial = params if params is not None else self._init_params(
            rng or SeededRng(0), d, hidden, classes, init_scale, value_init
        )

        g = Graph()
        x = g.input("X", (points_per_set, d))
        label = g.input("label", ())
        W = {name: g.parameter(name, initial[name]) for name in PARAMETER_NAMES}
        attended, self.kernel = attention_block(
            g, x, W["W_Q"], W["W_K"], W["W_V"], self.normalization.iterations
        )
        features = g.tanh(g.broadcast_add(g.matmul(attended, W["W_1"]), W["b_1"]))
        pooled = g.mean_rows(features)
        self.logits = g.broadcast_add(g.matmul(pooled, W["W_2"]), W["b_2"])
        self.loss = g.softmax_cross_entropy(self.logits, label)
        self.graph = g

    @staticmethod
    def _init_params(
        rng: SeededRng, d: int, hidden: int, classes: int, init_scale: float, value_init: float
    ) -> Dict[str, np.ndarray]:
        gen = rng.generator
        return {
            "W_Q": init_scale * gen.standard_normal((d, d)),
            "W_K": init_scale * gen.standard_normal((d, d)),
            "W_V": value_init * np.eye(d) + init_scale * gen.standard_normal((d, d)),
            "W_1": gen.standard_normal((d, hidden)),
            "b_1": gen.standard_normal((1, hidden)),
            "W_2": 0.1 * gen.standard_normal((hidden, classes)),
            "b_2": np.zeros((1, classes)),
        }

    @staticmethod
    def _inputs(points: np.ndarray, label: int) -> Dict[str, np.ndarray]:
        return {"X": points, "label": np.asarray(label, dtype=np.int64)}

    @property
    def parameters(self) -> Dict[str, np.ndarray]:
        return self.graph.parameters

    def parameter_snapshot(self) -> Dict[str, np.ndarray]:
        return {name: value.copy() for name, value in self.graph.parameters.items()}

    def loss_and_grads(self, points: np.ndarray, label: int) -> Tuple[float, Dict[str, np.ndarray]]:
        loss = float(self.graph.forward(self._inputs(points, label)))
        return loss, self.graph.backward()

    def evaluate(self, ds: SetDataset) -> Tuple[float, float]:
        """(mean loss, accuracy) over a dataset."""
        losses = np.empty(len(ds))
        correct = 0
        for k in range(len(ds)):
            losses[k] = float(self.graph.forward(self._inputs(ds.X[k], int(ds.y[k]))))
            correct += int(np.argmax(self.graph.value(self.logits)) == ds.y[k])
        return float(losses.mean()), correct / len(ds)

    def attention_kernels(self, ds: SetDataset) -> List[np.ndarray]:
        kernels = []
        for k in range(len(ds)):
            self.graph.forward(self._inputs(ds.X[k], int(ds.y[k])))
            kernels.append(self.graph.value(self.kernel).copy())
        return kernels


# ════════════════════════════════════════════════════════════════════════════
# Training
# ════════════════════════════════════════════════════════════════════════════


@dataclass(frozen=True)
class TrainConfig:
    dataset: DatasetKind = "ring_vs_blob"
    n_per_class: int = 200
    points_per_set: int = 16
    test_fraction: float = 0.25
    normalization: NormalizationSpec = field(default_factory=NormalizationSpec.softmax)
    hidden: int = 16
    epochs: int = 30
    learning_rate: float = 0.2
    batch_size: int = 8
    monitor_size: int = 8
    init_scale: float = 0.01
    value_init: float = -0.5
    seed: int = 0

    def __post_init__(self) -> None:
        if self.epochs < 0:
            raise InvalidParameterError(f"epochs must be >= 0, got {self.epochs}")
        if self.learning_rate < 0:
            raise InvalidParameterError(f"learning rate must be >= 0, got {self.learning_rate}")
        if self.batch_size < 1 or self.monitor_size < 1:
            raise InvalidParameterError("batch_size and monitor_size must be >= 1")


@dataclass
class TrainingRecord:
    epoch: int
    train_loss: float
    train_accuracy: float
    test_accuracy: float
    column_sums: ColumnSumStats
    epoch_seconds: float = 0.0

    def to_row(self) -> dict:
        stats = self.column_sums
        return {
            "epoch": self.epoch,
            "train_loss": self.train_loss,
            "train_accuracy": self.train_accuracy,
            "test_accuracy": self.test_accuracy,
            "colsum_min": stats.minimum,
            "colsum_max": stats.maximum,
            "colsum_mean": stats.mean,
            "colsum_spread": stats.spread,
            "colsum_max_deviation": float(np.abs(stats.sums - 1.0).max()),
        }


@dataclass
class TrainingResult:
    config: TrainConfig
    records: List[TrainingRecord]
    parameters: Dict[str, np.ndarray]
    baseline_accuracy: float

    @property
    def final(self) -> TrainingRecord:
        return self.records[-1]

    def mean_epoch_seconds(self) -> float:
        timed = [r.epoch_seconds for r in self.records if r.epoch > 0]
        return float(np.mean(timed)) if timed else 0.0

    def records_frame(self) -> pd.DataFrame:
        """Per-epoch scalars; wall-clock time is left out."""
        return pd.DataFrame([r.to_row() for r in self.records])

    def histogram_frame(self) -> pd.DataFrame:
        """Column-sum histogram of the monitor batch, one row per epoch and bin."""
        rows = []
        for r in self.records:
            edges = r.column_sums.bin_edges
            for k, count in enumerate(r.column_sums.histogram):
                rows.append({"epoch": r.epoch, "bin_left": edges[k], "bin_right": edges[k + 1], "count": int(count)})
            rows.append({
                "epoch": r.epoch, "bin_left": HISTOGRAM_RANGE[1], "bin_right": np.inf,
                "count": r.column_sums.overflow,
            })
        return pd.DataFrame(rows, columns=["epoch", "bin_left", "bin_right", "count"])

    def parameters_dict(self) -> Dict[str, list]:
        return {name: value.tolist() for name, value in self.parameters.items()}


def train_toy(cfg: TrainConfig) -> TrainingResult:
    """
    Train a SetClassifier with plain minibatch SGD.

    Record 0 describes the initial parameters; one record follows each epoch.
    The monitor batch (first monitor_size training sets) is fixed up front so the
    column-sum histograms of different epochs are comparable.

    Raises:
        DivergenceError: a minibatch loss is not finite (carries the epoch).
    """
    data = synth_dataset(cfg.dataset, cfg.n_per_class, cfg.points_per_set, cfg.seed)
    train, test = data.split(cfg.test_fraction)
    monitor = train.subset(np.arange(min(cfg.monitor_size, len(train))))
    init_rng, order_rng = SeededRng(cfg.seed).split(2)
    model = SetClassifier(
        cfg.points_per_set,
        d=train.d,
        hidden=cfg.hidden,
        normalization=cfg.normalization,
        rng=init_rng,
        init_scale=cfg.init_scale,
        value_init=cfg.value_init,
    )
    baseline = cloud_mean_baseline(train, test)
    logger.info(
        f"Training {cfg.normalization} on {cfg.dataset}: {len(train)} train / {len(test)} test sets, "
        f"{cfg.epochs} epochs, lr={cfg.learning_rate}; cloud-mean baseline {baseline:.3f}"
    )

    def record(epoch: int, seconds: float) -> TrainingRecord:
        loss, train_acc = model.evaluate(train)
        _, test_acc = model.evaluate(test)
        stats = column_sum_stats(model.attention_kernels(monitor))
        logger.info(
            f"  epoch {epoch:3d}: loss {loss:.4f}, train {train_acc:.3f}, test {test_acc:.3f}, "
            f"column sums [{stats.minimum:.6f}, {stats.maximum:.6f}] ({seconds:.2f}s)"
        )
        return TrainingRecord(epoch, loss, train_acc, test_acc, stats, seconds)

    records = [record(0, 0.0)]
    gen = order_rng.generator
    for epoch in range(1, cfg.epochs + 1):
        start = time.time()
        order = gen.permutation(len(train))
        for begin in range(0, len(order), cfg.batch_size):
            batch = order[begin:begin + cfg.batch_size]
            total = {name: np.zeros_like(value) for name, value in model.parameters.items()}
            for k in batch:
                loss, grads = model.loss_and_grads(train.X[k], int(train.y[k]))
                if not np.isfinite(loss):
                    raise DivergenceError(f"training loss became {loss} in epoch {epoch}", epoch, loss)
                for name, grad in grads.items():
                    total[name] += grad
            for name, value in model.parameters.items():
                value -= cfg.learning_rate * total[name] / len(batch)
        records.append(record(epoch, time.time() - start))

    return TrainingResult(
        config=cfg,
        records=records,
        parameters=model.parameter_snapshot(),
        baseline_accuracy=baseline,
    )
