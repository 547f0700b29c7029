"""Feedforward QoS-violation predictor: one input and one output neuron per microservice."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from typing import Iterable, Iterator, Sequence

import numpy as np

from .trace import (LabeledSample, MalformedTrace, MetricKind, NormalizationStats, TraceRecord,
                    featurize)

MODEL_HEADER = "# seer-sim model v1"


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int):
        self.epoch = epoch
        super().__init__(f"training loss became non-finite at epoch {epoch}")


class ModelFormatError(ValueError):
    pass


@dataclass
class Hyperparams:
    a: float = 0.01
    epsilon: float = 1e-8
    batch_size: int = 32
    epochs: int = 30
    hidden_width: int | None = None
    hidden_layers: int = 5
    seed: int = 0
    fire_threshold: float = 0.5
    positive_fraction: float = 0.25

    def __post_init__(self):
        if self.a <= 0 or self.epsilon <= 0:
            raise ValueError("learning rate and epsilon must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 < self.fire_threshold < 1:
            raise ValueError("fire_threshold must be in (0, 1)")

    def width_for(self, n: int) -> int:
        if self.hidden_width is not None:
            return self.hidden_width
        return min(256, max(16, 4 * n))


@dataclass
class Model:
    layer_dims: tuple[int, ...]
    weights: list[np.ndarray]          # weights[l] has shape (in, out)
    biases: list[np.ndarray]
    acc_w: list[np.ndarray]
    acc_b: list[np.ndarray]
    input_metric: MetricKind = MetricKind.QUEUE_DEPTH
    norm: NormalizationStats | None = None
    horizon: int = 50

    @property
    def n(self) -> int:
        return self.layer_dims[0]

    def copy(self) -> "Model":
        return replace(self, weights=[w.copy() for w in self.weights], biases=[b.copy() for b in self.biases],
                       acc_w=[g.copy() for g in self.acc_w], acc_b=[g.copy() for g in self.acc_b])


@dataclass(frozen=True)
class Alert:
    tick: int
    service: int
    score: float


def init(n_services: int, hyper: Hyperparams, *, metric: MetricKind = MetricKind.QUEUE_DEPTH,
         norm: NormalizationStats | None = None, horizon: int = 50) -> Model:
    """Glorot-uniform weights from the seeded generator, zero biases and accumulators."""
    if n_services < 1:
        raise ValueError("n_services must be >= 1")
    width = hyper.width_for(n_services)
    dims = (n_services,) + (width,) * hyper.hidden_layers + (n_services,)
    rng = np.random.default_rng(hyper.seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return Model(dims, weights, biases, [np.zeros_like(w) for w in weights],
                 [np.zeros_like(b) for b in biases], metric,
                 norm or NormalizationStats.identity(n_services), horizon)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def logits(model: Model, x: np.ndarray) -> np.ndarray:
    a = x
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = a @ w + b
        a = z if i == last else np.maximum(z, 0.0)
    return a


def forward(model: Model, x) -> np.ndarray:
    """Scores in (0, 1) for one input vector or a batch of rows."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != model.n:
        raise ValueError(f"input has {x.shape[-1]} features, model expects {model.n}")
    # clip keeps scores strictly inside (0, 1) where float64 would round to an endpoint
    return np.clip(_sigmoid(logits(model, x)), 1e-12, 1.0 - 1e-12)


def bce_loss(z: np.ndarray, y: np.ndarray) -> float:
    # mean per-output binary cross-entropy on logits
    return float(np.mean(np.logaddexp(0.0, z) - y * z))


def loss_and_grads(model: Model, x: np.ndarray, y: np.ndarray):
    """Mean per-output BCE and its gradients by backpropagation."""
    acts = [x]
    pre = []
    a = x
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = a @ w + b
        pre.append(z)
        a = z if i == last else np.maximum(z, 0.0)
        acts.append(a)
    z_out = pre[-1]
    loss = bce_loss(z_out, y)
    delta = (_sigmoid(z_out) - y) / z_out.size
    gw = [None] * len(model.weights)
    gb = [None] * len(model.weights)
    for i in range(last, -1, -1):
        gw[i] = acts[i].T @ delta
        gb[i] = delta.sum(axis=0)
        if i:
            delta = (delta @ model.weights[i].T) * (pre[i - 1] > 0)
    return loss, gw, gb


def adagrad_step(param: np.ndarray, acc: np.ndarray, grad: np.ndarray, a: float, eps: float) -> None:
    acc += grad * grad
    param -= a * grad / (np.sqrt(acc) + eps)


def _as_arrays(dataset) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(dataset, tuple):
        x, y = dataset
        return np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    if not dataset:
        raise ValueError("dataset is empty")
    x = np.vstack([s.input for s in dataset]).astype(float)
    y = np.vstack([s.label for s in dataset]).astype(float)
    return x, y


def _epoch_order(rng: np.random.Generator, y: np.ndarray, positive_fraction: float) -> np.ndarray:
    pos = np.nonzero(y.any(axis=1))[0]
    neg = np.nonzero(~y.any(axis=1))[0]
    idx = np.arange(len(y))
    if len(pos) and len(neg) and positive_fraction > 0:
        want = math.ceil(positive_fraction * len(neg) / (1.0 - positive_fraction))
        if want > len(pos):
            idx = np.concatenate([idx, rng.choice(pos, size=want - len(pos), replace=True)])
    return rng.permutation(idx)


def train(model: Model, dataset, hyper: Hyperparams) -> tuple[Model, list[float]]:
    """ADAGRAD mini-batch training. Returns the trained copy and the loss curve:
    entry 0 is the full-dataset loss before training, entry e the mean batch loss of epoch e."""
    x, y = _as_arrays(dataset)
    if x.shape[0] == 0:
        raise ValueError("dataset is empty")
    if x.shape[1] != model.n or y.shape[1] != model.n:
        raise ValueError("sample width does not match model")
    model = model.copy()
    rng = np.random.default_rng([hyper.seed, 1])
    curve = [bce_loss(logits(model, x), y)]
    bs = hyper.batch_size
    for epoch in range(1, hyper.epochs + 1):
        order = _epoch_order(rng, y.astype(bool), hyper.positive_fraction)
        total = 0.0
        batches = 0
        for start in range(0, len(order), bs):
            sel = order[start:start + bs]
            loss, gw, gb = loss_and_grads(model, x[sel], y[sel])
            if not math.isfinite(loss):
                raise TrainingDiverged(epoch)
            for p, g, acc in zip(model.weights, gw, model.acc_w):
                adagrad_step(p, acc, g, hyper.a, hyper.epsilon)
            for p, g, acc in zip(model.biases, gb, model.acc_b):
                adagrad_step(p, acc, g, hyper.a, hyper.epsilon)
            total += loss
            batches += 1
        mean = total / batches
        if not math.isfinite(mean):
            raise TrainingDiverged(epoch)
        curve.append(mean)
    return model, curve


# ---------------------------------------------------------------- streaming
class StreamingInference:
    """Per-tick featurize -> forward -> alert, with per-service alert de-duplication.

    A service that alerted stays silent until it has gone `horizon` ticks
    without an above-threshold score.
    """

    def __init__(self, model: Model, fire_threshold: float = 0.5, dedup: bool = True):
        self.model = model
        self.threshold = fire_threshold
        self.dedup = dedup
        self.latencies: list[float] = []
        self.skipped = 0
        self._last_above = [None] * model.n
        self.last_scores: np.ndarray | None = None

    def step(self, tick: int, records: Sequence[TraceRecord]) -> list[Alert]:
        t0 = time.perf_counter()
        try:
            x = featurize(records, self.model.input_metric, self.model.norm)
        except MalformedTrace:
            self.skipped += 1
            return []
        scores = forward(self.model, x)
        self.latencies.append(time.perf_counter() - t0)
        self.last_scores = scores
        alerts = []
        for k in np.nonzero(scores >= self.threshold)[0].tolist():
            prev = self._last_above[k]
            self._last_above[k] = tick
            if self.dedup and prev is not None and tick - prev <= self.model.horizon:
                continue
            alerts.append(Alert(tick, k, float(scores[k])))
        return alerts


def infer_stream(model: Model, snapshots: Iterable[tuple[int, Sequence[TraceRecord]]],
                 fire_threshold: float = 0.5, dedup: bool = True,
                 engine: StreamingInference | None = None) -> Iterator[Alert]:
    """Pull one (tick, records) snapshot at a time; the producer is never read ahead."""
    engine = engine or StreamingInference(model, fire_threshold, dedup)
    for tick, records in snapshots:
        yield from engine.step(tick, records)


# ---------------------------------------------------------------- persistence
def _row(arr: np.ndarray) -> str:
    return " ".join(repr(v) for v in arr.tolist())


def save(model: Model, path) -> None:
    lines = [MODEL_HEADER,
             f"metric {model.input_metric.value}",
             f"horizon {model.horizon}",
             "dims " + " ".join(map(str, model.layer_dims)),
             "norm_mean " + _row(np.asarray(model.norm.mean)),
             "norm_std " + _row(np.asarray(model.norm.std))]
    for i in range(len(model.weights)):
        for tag, arr in (("W", model.weights[i]), ("b", model.biases[i]),
                         ("GW", model.acc_w[i]), ("Gb", model.acc_b[i])):
            arr2 = arr.reshape(arr.shape[0], -1) if arr.ndim == 2 else arr.reshape(1, -1)
            lines.append(f"{tag} {i} {arr2.shape[0]} {arr2.shape[1]}")
            lines.extend(_row(r) for r in arr2)
    lines.append("end")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def load(path) -> Model:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    if not lines or lines[0] != MODEL_HEADER:
        raise ModelFormatError(f"{path}: expected version line {MODEL_HEADER!r}")
    try:
        metric = MetricKind.parse(lines[1].split(" ", 1)[1])
        horizon = int(lines[2].split()[1])
        dims = tuple(int(v) for v in lines[3].split()[1:])
        mean = np.array(lines[4].split()[1:], dtype=float)
        std = np.array(lines[5].split()[1:], dtype=float)
    except (IndexError, ValueError) as exc:
        raise ModelFormatError(f"{path}: corrupt model header: {exc}") from None
    if len(dims) < 2 or len(mean) != dims[0] or len(std) != dims[0]:
        raise ModelFormatError(f"{path}: shape mismatch in header")
    pos = 6
    arrays: dict[tuple[str, int], np.ndarray] = {}
    n_layers = len(dims) - 1
    try:
        for i in range(n_layers):
            for tag in ("W", "b", "GW", "Gb"):
                head = lines[pos].split()
                if head[0] != tag or int(head[1]) != i:
                    raise ModelFormatError(f"{path}: expected block {tag} {i}, got {lines[pos]!r}")
                rows, cols = int(head[2]), int(head[3])
                block = np.array([np.array(lines[pos + 1 + r].split(), dtype=float) for r in range(rows)])
                if block.shape != (rows, cols):
                    raise ModelFormatError(f"{path}: block {tag} {i} has shape {block.shape}")
                arrays[(tag, i)] = block if tag in ("W", "GW") else block.reshape(-1)
                pos += 1 + rows
    except (IndexError, ValueError) as exc:
        raise ModelFormatError(f"{path}: truncated or corrupt model body ({exc})") from None
    if pos >= len(lines) or lines[pos] != "end":
        raise ModelFormatError(f"{path}: missing end marker (truncated file?)")
    weights = [arrays[("W", i)] for i in range(n_layers)]
    for i, w in enumerate(weights):
        if w.shape != (dims[i], dims[i + 1]):
            raise ModelFormatError(f"{path}: layer {i} weight shape {w.shape} does not match dims")
    return Model(dims, weights, [arrays[("b", i)] for i in range(n_layers)],
                 [arrays[("GW", i)] for i in range(n_layers)], [arrays[("Gb", i)] for i in range(n_layers)],
                 metric, NormalizationStats(tuple(mean.tolist()), tuple(std.tolist())), horizon)
