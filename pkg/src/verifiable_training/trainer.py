"""Deterministic reference trainer: linear and logistic regression on CSV data.

Reproducibility rules, which the attestation layer relies on:

* weights and bias start at zero (or at a supplied warm-start model);
* the linear predictor is accumulated feature by feature, left to right,
  ``z = x0*w0 + x1*w1 + ... + b``;
* every reduction over rows is a strict left-to-right running sum
  (``numpy.cumsum``), never a pairwise or BLAS reduction;
* mini-batch order comes from a 64-bit LCG (Knuth's MMIX constants
  a = 6364136223846793005, c = 1442695040888963407, mod 2**64) driving a
  Fisher-Yates shuffle, reseeded per epoch with ``seed + epoch``. When
  ``batch_size >= n_rows`` the whole dataset is one batch in file order.
"""

from __future__ import annotations

import csv
import io
import math
import struct
import time
from array import array
from dataclasses import dataclass

import numpy as np

from .core import Task, TrainingConfig, TrainingMetrics
from .errors import MalformedCsv, NonFiniteLoss

MODEL_MAGIC = b"RTM1"
LCG_MULTIPLIER = 6364136223846793005
LCG_INCREMENT = 1442695040888963407
_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class Dataset:
    feature_names: tuple[str, ...]
    rows: np.ndarray  # (n_rows, n_features) float64
    targets: np.ndarray  # (n_rows,) float64

    @property
    def n_rows(self) -> int:
        return int(self.rows.shape[0])

    @property
    def n_features(self) -> int:
        return int(self.rows.shape[1])


@dataclass(frozen=True)
class ModelWeights:
    weights: tuple[float, ...]
    bias: float = 0.0

    @classmethod
    def zeros(cls, n_features: int) -> ModelWeights:
        return cls(weights=(0.0,) * n_features, bias=0.0)


# ---------------------------------------------------------------------------
# CSV


def parse_dataset(data: bytes) -> Dataset:
    if not data:
        raise MalformedCsv("empty file")
    try:
        text = io.TextIOWrapper(io.BytesIO(data), encoding="utf-8", newline="")
        reader = csv.reader(text)
        header = next(reader, None)
        if not header:
            raise MalformedCsv("missing header row")
        width = len(header)
        if width < 2:
            raise MalformedCsv("header needs at least one feature column and a target column")
        if any(not h.strip() for h in header):
            raise MalformedCsv("header contains an empty column name")
        values = array("d")
        n_rows = 0
        for line_no, row in enumerate(reader, start=2):
            if len(row) != width:
                raise MalformedCsv(f"line {line_no}: expected {width} cells, found {len(row)}")
            for cell in row:
                try:
                    v = float(cell)
                except ValueError:
                    raise MalformedCsv(f"line {line_no}: non-numeric cell {cell!r}") from None
                if not math.isfinite(v):
                    raise MalformedCsv(f"line {line_no}: non-finite cell {cell!r}")
                values.append(v)
            n_rows += 1
    except UnicodeDecodeError as exc:
        raise MalformedCsv(f"not UTF-8: {exc}") from None
    except csv.Error as exc:
        raise MalformedCsv(str(exc)) from None
    if n_rows == 0:
        raise MalformedCsv("no data rows")
    table = np.frombuffer(values, dtype=np.float64).reshape(n_rows, width)
    return Dataset(
        feature_names=tuple(h.strip() for h in header[:-1]),
        rows=np.ascontiguousarray(table[:, :-1]),
        targets=np.ascontiguousarray(table[:, -1]),
    )


def check_header(data: bytes) -> list[str]:
    """Cheap structural check used at submission time; returns the header."""
    first = data.split(b"\n", 1)[0].rstrip(b"\r")
    try:
        header = next(csv.reader([first.decode("utf-8")]), [])
    except (UnicodeDecodeError, csv.Error) as exc:
        raise MalformedCsv(f"unreadable header: {exc}") from None
    if len(header) < 2 or any(not h.strip() for h in header):
        raise MalformedCsv("header needs at least one feature column and a target column")
    return header


# ---------------------------------------------------------------------------
# model format


def serialize_model(w: ModelWeights) -> bytes:
    """``RTM1`` followed by the weights then the bias, little-endian float64."""
    return MODEL_MAGIC + struct.pack(f"<{len(w.weights) + 1}d", *w.weights, w.bias)


def parse_model(data: bytes) -> ModelWeights:
    if not data.startswith(MODEL_MAGIC):
        raise ValueError("not an RTM1 model")
    body = data[len(MODEL_MAGIC):]
    if len(body) < 8 or len(body) % 8:
        raise ValueError("truncated RTM1 model")
    values = struct.unpack(f"<{len(body) // 8}d", body)
    if not all(math.isfinite(v) for v in values):
        raise ValueError("RTM1 model holds non-finite values")
    return ModelWeights(weights=tuple(values[:-1]), bias=values[-1])


# ---------------------------------------------------------------------------
# numerics


def _seq_sum(v: np.ndarray) -> float:
    return float(np.cumsum(v)[-1])


def _predictor(x: np.ndarray, w: np.ndarray, b: float) -> np.ndarray:
    z = np.zeros(x.shape[0], dtype=np.float64)
    for j in range(x.shape[1]):
        z = z + x[:, j] * w[j]
    return z + b


def _sigmoid(z: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-z))


def loss_and_gradient(
    x: np.ndarray, y: np.ndarray, w: np.ndarray, b: float, task: Task
) -> tuple[float, np.ndarray, float]:
    """Mean loss and its gradient with respect to (weights, bias).

    Regression uses mean squared error ``mean((z - y)**2)``; classification
    uses mean logistic loss ``mean(log(1 + exp(z)) - y*z)``.
    """
    n = x.shape[0]
    # overflow shows up as a non-finite loss, which train() reports as NonFiniteLoss
    with np.errstate(over="ignore", invalid="ignore"):
        z = _predictor(x, w, b)
        if Task(task) is Task.REGRESSION:
            r = z - y
            loss = _seq_sum(r * r) / n
            scale = 2.0 / n
        else:
            loss = _seq_sum(np.logaddexp(0.0, z) - y * z) / n
            r = _sigmoid(z) - y
            scale = 1.0 / n
        grad_w = np.array([scale * _seq_sum(r * x[:, j]) for j in range(x.shape[1])], dtype=np.float64)
        grad_b = scale * _seq_sum(r)
    return loss, grad_w, grad_b


def lcg_stream(seed: int):
    state = seed & _MASK64
    while True:
        state = (state * LCG_MULTIPLIER + LCG_INCREMENT) & _MASK64
        yield state


def shuffled_indices(n: int, seed: int) -> np.ndarray:
    """Fisher-Yates permutation of range(n) driven by the documented LCG."""
    idx = list(range(n))
    rng = lcg_stream(seed)
    for i in range(n - 1, 0, -1):
        j = (next(rng) >> 11) % (i + 1)
        idx[i], idx[j] = idx[j], idx[i]
    return np.asarray(idx, dtype=np.int64)


def _check_targets(dataset: Dataset, task: Task) -> None:
    if Task(task) is Task.CLASSIFICATION:
        bad = ~np.isin(dataset.targets, (0.0, 1.0))
        if bad.any():
            row = int(np.argmax(bad)) + 2
            raise MalformedCsv(f"line {row}: classification target must be 0 or 1")


def train(
    dataset: Dataset,
    config: TrainingConfig,
    init: ModelWeights | None = None,
) -> tuple[ModelWeights, TrainingMetrics]:
    config.validate()
    task = Task(config.task)
    _check_targets(dataset, task)
    started = time.perf_counter()

    if init is None:
        w = np.zeros(dataset.n_features, dtype=np.float64)
        b = 0.0
    else:
        if len(init.weights) != dataset.n_features:
            raise ValueError(
                f"base model has {len(init.weights)} weights, dataset has {dataset.n_features} features"
            )
        w = np.array(init.weights, dtype=np.float64)
        b = float(init.bias)

    x, y = dataset.rows, dataset.targets
    n = dataset.n_rows
    lr = float(config.learning_rate)
    losses: list[float] = []
    for epoch in range(config.epochs):
        if config.batch_size >= n:
            batches = [slice(None)]
        else:
            order = shuffled_indices(n, config.seed + epoch)
            batches = [order[i:i + config.batch_size] for i in range(0, n, config.batch_size)]
        for sel in batches:
            xb, yb = (x, y) if isinstance(sel, slice) else (x[sel], y[sel])
            _, gw, gb = loss_and_gradient(xb, yb, w, b, task)
            w = w - lr * gw
            b = b - lr * gb
        loss, _, _ = loss_and_gradient(x, y, w, b, task)
        if not math.isfinite(loss) or not np.all(np.isfinite(w)) or not math.isfinite(b):
            raise NonFiniteLoss(f"training diverged at epoch {epoch + 1}")
        losses.append(loss)

    model = ModelWeights(weights=tuple(float(v) for v in w), bias=float(b))
    metrics = TrainingMetrics(
        final_loss=losses[-1] if losses else None,
        loss_per_epoch=tuple(losses),
        duration_seconds=time.perf_counter() - started,
    )
    return model, metrics
