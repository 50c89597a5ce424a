"""Accuracy, PSNR privacy metric, cross-client feature alignment, CSV export."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Mapping

import numpy as np

from .autodiff import Model, no_grad
from .data import Dataset

if TYPE_CHECKING:
    from .synthesis import SyntheticDataset

Array = np.ndarray

PSNR_CAP_DB = 100.0
_PSNR_MSE_FLOOR = 1e-10

METRICS_HEADER = "round,accuracy,train_loss,syn_size,psnr,loss_drop,alignment,ms"


@dataclass
class MetricsRow:
    """One emitted row per communication round; optional fields may be None."""

    round_index: int
    accuracy: float
    train_loss: float
    syn_size: int
    psnr: float | None
    loss_drop: float | None
    alignment: float | None
    wall_ms: float


def accuracy(model: Model, data: Dataset) -> float:
    """Fraction of argmax-correct predictions; ties resolve to the lowest class."""
    if len(data) == 0:
        raise ValueError("accuracy requires a nonempty dataset")
    with no_grad():
        _, logits = model.forward(data.inputs)
    predictions = np.argmax(logits.data, axis=1)
    return float(np.mean(predictions == data.labels))


def psnr(candidate, reference) -> float:
    """Peak signal-to-noise ratio in dB for inputs in [0, 1]; capped at 100 dB."""
    a = np.asarray(candidate, dtype=np.float64)
    b = np.asarray(reference, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"psnr operands must share shape, got {a.shape} and {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse < _PSNR_MSE_FLOOR:
        return PSNR_CAP_DB
    return 10.0 * math.log10(1.0 / mse)


def dataset_psnr(syn: "SyntheticDataset", shard: Dataset) -> float:
    """Mean per-pair PSNR of synthetic samples against their paired reals."""
    if not syn.samples:
        raise ValueError("dataset_psnr requires a nonempty synthetic dataset")
    values = []
    for sample in syn.samples:
        if not 0 <= sample.paired_index < len(shard):
            raise ValueError(f"paired index {sample.paired_index} outside shard of size {len(shard)}")
        values.append(psnr(sample.x, shard.inputs[sample.paired_index]))
    return float(np.mean(values))


def class_feature_means(model: Model, data: Dataset) -> dict[int, Array]:
    """Per-class mean extractor feature over a dataset, under the given model."""
    with no_grad():
        features = model.extract(data.inputs).data
    return {int(c): features[data.labels == c].mean(axis=0) for c in np.unique(data.labels)}


def alignment_score(client_means: Mapping[int, Mapping[int, Array]]) -> float | None:
    """Mean pairwise distance between client feature centroids of shared classes.

    Lower means client representations agree; None when no class is held by
    at least two clients.
    """
    client_ids = sorted(client_means)
    classes = sorted({c for k in client_ids for c in client_means[k]})
    per_class = []
    for c in classes:
        centroids = [client_means[k][c] for k in client_ids if c in client_means[k]]
        if len(centroids) < 2:
            continue
        dists = [
            float(np.linalg.norm(centroids[i] - centroids[j]))
            for i in range(len(centroids))
            for j in range(i + 1, len(centroids))
        ]
        per_class.append(float(np.mean(dists)))
    if not per_class:
        return None
    return float(np.mean(per_class))


def export_features(model: Model, inputs, labels, origins, path: Path) -> Path:
    """Write extractor features as CSV rows of (f0..f{F-1}, label, origin)."""
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("export_features requires a nonempty (N, dim) input matrix")
    labels = [int(v) for v in labels]
    origins = [str(v) for v in origins]
    if len(labels) != x.shape[0] or len(origins) != x.shape[0]:
        raise ValueError("inputs, labels, and origins must have matching lengths")
    with no_grad():
        features = model.extract(x).data
    width = features.shape[1]
    lines = [",".join([f"f{i}" for i in range(width)] + ["label", "origin"])]
    for row, label, origin in zip(features, labels, origins):
        lines.append(",".join([repr(float(v)) for v in row] + [str(label), origin]))
    path = Path(path)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def _fmt(value: float | None) -> str:
    return "" if value is None else repr(float(value))


def write_metrics_csv(rows, path: Path) -> Path:
    """One row per round; optional fields render as empty strings; LF endings."""
    lines = [METRICS_HEADER]
    for r in rows:
        lines.append(
            ",".join(
                [
                    str(r.round_index),
                    _fmt(r.accuracy),
                    _fmt(r.train_loss),
                    str(r.syn_size),
                    _fmt(r.psnr),
                    _fmt(r.loss_drop),
                    _fmt(r.alignment),
                    _fmt(r.wall_ms),
                ]
            )
        )
    path = Path(path)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path
