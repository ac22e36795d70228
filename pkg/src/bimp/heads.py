"""Task heads, mean readout and supervised losses."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .graph import Graph, GraphBatch


class TaskKind(str, enum.Enum):
    NODE_CLASS = "node-class"
    EDGE_BINARY = "edge-binary"
    GRAPH_REG = "graph-reg"
    GRAPH_CLASS = "graph-class"


@dataclass
class TaskSpec:
    kind: TaskKind = TaskKind.NODE_CLASS
    num_classes: int = 2

    def __post_init__(self):
        self.kind = TaskKind(self.kind)
        if self.classifies and self.num_classes < 2:
            raise ValueError(f"classification needs >= 2 classes, got {self.num_classes}")

    @property
    def classifies(self) -> bool:
        return self.kind in (TaskKind.NODE_CLASS, TaskKind.GRAPH_CLASS)

    @property
    def out_dim(self) -> int:
        if self.classifies:
            return self.num_classes
        return 1

    def head_in_dim(self, hidden: int) -> int:
        return 2 * hidden if self.kind is TaskKind.EDGE_BINARY else hidden


def _linear(op: str, x, w, b=None) -> Tensor:
    x, w = ad.as_tensor(x), ad.as_tensor(w)
    if x.shape[-1] != w.shape[0]:
        raise ad.ShapeError(f"{op}: input width {x.shape} does not match weight {w.shape}")
    y = x @ w
    return y if b is None else y + b


def mean_readout(batch: GraphBatch | Graph, h) -> Tensor:
    """Per-graph mean of node rows, shape (B, D)."""
    if isinstance(batch, Graph):
        batch = GraphBatch([batch])
    if np.any(batch.node_graph.counts == 0):
        raise ValueError("mean_readout: empty graph")
    return ad.segment_mean(h, batch.node_graph)


def node_head(h, w, b=None) -> Tensor:
    """Per-node logits ``h @ W``."""
    return _linear("node_head", h, w, b)


def edge_head(h_src, h_dst, w, b=None) -> Tensor:
    """Logits from the concatenated endpoint representations."""
    return _linear("edge_head", ad.concat([h_src, h_dst], axis=1), w, b)


def graph_head(z, w, b=None) -> Tensor:
    return _linear("graph_head", z, w, b)


# ---------------------------------------------------------------------------
# losses


def class_weights(labels: np.ndarray, num_classes: int) -> np.ndarray:
    """Inverse-frequency weights; classes absent from ``labels`` get 0."""
    counts = np.bincount(labels, minlength=num_classes).astype(np.float64)
    return np.divide(len(labels), num_classes * counts, out=np.zeros_like(counts), where=counts > 0)


def cross_entropy(logits, labels: np.ndarray, weights: np.ndarray | None = None) -> Tensor:
    """(Weighted) mean negative log-likelihood of integer labels."""
    logits = ad.as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    c = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"label outside [0, {c})")
    onehot = np.zeros(logits.shape)
    onehot[np.arange(len(labels)), labels] = 1.0
    row_w = np.ones(len(labels)) if weights is None else weights[labels]
    coef = onehot * (row_w / row_w.sum())[:, None]
    return -ad.sum_(ad.log_softmax_rows(logits) * coef)


def binary_cross_entropy(logits, labels: np.ndarray, pos_weight: float = 1.0) -> Tensor:
    """Weighted-mean BCE on logits; positives carry ``pos_weight``."""
    z = ad.reshape(ad.as_tensor(logits), (-1,))
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if np.any((y != 0) & (y != 1)):
        raise ValueError("binary labels must be 0 or 1")
    w = np.where(y == 1, pos_weight, 1.0)
    log_p = ad.log_sigmoid(z)
    log_q = ad.log_sigmoid(-z)
    ll = log_p * (y * w) + log_q * ((1 - y) * w)
    return ad.scale(ad.sum_(ll), -1.0 / w.sum())


def mean_absolute_error(pred, target: np.ndarray) -> Tensor:
    pred = ad.reshape(ad.as_tensor(pred), (-1,))
    return ad.mean(ad.abs_(pred - np.asarray(target, dtype=np.float64).reshape(-1)))


def task_loss(pred, targets: np.ndarray, spec: TaskSpec) -> Tensor:
    kind = spec.kind
    if kind is TaskKind.NODE_CLASS:
        return cross_entropy(pred, targets, class_weights(np.asarray(targets), spec.num_classes))
    if kind is TaskKind.GRAPH_CLASS:
        return cross_entropy(pred, targets)
    if kind is TaskKind.GRAPH_REG:
        return mean_absolute_error(pred, targets)
    y = np.asarray(targets)
    pos = float(np.sum(y == 1))
    pos_weight = (len(y) - pos) / pos if pos > 0 else 1.0
    return binary_cross_entropy(pred, y, pos_weight)
