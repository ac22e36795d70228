"""Model assembly: encoder, a stack of (bilateral) MP layers, and a task head."""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .bilateral import AssignmentNet
from .graph import GraphBatch
from .heads import TaskKind, TaskSpec
from .layers import GatedGCNLayer, LayerKind, make_layer
from .nn import Linear, Module


class BilateralScheme(str, enum.Enum):
    NONE = "none"
    BOOSTING = "boosting"
    INTERLEAVED = "interleaved"
    DENSE = "dense"


def bilateral_flags(scheme: BilateralScheme | str, depth: int) -> list[bool]:
    """Which layers (0-based list, 1-based layer numbers) carry gates.

    boosting: layer 2 only; interleaved: layers 2, 4, ...; dense: all.
    """
    scheme = BilateralScheme(scheme)
    if scheme is BilateralScheme.NONE:
        return [False] * depth
    if scheme is BilateralScheme.DENSE:
        return [True] * depth
    if scheme is BilateralScheme.BOOSTING:
        if depth < 2:
            raise ValueError("boosting needs at least 2 layers")
        return [i == 1 for i in range(depth)]
    return [i % 2 == 1 for i in range(depth)]


@dataclass
class ModelConfig:
    layer_kind: str = "gcn"
    depth: int = 4
    hidden: int = 32
    scheme: str = "none"
    clusters: int | None = None
    sigma_m: float = 1.0
    lam: float = 1.0
    eps: float = 1e-6
    heads: int = 8
    task: str = "node-class"
    num_classes: int = 2
    in_dim: int = 1
    edge_in_dim: int = 1
    dropout: float = 0.0
    residual: bool = True
    batch_norm: bool = True

    def validate(self) -> None:
        LayerKind(self.layer_kind)
        BilateralScheme(self.scheme)
        TaskKind(self.task)
        if self.depth < 1 or self.hidden < 1:
            raise ValueError(f"depth and hidden width must be positive ({self.depth}, {self.hidden})")
        if self.scheme == BilateralScheme.BOOSTING and self.depth < 2:
            raise ValueError("boosting needs depth >= 2")
        if self.layer_kind == LayerKind.GAT and self.hidden % self.heads:
            raise ValueError(f"hidden width {self.hidden} not divisible by {self.heads} heads")
        if self.sigma_m <= 0:
            raise ValueError("sigma_m must be positive")
        if self.scheme != BilateralScheme.NONE and self.n_clusters < 2:
            raise ValueError("need at least 2 clusters")

    @property
    def task_spec(self) -> TaskSpec:
        return TaskSpec(TaskKind(self.task), self.num_classes)

    @property
    def n_clusters(self) -> int:
        if self.clusters is not None:
            return self.clusters
        return self.num_classes if self.task == TaskKind.NODE_CLASS else 8

    def to_dict(self) -> dict:
        return asdict(self)


class ModelOutput(NamedTuple):
    pred: Tensor
    unsup: list[Tensor]
    trace: list[np.ndarray]


class Model(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        cfg.validate()
        self.cfg = cfg
        kind = LayerKind(cfg.layer_kind)
        spec = cfg.task_spec
        self.flags = bilateral_flags(cfg.scheme, cfg.depth)
        self.encoder = Linear(cfg.in_dim, cfg.hidden, rng)
        self.edge_encoder = Linear(cfg.edge_in_dim, cfg.hidden, rng) if kind is LayerKind.GATED_GCN else None
        self.layers = [
            make_layer(kind, cfg.hidden, rng, heads=cfg.heads, batch_norm=cfg.batch_norm,
                       residual=cfg.residual, eps=cfg.eps)
            for _ in range(cfg.depth)
        ]
        self.assign = {
            str(i): AssignmentNet(cfg.hidden, cfg.n_clusters, rng, sigma_m=cfg.sigma_m)
            for i, flag in enumerate(self.flags) if flag
        }
        self.head = Linear(spec.head_in_dim(cfg.hidden), spec.out_dim, rng)
        self._dropout_rng = np.random.default_rng(rng.integers(2**63))

    def forward(self, batch: GraphBatch, capture: bool = False) -> ModelOutput:
        cfg = self.cfg
        h = self.encoder(batch.x)
        e_hat = None
        if self.edge_encoder is not None:
            ef = batch.edge_features()
            if ef is None:
                ef = np.ones((batch.num_directed, cfg.edge_in_dim))
            e_hat = self.edge_encoder(ef)
        trace = [h.data] if capture else []
        unsup = []
        for i, layer in enumerate(self.layers):
            gates = None
            if self.flags[i]:
                res = self.assign[str(i)](batch, h)
                gates = res.gates
                unsup.append(res.loss)
            if isinstance(layer, GatedGCNLayer):
                h, e_hat = layer(batch, h, e_hat, gates=gates)
            else:
                h = layer(batch, h, gates=gates)
            if self.training and cfg.dropout > 0:
                h = ad.dropout(h, cfg.dropout, self._dropout_rng)
            if capture:
                trace.append(h.data)
        return ModelOutput(self._head(batch, h), unsup, trace)

    __call__ = forward

    def _head(self, batch: GraphBatch, h: Tensor) -> Tensor:
        kind = self.cfg.task_spec.kind
        if kind is TaskKind.NODE_CLASS:
            return self.head(h)
        if kind is TaskKind.EDGE_BINARY:
            pair = ad.concat([ad.gather_rows(h, batch.src), ad.gather_rows(h, batch.dst)], axis=1)
            return self.head(pair)
        z = ad.segment_mean(h, batch.node_graph)
        return self.head(z)

    def targets(self, batch: GraphBatch) -> np.ndarray:
        kind = self.cfg.task_spec.kind
        if kind is TaskKind.NODE_CLASS:
            return batch.node_labels()
        if kind is TaskKind.EDGE_BINARY:
            return batch.edge_labels()
        t = batch.graph_targets()
        return t.astype(np.int64) if kind is TaskKind.GRAPH_CLASS else t


def build_model(cfg: ModelConfig, rng: np.random.Generator | int) -> Model:
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    return Model(cfg, rng)
