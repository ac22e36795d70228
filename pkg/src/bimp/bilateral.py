"""Soft cluster assignment, min-cut losses and class-aware edge gates.

An :class:`AssignmentNet` attached to a layer maps node states to a
row-stochastic assignment matrix S, scores every edge by a learned
Mahalanobis distance between the endpoint assignments, turns distances into
similarities ``beta = exp(-dist / (2 sigma^2))`` and normalises
``sigmoid(beta)`` over each node's in-neighbours to obtain the gates.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .graph import Graph, GraphBatch
from .nn import Module, glorot


def soft_assign(h, w1, w2) -> Tensor:
    """S = row-softmax(ReLU(H W1) W2)."""
    h, w1, w2 = ad.as_tensor(h), ad.as_tensor(w1), ad.as_tensor(w2)
    if h.ndim != 2 or h.shape[1] != w1.shape[0] or w1.shape[1] != w2.shape[0]:
        raise ad.ShapeError(f"soft_assign: shapes {h.shape}, {w1.shape}, {w2.shape} do not chain")
    return ad.softmax_rows(ad.relu(h @ w1) @ w2)


# ---------------------------------------------------------------------------
# unsupervised losses


def mincut_loss(g: Graph, s) -> Tensor:
    """-Tr(Sᵀ A S) / Tr(Sᵀ D S) on the raw adjacency of one graph."""
    s = ad.as_tensor(s)
    if g.num_edges == 0:
        raise ValueError("mincut_loss: graph has no edges")
    if s.shape[0] != g.num_nodes:
        raise ad.ShapeError(f"mincut_loss: S has {s.shape[0]} rows for {g.num_nodes} nodes")
    a = g.adjacency()
    d = np.diag(a.sum(axis=1))
    num = ad.trace(s.T @ (a @ s))
    den = ad.trace(s.T @ (d @ s))
    return -(num / den)


def ortho_loss(s) -> Tensor:
    """‖SᵀS / ‖SᵀS‖_F − I/√K‖_F."""
    s = ad.as_tensor(s)
    gram = s.T @ s
    norm = ad.frobenius_norm(gram)
    if norm.data == 0.0:
        raise ValueError("ortho_loss: assignment matrix is all zero")
    k = s.shape[1]
    return ad.frobenius_norm(gram / norm - np.eye(k) / np.sqrt(k))


def batch_mincut_loss(batch: GraphBatch, s) -> Tensor:
    """Per-graph min-cut loss over a batch, from the edge list. Shape (B,)."""
    s = ad.as_tensor(s)
    edge_dot = ad.sum_(ad.gather_rows(s, batch.src) * ad.gather_rows(s, batch.dst), axis=1)
    num = ad.segment_sum(edge_dot, batch.edge_graph)
    node_sq = ad.sum_(s * s, axis=1) * batch.degree
    den = ad.segment_sum(node_sq, batch.node_graph)
    if np.any(den.data == 0.0):
        raise ValueError("mincut_loss: a graph in the batch has no edges")
    return -(num / den)


def batch_ortho_loss(batch: GraphBatch, s) -> Tensor:
    """Per-graph orthogonality loss over a batch. Shape (B,)."""
    s = ad.as_tensor(s)
    k = s.shape[1]
    gram = ad.segment_sum(ad.row_outer(s), batch.node_graph)
    norm = ad.sqrt(ad.sum_(gram * gram, axis=1, keepdims=True))
    if np.any(norm.data == 0.0):
        raise ValueError("ortho_loss: assignment matrix is all zero")
    diff = gram / norm - (np.eye(k) / np.sqrt(k)).reshape(1, -1)
    return ad.sqrt(ad.sum_(diff * diff, axis=1))


def unsup_loss(layer_losses: Sequence[Tensor]) -> Tensor:
    """Mean of the per-layer (min-cut + orthogonality) losses present."""
    if not layer_losses:
        warnings.warn("unsup_loss: no bilateral layers, returning 0", stacklevel=2)
        return Tensor(0.0)
    total = layer_losses[0]
    for loss in layer_losses[1:]:
        total = total + loss
    return ad.scale(total, 1.0 / len(layer_losses))


# ---------------------------------------------------------------------------
# modular gradient and gates


def mahalanobis(s_u, s_v, w_m) -> Tensor:
    """sqrt((s_u - s_v)ᵀ W Wᵀ (s_u - s_v)), row-wise for stacked inputs."""
    s_u, s_v, w_m = ad.as_tensor(s_u), ad.as_tensor(s_v), ad.as_tensor(w_m)
    if s_u.shape != s_v.shape:
        raise ad.ShapeError(f"mahalanobis: shapes {s_u.shape} and {s_v.shape}")
    single = s_u.ndim == 1
    diff = s_u - s_v
    if single:
        diff = ad.reshape(diff, (1, -1))
    proj = diff @ w_m
    dist = ad.sqrt(ad.clamp_min(ad.sum_(proj * proj, axis=1), 0.0))
    return ad.reshape(dist, ()) if single else dist


def similarity(dist, sigma_m: float) -> Tensor:
    if sigma_m <= 0:
        raise ValueError(f"sigma_m must be positive, got {sigma_m}")
    return ad.exp(ad.scale(dist, -1.0 / (2.0 * sigma_m ** 2)))


def modular_gradient(s_u, s_v, w_m, sigma_m: float) -> Tensor:
    """exp(-D(s_u, s_v) / (2 sigma_m^2)) with D the learned Mahalanobis distance."""
    return similarity(mahalanobis(s_u, s_v, w_m), sigma_m)


def normalize_gates(batch: GraphBatch | Graph, beta) -> Tensor:
    """sigmoid(beta) normalised over the in-neighbours of each target node."""
    if isinstance(batch, Graph):
        batch = GraphBatch([batch])
    beta = ad.as_tensor(beta)
    if beta.shape != (batch.num_directed,):
        raise ad.ShapeError(f"normalize_gates: {beta.shape} values for {batch.num_directed} edges")
    sig = ad.sigmoid(beta)
    denom = ad.gather_rows(ad.segment_sum(sig, batch.dst), batch.dst)
    return sig / denom


@dataclass
class Assignment:
    s: Tensor
    beta: Tensor
    gates: Tensor
    mincut: Tensor
    ortho: Tensor

    @property
    def loss(self) -> Tensor:
        """Batch mean of min-cut + orthogonality."""
        return ad.mean(self.mincut + self.ortho)


class AssignmentNet(Module):
    """Per-layer assignment network producing S, beta and gates."""

    def __init__(self, dim: int, clusters: int, rng: np.random.Generator, sigma_m: float = 1.0,
                 metric_noise: float = 0.01):
        if clusters < 2:
            raise ValueError(f"need at least 2 clusters, got {clusters}")
        if sigma_m <= 0:
            raise ValueError(f"sigma_m must be positive, got {sigma_m}")
        self.W1 = glorot(rng, dim, dim)
        self.W2 = glorot(rng, dim, clusters)
        self.Wm = Tensor(np.eye(clusters) + metric_noise * rng.standard_normal((clusters, clusters)),
                         requires_grad=True)
        self.sigma_m = float(sigma_m)
        self.clusters = clusters

    @property
    def metric(self) -> np.ndarray:
        return self.Wm.data @ self.Wm.data.T

    def __call__(self, batch: GraphBatch, h) -> Assignment:
        s = soft_assign(h, self.W1, self.W2)
        beta = modular_gradient(
            ad.gather_rows(s, batch.src), ad.gather_rows(s, batch.dst), self.Wm, self.sigma_m)
        gates = normalize_gates(batch, beta)
        if batch.num_directed:
            mincut = batch_mincut_loss(batch, s)
        else:
            mincut = Tensor(np.zeros(batch.num_graphs))
        return Assignment(s, beta, gates, mincut, batch_ortho_loss(batch, s))
