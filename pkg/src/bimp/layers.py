"""Message-passing layers and their bilateral (gated) variants.

All layers share the signature ``layer(batch, h, gates=None)`` (GatedGCN also
takes and returns edge states). ``gates`` is the per-directed-edge vector of
normalised modular gradients; ``None`` runs the baseline layer. Features are
row vectors, so weight matrices act on the right (``h @ U``).
"""

from __future__ import annotations

import enum

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .graph import GraphBatch
from .nn import BatchNorm, Module, glorot


class LayerKind(str, enum.Enum):
    GCN = "gcn"
    SAGE = "graphsage"
    GAT = "gat"
    GATED_GCN = "gatedgcn"


def _check_width(op: str, h: Tensor, dim: int) -> None:
    if h.ndim != 2 or h.shape[1] != dim:
        raise ad.ShapeError(f"{op}: expected (N, {dim}) features, got {h.shape}")


def _check_gates(op: str, batch: GraphBatch, gates) -> Tensor | None:
    if gates is None:
        return None
    gates = ad.as_tensor(gates)
    if gates.shape != (batch.num_directed,):
        raise ValueError(
            f"{op}: need one gate per directed edge ({batch.num_directed}), got shape {gates.shape}")
    return gates


class _Post(Module):
    """Optional batch norm before the activation and residual after it."""

    def _setup_post(self, dim: int, batch_norm: bool, residual: bool):
        self.bn = BatchNorm(dim) if batch_norm else None
        self.residual = residual

    def _finish(self, h: Tensor, z: Tensor, act=ad.relu) -> Tensor:
        if self.bn is not None:
            z = self.bn(z)
        out = act(z)
        return h + out if self.residual else out


class GCNLayer(_Post):
    """ReLU(U · mean of neighbour features); isolated nodes aggregate to zero.

    Gated: each neighbour term is weighted by ``gate / deg_v`` instead of
    ``1 / deg_v``.
    """

    def __init__(self, dim: int, rng: np.random.Generator, batch_norm: bool = False, residual: bool = False):
        self.dim = dim
        self.U = glorot(rng, dim, dim)
        self._setup_post(dim, batch_norm, residual)

    def __call__(self, batch: GraphBatch, h, gates=None) -> Tensor:
        _check_width("gcn_forward", h, self.dim)
        gates = _check_gates("gcn_forward", batch, gates)
        if gates is None:
            agg = ad.spmm(batch.mean_operator, h, batch.mean_operator_t)
        else:
            weights = gates * batch.inv_degree[batch.dst_index]
            agg = ad.edge_aggregate(weights, h, batch.src, batch.dst)
        return self._finish(h, agg @ self.U)


class SAGELayer(_Post):
    """ReLU(U · [h_v ; max over neighbours of ReLU(V h_u)]).

    Gated: each ReLU(V h_u) is scaled by its gate before the max. Isolated
    nodes use a zero max term.
    """

    def __init__(self, dim: int, rng: np.random.Generator, batch_norm: bool = False, residual: bool = False):
        self.dim = dim
        self.U = glorot(rng, 2 * dim, dim)
        self.V = glorot(rng, dim, dim)
        self._setup_post(dim, batch_norm, residual)

    def __call__(self, batch: GraphBatch, h, gates=None) -> Tensor:
        _check_width("sage_forward", h, self.dim)
        gates = _check_gates("sage_forward", batch, gates)
        msg = ad.gather_rows(ad.relu(h @ self.V), batch.src)
        if gates is not None:
            msg = msg * ad.reshape(gates, (-1, 1))
        pooled = ad.segment_max(msg, batch.dst)
        return self._finish(h, ad.concat([h, pooled], axis=1) @ self.U)


class GATLayer(_Post):
    """Multi-head attention; heads are concatenated along the feature axis.

    Per head k, the score of edge u->v is lReLU(a_k · [U_k h_v ; U_k h_u]),
    softmax-normalised over the in-neighbours of v. Gated: the normalised
    attention of each edge is multiplied by its gate (no renormalisation).
    """

    def __init__(self, dim: int, rng: np.random.Generator, heads: int = 8,
                 batch_norm: bool = False, residual: bool = False):
        if heads < 1 or dim % heads:
            raise ValueError(f"gat: width {dim} not divisible by head count {heads}")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.U = glorot(rng, dim, dim)
        self.attn_dst = glorot(rng, 2 * self.head_dim, 1, shape=(heads, self.head_dim))
        self.attn_src = glorot(rng, 2 * self.head_dim, 1, shape=(heads, self.head_dim))
        self._expand = np.kron(np.eye(heads), np.ones((1, self.head_dim)))
        self.last_attention: np.ndarray | None = None
        self._setup_post(dim, batch_norm, residual)

    def __call__(self, batch: GraphBatch, h, gates=None) -> Tensor:
        _check_width("gat_forward", h, self.dim)
        gates = _check_gates("gat_forward", batch, gates)
        n = h.shape[0]
        z = h @ self.U
        z3 = ad.reshape(z, (n, self.heads, self.head_dim))
        s_dst = ad.sum_(z3 * self.attn_dst, axis=2)
        s_src = ad.sum_(z3 * self.attn_src, axis=2)
        scores = ad.leaky_relu(ad.gather_rows(s_dst, batch.dst) + ad.gather_rows(s_src, batch.src))
        att = ad.segment_softmax(scores, batch.dst)
        self.last_attention = att.data
        if gates is not None:
            att = att * ad.reshape(gates, (-1, 1))
        msg = ad.gather_rows(z, batch.src) * (att @ self._expand)
        return self._finish(h, ad.segment_sum(msg, batch.dst), act=ad.elu)


class GatedGCNLayer(Module):
    """Residual gated graph convolution with an edge stream.

    Node update: h + ReLU(BN(U h_v + sum_u e_uv ⊙ V h_u)), with
    e_uv = σ(ê_uv) / (sum over in-edges of σ(ê) + eps) computed from the
    incoming edge state. Edge update: ê + ReLU(BN(A h_u + B h_v + C ê)).
    Gated: each V h_u is scaled by its bilateral gate before the ⊙.
    """

    def __init__(self, dim: int, rng: np.random.Generator, eps: float = 1e-6):
        self.dim = dim
        self.eps = eps
        self.U = glorot(rng, dim, dim)
        self.V = glorot(rng, dim, dim)
        self.A = glorot(rng, dim, dim)
        self.B = glorot(rng, dim, dim)
        self.C = glorot(rng, dim, dim)
        self.bn_h = BatchNorm(dim)
        self.bn_e = BatchNorm(dim)

    def edge_gates(self, batch: GraphBatch, e_hat) -> Tensor:
        sig = ad.sigmoid(e_hat)
        denom = ad.gather_rows(ad.segment_sum(sig, batch.dst), batch.dst) + self.eps
        return sig / denom

    def __call__(self, batch: GraphBatch, h, e_hat=None, gates=None) -> tuple[Tensor, Tensor]:
        _check_width("gatedgcn_forward", h, self.dim)
        if e_hat is None:
            raise ValueError("gatedgcn_forward: edge features are required")
        if e_hat.shape != (batch.num_directed, self.dim):
            raise ad.ShapeError(
                f"gatedgcn_forward: edge state {e_hat.shape}, expected ({batch.num_directed}, {self.dim})")
        gates = _check_gates("gatedgcn_forward", batch, gates)
        e_gate = self.edge_gates(batch, e_hat)
        msg = ad.gather_rows(h @ self.V, batch.src)
        if gates is not None:
            msg = msg * ad.reshape(gates, (-1, 1))
        agg = ad.segment_sum(e_gate * msg, batch.dst)
        h_new = h + ad.relu(self.bn_h(h @ self.U + agg))
        if batch.num_directed == 0:
            return h_new, e_hat
        e_pre = (ad.gather_rows(h @ self.A, batch.src) + ad.gather_rows(h @ self.B, batch.dst)
                 + e_hat @ self.C)
        e_new = e_hat + ad.relu(self.bn_e(e_pre))
        return h_new, e_new


class MPLayer(Module):
    """Generic update σ(U1 h_v + sum_u w_uv U2 h_u) with w = 1 (isotropic)."""

    def __init__(self, dim: int, rng: np.random.Generator):
        self.dim = dim
        self.U1 = glorot(rng, dim, dim)
        self.U2 = glorot(rng, dim, dim)

    def __call__(self, batch: GraphBatch, h, gates=None) -> Tensor:
        _check_width("mp_forward", h, self.dim)
        gates = _check_gates("mp_forward", batch, gates)
        weights = np.ones(batch.num_directed) if gates is None else gates
        agg = ad.edge_aggregate(weights, h @ self.U2, batch.src, batch.dst)
        return ad.relu(h @ self.U1 + agg)


def make_layer(kind: LayerKind | str, dim: int, rng: np.random.Generator, *, heads: int = 8,
               batch_norm: bool = False, residual: bool = False, eps: float = 1e-6) -> Module:
    kind = LayerKind(kind)
    if kind is LayerKind.GCN:
        return GCNLayer(dim, rng, batch_norm=batch_norm, residual=residual)
    if kind is LayerKind.SAGE:
        return SAGELayer(dim, rng, batch_norm=batch_norm, residual=residual)
    if kind is LayerKind.GAT:
        return GATLayer(dim, rng, heads=heads, batch_norm=batch_norm, residual=residual)
    return GatedGCNLayer(dim, rng, eps=eps)


def apply_bilateral_gating(layer: Module, batch: GraphBatch, h, gates, e_hat=None):
    """Run ``layer`` with its neighbour messages scaled by ``gates``."""
    if gates is None:
        raise ValueError("apply_bilateral_gating: gates are required")
    if isinstance(layer, GatedGCNLayer):
        return layer(batch, h, e_hat, gates=gates)
    return layer(batch, h, gates=gates)
