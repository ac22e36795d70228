"""Over-smoothing diagnostics: per-layer instance information gain.

The information gain of a layer on one graph is the mutual information between
input feature rows and hidden rows, estimated in closed form under a joint
Gaussian fit over that graph's nodes:

    I = 1/2 * (log det Σ_X + log det Σ_H - log det Σ_joint)

Each diagonal block of the joint covariance is shrunk by ``shrinkage`` times
its mean diagonal (floored at ``1e-12``). The marginals are taken as the
shrunk diagonal blocks, which keeps the estimate non-negative.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from . import autodiff as ad
from .autodiff import Tensor

SHRINKAGE = 1e-3
_FLOOR = 1e-12


def _centered(a: Tensor) -> Tensor:
    return a - ad.mean(a, axis=0, keepdims=True)


def _ridge(cov: Tensor, lo: int, hi: int, shrinkage: float) -> Tensor:
    """shrinkage * mean diagonal of the [lo, hi) block, placed on that block's diagonal."""
    size = cov.shape[0]
    mask = np.zeros((size, size))
    mask[np.arange(lo, hi), np.arange(lo, hi)] = 1.0
    if hi == lo:
        return Tensor(mask)
    eps = ad.scale(ad.sum_(cov * mask), shrinkage / (hi - lo))
    if eps.data < _FLOOR:
        return Tensor(mask * _FLOOR)
    return eps * mask


def instance_info_gain_tensor(x, h, shrinkage: float = SHRINKAGE) -> Tensor:
    """Differentiable Gaussian mutual information between rows of ``x`` and ``h``."""
    x, h = ad.as_tensor(x), ad.as_tensor(h)
    if x.ndim != 2 or h.ndim != 2 or x.shape[0] != h.shape[0]:
        raise ad.ShapeError(f"instance_info_gain: row mismatch {x.shape} vs {h.shape}")
    n = x.shape[0]
    if n < 2:
        raise ValueError("instance_info_gain: need at least two nodes")
    dx, dh = x.shape[1], h.shape[1]
    joint = ad.concat([_centered(x), _centered(h)], axis=1)
    cov = ad.scale(joint.T @ joint, 1.0 / (n - 1))
    if not np.all(np.isfinite(cov.data)):
        raise FloatingPointError("instance_info_gain: non-finite covariance")
    cov = cov + _ridge(cov, 0, dx, shrinkage) + _ridge(cov, dx, dx + dh, shrinkage)
    cov_x = cov[:dx, :dx]
    cov_h = cov[dx:, dx:]
    mi = ad.scale(ad.logdet(cov_x) + ad.logdet(cov_h) - ad.logdet(cov), 0.5)
    return ad.clamp_min(mi, 0.0)


def instance_info_gain(x, h, shrinkage: float = SHRINKAGE) -> float:
    with ad.no_grad():
        return float(instance_info_gain_tensor(x, h, shrinkage).data)


def info_gain_profile(x: np.ndarray, trace: list[np.ndarray], shrinkage: float = SHRINKAGE) -> np.ndarray:
    """Information gain of every captured layer for one graph."""
    return np.array([instance_info_gain(x, h, shrinkage) for h in trace])


@dataclass
class LayerComparison:
    layer: int
    mean_a: float
    mean_b: float
    std_a: float
    std_b: float
    p_value: float
    degenerate: bool = False


def layerwise_compare(samples_a, samples_b) -> list[LayerComparison]:
    """Welch t-test per layer with Bonferroni correction across layers.

    ``samples_a`` and ``samples_b`` are (graphs, layers) arrays. Layers where
    both sides have zero variance (or a non-finite test statistic) report
    p = 1 with ``degenerate`` set.
    """
    a = np.asarray(samples_a, dtype=np.float64)
    b = np.asarray(samples_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError(f"layerwise_compare: layer counts differ, {a.shape} vs {b.shape}")
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise ValueError("layerwise_compare: need at least two graphs per side")
    n_layers = a.shape[1]
    out = []
    for layer in range(n_layers):
        col_a, col_b = a[:, layer], b[:, layer]
        sa, sb = col_a.std(ddof=1), col_b.std(ddof=1)
        if sa == 0.0 and sb == 0.0:
            p, flag = 1.0, True
        else:
            p = float(stats.ttest_ind(col_a, col_b, equal_var=False).pvalue)
            flag = not np.isfinite(p)
            p = 1.0 if flag else min(1.0, p * n_layers)
        out.append(LayerComparison(layer, float(col_a.mean()), float(col_b.mean()), float(sa), float(sb), p, flag))
    return out
