"""Neighbourhood-density representation balancing.

Every ``T2`` epochs the representations of the whole training set are
snapshotted and each sample gets its ``K`` nearest neighbours by cosine
similarity. From the sample plus its neighbours we take a density weight
(negated mean pairwise similarity) and a local mean. The balanced loss pulls
each live representation towards its local mean, weighted by ``1 + w``, so
sparse neighbourhoods (tail classes) count more.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)


class BalancingError(ValueError):
    pass


@dataclass
class NeighborhoodIndex:
    neighbors: np.ndarray  # M x K sample ids, nearest first
    epoch: int = 0

    @property
    def K(self) -> int:
        return self.neighbors.shape[1]

    def members(self, i) -> np.ndarray:
        """Ids of the neighbourhood of ``i`` (itself first)."""
        return np.concatenate([[i], self.neighbors[i]])


def _normalize(Z):
    norms = np.linalg.norm(Z, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise BalancingError("zero vector in neighbourhood: cosine similarity undefined")
    return Z / norms


def build_neighborhoods(Z_all, K, epoch=0) -> NeighborhoodIndex:
    """Exact cosine kNN; ties resolve to the lower index."""
    Z_all = np.asarray(Z_all, dtype=np.float64)
    M = Z_all.shape[0]
    if M <= K:
        raise BalancingError(f"need more than K={K} samples, got {M}")
    if K < 1:
        raise BalancingError("K must be at least 1")
    Zn = _normalize(Z_all)
    sims = Zn @ Zn.T
    np.fill_diagonal(sims, -np.inf)
    order = np.argsort(-sims, axis=1, kind="stable")[:, :K]
    return NeighborhoodIndex(order.astype(np.int64), epoch)


def density_weight(members) -> float:
    """Negated mean cosine similarity over ordered pairs of distinct members."""
    members = np.asarray(members, dtype=np.float64)
    n = members.shape[0]
    if n < 2:
        raise BalancingError("a neighbourhood needs at least two members")
    Zn = _normalize(members)
    G = Zn @ Zn.T
    off = G.sum() - np.trace(G)
    return -float(off) / (n * (n - 1))


def local_mean(members) -> np.ndarray:
    return np.asarray(members, dtype=np.float64).mean(axis=0)


def neighborhood_stats(Z_all, index: NeighborhoodIndex):
    """Density weights and local means for every sample of a snapshot."""
    Z_all = np.asarray(Z_all, dtype=np.float64)
    ids = np.concatenate([np.arange(Z_all.shape[0])[:, None], index.neighbors], axis=1)
    groups = Z_all[ids]  # M x (K+1) x dz
    n = groups.shape[1]
    Gn = _normalize(groups)
    gram = np.einsum("mkd,mld->mkl", Gn, Gn)
    off = gram.sum(axis=(1, 2)) - np.einsum("mkk->m", gram)
    weights = -off / (n * (n - 1))
    return weights, groups.mean(axis=1)


def balanced_loss(z, weights, means):
    """Weighted cosine pull towards local means.

    Returns ``(loss, grad_z, kept)``. Rows whose local mean is the zero
    vector are skipped and excluded from the average.
    """
    z = np.asarray(z, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    means = np.asarray(means, dtype=np.float64)
    grad = np.zeros_like(z)
    mu_norm = np.linalg.norm(means, axis=1)
    kept = mu_norm > 0
    if not np.all(kept):
        log.warning("skipping %d sample(s) with a zero local mean", int((~kept).sum()))
    n = int(kept.sum())
    if n == 0:
        return 0.0, grad, kept
    zk = z[kept]
    z_norm = np.linalg.norm(zk, axis=1, keepdims=True)
    if np.any(z_norm == 0):
        raise BalancingError("zero representation row")
    mu_hat = means[kept] / mu_norm[kept, None]
    z_hat = zk / z_norm
    cos = np.sum(z_hat * mu_hat, axis=1)
    scale = 1.0 + weights[kept]
    loss = float(np.sum(scale * (1.0 - cos)) / n)
    dcos = (mu_hat - cos[:, None] * z_hat) / z_norm
    grad[kept] = -(scale[:, None] * dcos) / n
    return loss, grad, kept
