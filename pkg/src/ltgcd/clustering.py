"""Long-tailed clustering used to estimate the class distribution.

Prototypes are seeded by k-means, then refined by self-training: a sharpened
target assignment ``Phi`` (temperature ``alpha``) is computed from the
current prototypes, held fixed, and the prototypes take a gradient step on
``KL(Phi || phi)``. Cluster sizes come from the hard argmax of ``phi``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .encoder import softmax

LOG_FLOOR = 1e-12
MEAN_NEAREST = "nearest"
MEAN_ALL = "all"


class ClusteringError(ValueError):
    pass


@dataclass
class ClusterEstimate:
    sizes: np.ndarray  # in classifier-column order
    pi_tilde: np.ndarray
    alpha: float
    raw_sizes: np.ndarray = field(default=None)  # in prototype order
    column_of_cluster: np.ndarray = field(default=None)
    prototypes: np.ndarray = field(default=None)
    losses: list = field(default_factory=list)


# -- k-means ---------------------------------------------------------------


def _sq_dists(X, centres):
    return (
        np.sum(X**2, axis=1)[:, None]
        - 2.0 * X @ centres.T
        + np.sum(centres**2, axis=1)[None, :]
    ).clip(min=0.0)


def _kmeanspp(X, k, rng, fixed_centres=None):
    """k-means++ seeding, optionally continuing from given centres."""
    M = X.shape[0]
    centres = np.empty((k, X.shape[1]))
    start = 0
    if fixed_centres is not None and len(fixed_centres):
        start = len(fixed_centres)
        centres[:start] = fixed_centres
    else:
        centres[0] = X[rng.integers(M)]
        start = 1
    closest = _sq_dists(X, centres[:start]).min(axis=1)
    for j in range(start, k):
        total = closest.sum()
        if total <= 0:
            idx = rng.integers(M)
        else:
            idx = rng.choice(M, p=closest / total)
        centres[j] = X[idx]
        closest = np.minimum(closest, _sq_dists(X, centres[j : j + 1])[:, 0])
    return centres


def lloyd(X, centres, max_iter=300, fixed=None):
    """Lloyd iterations from ``centres``.

    ``fixed`` optionally maps row -> cluster for rows whose assignment must
    not change (semi-supervised k-means).
    """
    centres = centres.copy()
    assign = None
    for _ in range(max_iter):
        d2 = _sq_dists(X, centres)
        new = np.argmin(d2, axis=1)
        if fixed is not None:
            rows, clusters = fixed
            new[rows] = clusters
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        for c in range(centres.shape[0]):
            members = X[assign == c]
            if len(members):
                centres[c] = members.mean(axis=0)
            else:
                # reseed an empty cluster at the worst-served point
                far = int(np.argmax(d2[np.arange(len(X)), assign]))
                centres[c] = X[far]
    d2 = _sq_dists(X, centres)
    assign = np.argmin(d2, axis=1)
    if fixed is not None:
        assign[fixed[0]] = fixed[1]
    inertia = float(d2[np.arange(len(X)), assign].sum())
    return centres, assign, inertia


def kmeans(X, C, seed, n_init=10, max_iter=300, anchors=None, warm_starts=()):
    """k-means++ seeding plus Lloyd; keeps the lowest-inertia restart.

    ``anchors`` (at most ``C`` rows) adds restarts whose first centres are
    those rows, e.g. labeled-class means, with the rest k-means++ seeded.
    Each array in ``warm_starts`` is one more complete ``C x d`` start.
    """
    X = np.asarray(X, dtype=np.float64)
    if C < 1:
        raise ClusteringError("C must be positive")
    if X.shape[0] < C:
        raise ClusteringError(f"need at least C={C} points, got {X.shape[0]}")
    rng = np.random.default_rng(seed)
    inits = [_kmeanspp(X, C, rng) for _ in range(n_init)]
    if anchors is not None and len(anchors):
        inits += [_kmeanspp(X, C, rng, anchors[:C]) for _ in range(n_init)]
    inits += [np.array(w, dtype=np.float64) for w in warm_starts]
    best = None
    for centres in inits:
        centres, assign, inertia = lloyd(X, centres, max_iter)
        if best is None or inertia < best[2]:
            best = (centres, assign, inertia)
    return best[0], best[1]


def kmeans_init(V, C, seed, n_init=10, max_iter=300, anchors=None, warm_starts=()) -> np.ndarray:
    """Initial prototypes for the long-tailed clustering."""
    return kmeans(V, C, seed, n_init=n_init, max_iter=max_iter, anchors=anchors,
                  warm_starts=warm_starts)[0]


# -- assignments -----------------------------------------------------------


def _unit_rows(A, what):
    norms = np.linalg.norm(A, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ClusteringError(f"zero-norm {what} row: cosine similarity undefined")
    return A / norms, norms


def cosine_sims(V, prototypes) -> np.ndarray:
    Vn, _ = _unit_rows(np.asarray(V, dtype=np.float64), "feature")
    Pn, _ = _unit_rows(np.asarray(prototypes, dtype=np.float64), "prototype")
    return Vn @ Pn.T


def soft_assign(V, prototypes) -> np.ndarray:
    """``phi_ic``: softmax over prototypes of cosine similarity."""
    return softmax(cosine_sims(V, prototypes), axis=1)


def sharpening(sims, gamma, mean_mode=MEAN_NEAREST) -> float:
    """``alpha = gamma - mean similarity``.

    ``nearest`` averages each sample's similarity to its closest prototype;
    ``all`` averages over every (sample, prototype) pair.
    """
    if mean_mode == MEAN_NEAREST:
        mean_sim = float(np.mean(np.max(sims, axis=1)))
    elif mean_mode == MEAN_ALL:
        mean_sim = float(np.mean(sims))
    else:
        raise ClusteringError(f"unknown mean mode {mean_mode!r}")
    return gamma - mean_sim


def target_from_sims(sims, gamma, mean_mode=MEAN_NEAREST):
    alpha = sharpening(sims, gamma, mean_mode)
    return softmax(alpha * sims, axis=1), alpha


def target_assign(V, prototypes, gamma, mean_mode=MEAN_NEAREST):
    """Sharpened assignment ``Phi`` and its temperature ``alpha``."""
    return target_from_sims(cosine_sims(V, prototypes), gamma, mean_mode)


def kl_rows(Phi, phi) -> float:
    """``(1/M) sum_i KL(Phi_i || phi_i)`` with a floor inside the logs."""
    Phi = np.asarray(Phi, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    if Phi.shape != phi.shape:
        raise ClusteringError(f"shape mismatch {Phi.shape} vs {phi.shape}")
    ratio = np.log(np.maximum(Phi, LOG_FLOOR)) - np.log(np.maximum(phi, LOG_FLOOR))
    return float(np.sum(Phi * ratio) / Phi.shape[0])


def cluster_loss(V, prototypes, Phi):
    """Cluster loss and its gradient w.r.t. the prototypes (``Phi`` constant)."""
    V = np.asarray(V, dtype=np.float64)
    P = np.asarray(prototypes, dtype=np.float64)
    Vn, _ = _unit_rows(V, "feature")
    Pn, pnorm = _unit_rows(P, "prototype")
    sims = Vn @ Pn.T
    phi = softmax(sims, axis=1)
    M = V.shape[0]
    loss = kl_rows(Phi, phi)
    # d/dsims of -sum Phi log phi, given rows of Phi sum to one
    dsims = (phi * Phi.sum(axis=1, keepdims=True) - Phi) / M
    # sims = Vn . P/|P|
    dPn = dsims.T @ Vn
    grad = (dPn - Pn * np.sum(dPn * Pn, axis=1, keepdims=True)) / pnorm
    return loss, grad


def refine_prototypes(V, prototypes, gamma, step=0.1, tol=1e-6, max_iter=200,
                      mean_mode=MEAN_NEAREST):
    """Self-training gradient descent on the cluster loss."""
    P = np.array(prototypes, dtype=np.float64)
    losses = []
    alpha = None
    for _ in range(max_iter):
        Phi, alpha = target_assign(V, P, gamma, mean_mode)
        loss, grad = cluster_loss(V, P, Phi)
        losses.append(loss)
        if len(losses) > 1 and abs(losses[-2] - losses[-1]) < tol:
            break
        P = P - step * grad
    if alpha is None:
        alpha = target_assign(V, P, gamma, mean_mode)[1]
    return P, alpha, losses


def assign_columns(prototypes, sizes, known_classes, C, centroids=None,
                   cluster_ids=None, predictions=None):
    """Map clusters to classifier columns.

    Known columns are matched to clusters by Hungarian assignment on cosine
    similarity between labeled-class centroids and prototypes. Remaining
    clusters fill the novel columns, matched on co-occurrence with the
    model's argmax ``predictions`` when given, else by size (largest first).
    Returns ``column_of_cluster``.
    """
    known = list(known_classes)
    novel_cols = [c for c in range(C) if c not in set(known)]
    column_of_cluster = np.full(C, -1, dtype=np.int64)
    free = list(range(C))
    if known and centroids is not None:
        sims = cosine_sims(centroids, prototypes)
        rows, cols = linear_sum_assignment(-sims)
        for r, cl in zip(rows, cols):
            column_of_cluster[cl] = known[r]
        free = [cl for cl in range(C) if column_of_cluster[cl] < 0]
        leftover_cols = novel_cols
    else:
        leftover_cols = list(range(C))
    if not free:
        return column_of_cluster
    if predictions is not None and cluster_ids is not None:
        overlap = np.zeros((len(free), len(leftover_cols)))
        col_pos = {c: j for j, c in enumerate(leftover_cols)}
        clu_pos = {c: i for i, c in enumerate(free)}
        for cl, pr in zip(cluster_ids, predictions):
            if cl in clu_pos and pr in col_pos:
                overlap[clu_pos[cl], col_pos[pr]] += 1
        rows, cols = linear_sum_assignment(-overlap)
        for r, j in zip(rows, cols):
            column_of_cluster[free[r]] = leftover_cols[j]
    else:
        order = sorted(free, key=lambda cl: (-sizes[cl], cl))
        for cl, col in zip(order, leftover_cols):
            column_of_cluster[cl] = col
    return column_of_cluster


def estimate_distribution(V, C, gamma=2.0, seed=0, known_classes=(), labeled_idx=None,
                          labeled_labels=None, predictions=None, step=0.1, tol=1e-6,
                          max_iter=200, mean_mode=MEAN_NEAREST, n_init=10) -> ClusterEstimate:
    """Estimate per-class sizes from momentum-backbone features ``V``.

    Rows of ``V`` are clustered on the unit sphere. When labeled indices are
    supplied, clusters are matched to known classes through labeled-class
    centroids so that the returned distribution is in classifier-column
    order. Labeled-class means also seed extra k-means restarts, and when
    every column of ``predictions`` is used, the per-column feature means
    give one more restart so a good partition already found by the model
    is not lost to an unlucky seeding.
    """
    V = np.asarray(V, dtype=np.float64)
    Vn, _ = _unit_rows(V, "feature")
    if C == 1:
        sizes = np.array([V.shape[0]])
        return ClusterEstimate(sizes, np.array([1.0]), gamma - 1.0, sizes,
                               np.zeros(1, dtype=np.int64), Vn.mean(axis=0, keepdims=True))
    known = list(known_classes)
    centroids = None
    if known and labeled_idx is not None and len(labeled_idx):
        labeled_idx = np.asarray(labeled_idx)
        labeled_labels = np.asarray(labeled_labels)
        if all(np.any(labeled_labels == k) for k in known):
            centroids = np.stack([Vn[labeled_idx[labeled_labels == k]].mean(axis=0)
                                  for k in known])
    warm = []
    if predictions is not None:
        predictions = np.asarray(predictions)
        if np.bincount(predictions, minlength=C).min() > 0:
            warm.append(np.stack([Vn[predictions == c].mean(axis=0) for c in range(C)]))
    P0 = kmeans_init(Vn, C, seed, n_init=n_init, anchors=centroids, warm_starts=warm)
    # a centre can only sit at the origin for degenerate input
    P0[np.linalg.norm(P0, axis=1) == 0] += 1e-6
    P, alpha, losses = refine_prototypes(Vn, P0, gamma, step, tol, max_iter, mean_mode)
    cluster_ids = np.argmax(soft_assign(Vn, P), axis=1)
    raw_sizes = np.bincount(cluster_ids, minlength=C)
    column_of_cluster = assign_columns(P, raw_sizes, known, C, centroids,
                                       cluster_ids, predictions)
    sizes = np.zeros(C, dtype=np.int64)
    sizes[column_of_cluster] = raw_sizes
    pi_tilde = sizes / sizes.sum()
    return ClusterEstimate(sizes, pi_tilde, float(alpha), raw_sizes,
                           column_of_cluster, P, losses)
