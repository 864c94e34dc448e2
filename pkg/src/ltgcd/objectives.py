"""Classification and representation losses for the discovery stage.

Each loss returns ``(value, gradient)`` where the gradient is taken with
respect to the live encoder output (``q`` or ``z``); every other argument is
a constant.
"""

import numpy as np

from .encoder import softmax

LOG_FLOOR = 1e-12
TAU_UNSUP = 0.07
TAU_SUP = 0.1


def cls_unsup(q, h):
    """Cross-entropy of predictions ``q`` against soft pseudo-labels ``h``."""
    q = np.asarray(q, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    B = q.shape[0]
    if B == 0:
        return 0.0, np.zeros_like(q)
    safe = np.maximum(q, LOG_FLOOR)
    loss = -float(np.sum(h * np.log(safe))) / B
    grad = np.where(q > LOG_FLOOR, -h / (B * safe), 0.0)
    return loss, grad


def cls_sup(q, labels):
    """Cross-entropy on labeled rows; an empty subset contributes zero."""
    q = np.asarray(q, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if q.shape[0] == 0:
        return 0.0, np.zeros_like(q)
    onehot = np.zeros_like(q)
    onehot[np.arange(q.shape[0]), labels] = 1.0
    return cls_unsup(q, onehot)


def cls_total(loss_unsup, loss_sup, loss_guided, lam):
    return (1.0 - lam) * loss_unsup + lam * loss_sup + loss_guided


def rep_total(loss_unsup, loss_sup, lam):
    return (1.0 - lam) * loss_unsup + lam * loss_sup


def rep_unsup(z, z_pos, Z_neg, tau=TAU_UNSUP):
    """InfoNCE with the momentum view as positive and queue rows as negatives."""
    z = np.asarray(z, dtype=np.float64)
    z_pos = np.asarray(z_pos, dtype=np.float64)
    Z_neg = np.asarray(Z_neg, dtype=np.float64).reshape(-1, z.shape[1])
    B = z.shape[0]
    if B == 0:
        return 0.0, np.zeros_like(z)
    pos = np.sum(z * z_pos, axis=1, keepdims=True) / tau
    logits = np.concatenate([pos, z @ Z_neg.T / tau], axis=1)
    p = softmax(logits, axis=1)
    m = logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(logits - m).sum(axis=1)) + m[:, 0]
    loss = float(np.mean(lse - pos[:, 0]))
    grad = (p[:, :1] * z_pos + p[:, 1:] @ Z_neg - z_pos) / (tau * B)
    return loss, grad


def rep_sup(z, labels, Z_queue, queue_labels, tau=TAU_SUP):
    """Supervised contrastive loss against queue entries.

    Positives for an anchor are the queue rows sharing its label; every
    queue row is in the denominator. Anchors without positives are dropped
    from the average.
    """
    z = np.asarray(z, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    Z_queue = np.asarray(Z_queue, dtype=np.float64)
    queue_labels = np.asarray(queue_labels, dtype=np.int64)
    grad = np.zeros_like(z)
    if z.shape[0] == 0 or Z_queue.shape[0] == 0:
        return 0.0, grad
    pos_mask = (labels[:, None] == queue_labels[None, :]) & (labels[:, None] >= 0)
    n_pos = pos_mask.sum(axis=1)
    anchors = n_pos > 0
    if not np.any(anchors):
        return 0.0, grad
    logits = z[anchors] @ Z_queue.T / tau
    mask = pos_mask[anchors].astype(np.float64)
    npos = n_pos[anchors][:, None].astype(np.float64)
    m = logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(logits - m).sum(axis=1, keepdims=True)) + m
    per_anchor = -np.sum(mask * (logits - lse), axis=1) / npos[:, 0]
    n_anchor = int(anchors.sum())
    loss = float(per_anchor.sum() / n_anchor)
    p = softmax(logits, axis=1)
    grad[anchors] = ((p - mask / npos) @ Z_queue) / (tau * n_anchor)
    return loss, grad
