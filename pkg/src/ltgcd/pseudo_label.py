"""Sinkhorn pseudo-labels with a learnable target class distribution.

The queue of momentum probabilities ``Q`` is turned into a transport plan
with row marginal ``1/N`` and column marginal ``pi``; rows of the plan,
renormalised, are the pseudo-labels ``H``. The distribution ``pi`` is a
softmax over raw log-sizes and is trained by the guided loss, whose gradient
is taken through the unrolled log-domain iterations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoder import softmax

LOG_FLOOR = 1e-12


class PseudoLabelError(ValueError):
    pass


def _lse(a, axis):
    m = a.max(axis=axis, keepdims=True)
    out = np.log(np.exp(a - m).sum(axis=axis, keepdims=True)) + m
    return np.squeeze(out, axis=axis)


@dataclass
class SinkhornResult:
    H: np.ndarray  # pseudo-labels, rows sum to one
    plan: np.ndarray  # transport plan, columns sum to pi
    log_K: np.ndarray
    f: list  # row potentials per iteration
    g: list  # column potentials per iteration (g[0] is the zero start)
    row_violation: float  # max |plan row sum - 1/N|
    col_violation: float  # max |plan column sum - pi|
    trace: np.ndarray  # L1 row-marginal violation after each iteration
    label_col_violation: float = 0.0  # max |mean of H columns - pi| after row rescaling


def _check_inputs(Q, pi):
    Q = np.asarray(Q, dtype=np.float64)
    pi = np.asarray(pi, dtype=np.float64)
    if Q.ndim != 2 or pi.shape != (Q.shape[1],):
        raise PseudoLabelError(f"shape mismatch: Q {Q.shape}, pi {pi.shape}")
    if not np.all(Q > 0) or not np.all(np.isfinite(Q)):
        raise PseudoLabelError("queue probabilities must be strictly positive and finite")
    if not np.all(pi > 0) or abs(pi.sum() - 1.0) > 1e-8:
        raise PseudoLabelError("target distribution must be strictly positive and sum to 1")
    return Q, pi


def sinkhorn(Q, pi, n_iters=100, eps_reg=0.05) -> SinkhornResult:
    """Log-domain Sinkhorn-Knopp on kernel ``Q**(1/eps_reg)``."""
    Q, pi = _check_inputs(Q, pi)
    N, C = Q.shape
    log_K = np.log(Q) / eps_reg
    log_r = -np.log(N)
    log_pi = np.log(pi)
    g = np.zeros(C)
    lse_row = _lse(log_K, axis=1)
    f = log_r - lse_row
    fs, gs = [], [g]
    trace = np.empty(n_iters)
    for t in range(n_iters):
        f = log_r - lse_row
        g = log_pi - _lse(log_K + f[:, None], axis=0)
        lse_row = _lse(log_K + g[None, :], axis=1)
        fs.append(f)
        gs.append(g)
        trace[t] = np.abs(np.exp(f + lse_row) - 1.0 / N).sum()
    if not (np.all(np.isfinite(f)) and np.all(np.isfinite(g))):
        raise PseudoLabelError("non-finite Sinkhorn potentials")
    plan = np.exp(log_K + f[:, None] + g[None, :])
    H = np.exp(log_K + g[None, :] - lse_row[:, None])
    row_violation = float(np.max(np.abs(plan.sum(axis=1) - 1.0 / N)))
    col_violation = float(np.max(np.abs(plan.sum(axis=0) - pi)))
    label_col_violation = float(np.max(np.abs(H.sum(axis=0) / N - pi)))
    return SinkhornResult(H, plan, log_K, fs, gs, row_violation, col_violation, trace,
                          label_col_violation)


def sinkhorn_backward(res: SinkhornResult, grad_H: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. ``log pi`` of a loss with gradient ``grad_H`` at ``H``.

    Reverse pass through the unrolled iterations; ``log_K`` is constant.
    """
    A = res.log_K
    H = res.H
    dlogits = H * (grad_H - np.sum(grad_H * H, axis=1, keepdims=True))
    g_bar = dlogits.sum(axis=0)
    log_pi_bar = np.zeros_like(g_bar)
    for t in range(len(res.f) - 1, -1, -1):
        log_pi_bar += g_bar
        S = softmax(A + res.f[t][:, None], axis=0)
        f_bar = -(S @ g_bar)
        R = softmax(A + res.g[t][None, :], axis=1)
        g_bar = -(R.T @ f_bar)
    return log_pi_bar


def kl_divergence(p, q) -> float:
    p = np.asarray(p, dtype=np.float64)
    q = np.maximum(np.asarray(q, dtype=np.float64), LOG_FLOOR)
    return float(np.sum(p * (np.log(np.maximum(p, LOG_FLOOR)) - np.log(q))))


class LearnableDistribution:
    """Target distribution ``pi = softmax(log_sizes)``."""

    def __init__(self, log_sizes):
        log_sizes = np.asarray(log_sizes, dtype=np.float64)
        if not np.all(np.isfinite(log_sizes)):
            raise PseudoLabelError("non-finite distribution parameters")
        self.log_sizes = log_sizes.copy()

    @classmethod
    def from_pi(cls, pi):
        return cls(np.log(np.maximum(np.asarray(pi, dtype=np.float64), LOG_FLOOR)))

    @classmethod
    def uniform(cls, C):
        return cls(np.zeros(C))

    @property
    def pi(self) -> np.ndarray:
        return softmax(self.log_sizes)

    def __len__(self):
        return self.log_sizes.size


def guided_loss(Q, log_sizes, pi_tilde, beta=400.0, eps_reg=0.05, n_iters=100):
    """Guided loss and its gradient w.r.t. the raw log-sizes.

    ``-(1/N) sum_ik Q_ik H_ik + beta * KL(pi || pi_tilde)`` where ``H`` is
    the Sinkhorn output for ``pi``. Returns ``(loss, grad, sinkhorn_result)``.
    """
    Q = np.asarray(Q, dtype=np.float64)
    log_sizes = np.asarray(log_sizes, dtype=np.float64)
    pi = softmax(log_sizes)
    pi_tilde = np.asarray(pi_tilde, dtype=np.float64)
    N = Q.shape[0]
    res = sinkhorn(Q, pi, n_iters, eps_reg)
    agreement = -float(np.sum(Q * res.H)) / N
    kl = kl_divergence(pi, pi_tilde)
    loss = agreement + beta * kl

    pi_bar = sinkhorn_backward(res, -Q / N) / pi
    pi_bar = pi_bar + beta * (np.log(pi) - np.log(np.maximum(pi_tilde, LOG_FLOOR)) + 1.0)
    grad = pi * (pi_bar - np.dot(pi, pi_bar))
    return loss, grad, res


def guided_loss_fd(Q, log_sizes, pi_tilde, beta=400.0, eps_reg=0.05, n_iters=100,
                   eps=1e-6):
    """Central-difference gradient of :func:`guided_loss` over the raw sizes."""
    base = np.asarray(log_sizes, dtype=np.float64)
    grad = np.zeros_like(base)
    for c in range(base.size):
        up, down = base.copy(), base.copy()
        up[c] += eps
        down[c] -= eps
        grad[c] = (guided_loss(Q, up, pi_tilde, beta, eps_reg, n_iters)[0]
                   - guided_loss(Q, down, pi_tilde, beta, eps_reg, n_iters)[0]) / (2 * eps)
    return grad


def update_distribution(dist: LearnableDistribution, grad, lr) -> LearnableDistribution:
    grad = np.asarray(grad, dtype=np.float64)
    if not np.all(np.isfinite(grad)):
        raise PseudoLabelError("non-finite gradient for target distribution")
    new = dist.log_sizes - lr * grad
    if not np.all(np.isfinite(new)):
        raise PseudoLabelError("distribution update produced non-finite parameters")
    out = LearnableDistribution(new)
    pi = out.pi
    if not (np.all(np.isfinite(pi)) and np.all(pi > 0)):
        raise PseudoLabelError("distribution update left the open simplex")
    return out


def total_variation(p, q) -> float:
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())
