"""Finite-difference audit of every hand-written loss gradient."""

from __future__ import annotations

import numpy as np

from .balancing import balanced_loss
from .clustering import cluster_loss, target_assign
from .encoder import grad_check, softmax
from .objectives import cls_sup, cls_unsup, rep_sup, rep_unsup
from .pseudo_label import guided_loss

TOLERANCE = 1e-4


def _unit(rng, n, d):
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def _probs(rng, n, C):
    return softmax(rng.standard_normal((n, C)))


def check_cluster(rng):
    V = rng.standard_normal((12, 5))
    P = rng.standard_normal((3, 5))
    Phi, _ = target_assign(V, P, gamma=2.0)
    return grad_check(lambda p: cluster_loss(V, p, Phi), P)


def check_guided(rng):
    C = 4
    Q = _probs(rng, 16, C)
    n = rng.standard_normal(C) * 0.3
    pi_tilde = softmax(rng.standard_normal(C) * 0.3)
    beta = float(rng.uniform(0.5, 5.0))
    return grad_check(lambda s: guided_loss(Q, s, pi_tilde, beta)[:2], n)


def check_cls_unsup(rng):
    q = _probs(rng, 6, 4)
    h = _probs(rng, 6, 4)
    return grad_check(lambda x: cls_unsup(x, h), q)


def check_cls_sup(rng):
    q = _probs(rng, 6, 4)
    labels = rng.integers(0, 4, size=6)
    return grad_check(lambda x: cls_sup(x, labels), q)


def check_rep_unsup(rng):
    z, z_pos, Z_neg = _unit(rng, 5, 6), _unit(rng, 5, 6), _unit(rng, 9, 6)
    return grad_check(lambda x: rep_unsup(x, z_pos, Z_neg), z)


def check_rep_sup(rng):
    z = _unit(rng, 5, 6)
    labels = rng.integers(0, 3, size=5)
    Zq = _unit(rng, 12, 6)
    qlab = rng.integers(-1, 3, size=12)
    return grad_check(lambda x: rep_sup(x, labels, Zq, qlab), z)


def check_balanced(rng):
    z = rng.standard_normal((6, 5))
    weights = rng.uniform(-1.0, 1.0, size=6)
    means = rng.standard_normal((6, 5))
    return grad_check(lambda x: balanced_loss(x, weights, means)[:2], z)


CHECKS = {
    "L_cluster": check_cluster,
    "L_gud": check_guided,
    "L_cls_u": check_cls_unsup,
    "L_cls_s": check_cls_sup,
    "L_rep_u": check_rep_unsup,
    "L_rep_s": check_rep_sup,
    "L_bal": check_balanced,
}


def run_suite(n_instances=20, seed=0) -> dict:
    """Worst relative error per loss over ``n_instances`` random problems."""
    rng = np.random.default_rng(seed)
    return {
        name: max(fn(rng) for _ in range(n_instances))
        for name, fn in CHECKS.items()
    }
