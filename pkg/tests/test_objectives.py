import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ltgcd.encoder import grad_check, softmax
from ltgcd.objectives import cls_sup, cls_total, cls_unsup, rep_sup, rep_total, rep_unsup

HAND = -np.log(np.e / (np.e + 1))  # one aligned candidate vs one orthogonal, tau = 1


def unit(rng, n, d):
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def test_cls_unsup_examples():
    h = np.eye(3)
    q = np.full((3, 3), 1e-9)
    q[np.arange(3), np.arange(3)] = 1 - 2e-9
    assert cls_unsup(q, h)[0] == pytest.approx(0.0, abs=1e-8)
    u = np.full((2, 4), 0.25)
    assert cls_unsup(u, u)[0] == pytest.approx(np.log(4))


def test_cls_unsup_gradient_three_by_three(rng):
    q = softmax(rng.standard_normal((3, 3)))
    h = softmax(rng.standard_normal((3, 3)))
    assert grad_check(lambda x: cls_unsup(x, h), q) < 1e-4


def test_cls_sup_examples():
    assert cls_sup(np.eye(3), [0, 1, 2])[0] == pytest.approx(0.0, abs=1e-12)
    assert cls_sup(np.full((1, 4), 0.25), [2])[0] == pytest.approx(np.log(4))
    q = np.array([[0.7, 0.2, 0.1], [0.25, 0.5, 0.25]])
    assert cls_sup(q, [0, 2])[0] == pytest.approx(-(np.log(0.7) + np.log(0.25)) / 2)
    loss, grad = cls_sup(np.zeros((0, 3)), [])
    assert loss == 0.0 and grad.shape == (0, 3)


def test_totals():
    assert cls_total(1.0, 2.0, 0.5, 0.0) == 1.5
    assert cls_total(1.0, 2.0, 0.5, 1.0) == 2.5
    assert cls_total(1.0, 2.0, 0.5, 0.35) == pytest.approx(1.85)
    assert rep_total(1.0, 2.0, 0.0) == 1.0
    assert rep_total(1.0, 2.0, 1.0) == 2.0
    assert rep_total(1.0, 2.0, 0.35) == pytest.approx(1.35)


def test_rep_unsup_hand():
    z = np.array([[1.0, 0.0]])
    loss, _ = rep_unsup(z, z, np.array([[0.0, 1.0]]), tau=1.0)
    assert loss == pytest.approx(HAND)
    assert HAND == pytest.approx(0.3133, abs=1e-4)


def test_rep_unsup_indistinguishable():
    z = np.array([[0.6, 0.8]])
    N = 5
    loss, _ = rep_unsup(z, z, np.repeat(z, N, axis=0), tau=0.07)
    assert loss == pytest.approx(np.log(N + 1))


def test_rep_unsup_gradient(rng):
    z, pos, neg = unit(rng, 4, 3), unit(rng, 4, 3), unit(rng, 4, 3)
    assert grad_check(lambda x: rep_unsup(x, pos, neg), z) < 1e-4


def test_rep_sup_hand():
    z = np.array([[1.0, 0.0]])
    loss, _ = rep_sup(z, [0], np.array([[1.0, 0.0], [0.0, 1.0]]), np.array([0, 1]), tau=1.0)
    assert loss == pytest.approx(HAND)


def test_rep_sup_drops_anchors_without_positives():
    Zq = np.array([[1.0, 0.0], [0.0, 1.0]])
    qlab = np.array([0, -1])
    z = np.array([[1.0, 0.0], [0.0, 1.0]])
    both, grad = rep_sup(z, [0, 3], Zq, qlab, tau=1.0)
    alone, _ = rep_sup(z[:1], [0], Zq, qlab, tau=1.0)
    assert both == pytest.approx(alone)
    assert np.all(grad[1] == 0)
    assert rep_sup(z, [5, 6], Zq, qlab)[0] == 0.0


def test_rep_sup_queue_permutation(rng):
    z = unit(rng, 3, 4)
    Zq = unit(rng, 9, 4)
    qlab = rng.integers(-1, 3, 9)
    perm = rng.permutation(9)
    a = rep_sup(z, [0, 1, 2], Zq, qlab)[0]
    b = rep_sup(z, [0, 1, 2], Zq[perm], qlab[perm])[0]
    assert a == pytest.approx(b)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_batch_permutation_invariance(seed):
    r = np.random.default_rng(seed)
    q, h = softmax(r.standard_normal((5, 3))), softmax(r.standard_normal((5, 3)))
    z, pos, neg = unit(r, 5, 3), unit(r, 5, 3), unit(r, 6, 3)
    labels = r.integers(0, 2, 5)
    qlab = r.integers(-1, 2, 6)
    p = r.permutation(5)
    assert cls_unsup(q[p], h[p])[0] == pytest.approx(cls_unsup(q, h)[0])
    assert cls_sup(q[p], labels[p])[0] == pytest.approx(cls_sup(q, labels)[0])
    assert rep_unsup(z[p], pos[p], neg)[0] == pytest.approx(rep_unsup(z, pos, neg)[0])
    assert rep_sup(z[p], labels[p], neg, qlab)[0] == pytest.approx(rep_sup(z, labels, neg, qlab)[0])


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_cross_entropy_bounds_entropy(seed):
    r = np.random.default_rng(seed)
    q, h = softmax(r.standard_normal((4, 3))), softmax(r.standard_normal((4, 3)))
    entropy = -np.sum(h * np.log(h)) / 4
    assert cls_unsup(q, h)[0] >= entropy - 1e-12
    assert cls_unsup(h, h)[0] == pytest.approx(entropy)
