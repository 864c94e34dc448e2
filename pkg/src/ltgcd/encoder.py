"""Small MLP encoder with classification and projection heads.

The backbone is one tanh layer ``v = tanh(x W1 + b1)``. The classification
head gives ``q = softmax(v Wc + bc)`` and the projection head gives
``z = u / ||u||`` with ``u = v Wp + bp``. Gradients are written out by hand;
:func:`grad_check` compares them against central differences.
"""

from __future__ import annotations

import numpy as np

BACKBONE = ("W1", "b1")
CLS_HEAD = ("Wc", "bc")
PROJ_HEAD = ("Wp", "bp")
PARAM_NAMES = BACKBONE + CLS_HEAD + PROJ_HEAD

_NORM_FLOOR = 1e-12


class EncoderError(ValueError):
    pass


def init_params(d: int, h: int, C: int, dz: int, rng: np.random.Generator) -> dict:
    return {
        "W1": rng.standard_normal((d, h)) * (0.5 / np.sqrt(d)),
        "b1": np.zeros(h),
        "Wc": rng.standard_normal((h, C)) * (0.1 / np.sqrt(h)),
        "bc": np.zeros(C),
        "Wp": rng.standard_normal((h, dz)) / np.sqrt(h),
        "bp": np.zeros(dz),
    }


def copy_params(params: dict) -> dict:
    return {k: v.copy() for k, v in params.items()}


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def backbone(params: dict, x: np.ndarray) -> np.ndarray:
    return np.tanh(x @ params["W1"] + params["b1"])


def forward(params: dict, x: np.ndarray):
    """Return ``(v, q, z, cache)`` for a batch of rows."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise EncoderError(f"batch must be 2-D, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise EncoderError("non-finite input batch")
    v = backbone(params, x)
    q = softmax(v @ params["Wc"] + params["bc"])
    u = v @ params["Wp"] + params["bp"]
    norm = np.maximum(np.linalg.norm(u, axis=1, keepdims=True), _NORM_FLOOR)
    z = u / norm
    return v, q, z, {"x": x, "v": v, "q": q, "z": z, "norm": norm}


def backward(params: dict, cache: dict, grad_q=None, grad_z=None) -> dict:
    """Parameter gradients given upstream gradients w.r.t. ``q`` and ``z``.

    Either upstream gradient may be ``None``; the matching head then gets a
    zero gradient.
    """
    v, q, z = cache["v"], cache["q"], cache["z"]
    grads = {k: np.zeros_like(p) for k, p in params.items()}
    dv = np.zeros_like(v)
    if grad_q is not None:
        # softmax Jacobian-vector product
        dlogits = q * (grad_q - np.sum(grad_q * q, axis=1, keepdims=True))
        grads["Wc"] = v.T @ dlogits
        grads["bc"] = dlogits.sum(axis=0)
        dv += dlogits @ params["Wc"].T
    if grad_z is not None:
        du = (grad_z - z * np.sum(grad_z * z, axis=1, keepdims=True)) / cache["norm"]
        grads["Wp"] = v.T @ du
        grads["bp"] = du.sum(axis=0)
        dv += du @ params["Wp"].T
    dpre = dv * (1.0 - v**2)
    grads["W1"] = cache["x"].T @ dpre
    grads["b1"] = dpre.sum(axis=0)
    return grads


def sgd_step(params: dict, grads: dict, lr: float, names=PARAM_NAMES) -> None:
    for k in names:
        params[k] -= lr * grads[k]


def momentum_update(params: dict, momentum_params: dict, m: float) -> dict:
    """EMA ``bar <- m*bar + (1-m)*param``; ``m=1`` freezes, ``m=0`` copies."""
    if not 0.0 <= m <= 1.0:
        raise EncoderError(f"momentum must lie in [0, 1], got {m}")
    return {k: m * momentum_params[k] + (1.0 - m) * params[k] for k in momentum_params}


def jitter(x: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Second view of a feature batch: additive Gaussian noise."""
    if sigma == 0:
        return x.copy()
    return x + sigma * rng.standard_normal(x.shape)


class QueuePair:
    """FIFO stores of momentum probabilities, representations and labels.

    Rows are written at a circular cursor. ``labels`` holds -1 for unlabeled
    entries so supervised contrastive positives can be looked up.
    """

    def __init__(self, capacity: int, C: int, dz: int):
        if capacity < 1:
            raise EncoderError("queue capacity must be positive")
        self.capacity = int(capacity)
        self.Q = np.zeros((capacity, C))
        self.Z = np.zeros((capacity, dz))
        self.labels = np.full(capacity, -1, dtype=np.int64)
        self.tags = np.full(capacity, -1, dtype=np.int64)
        self.cursor = 0
        self.count = 0

    @property
    def full(self) -> bool:
        return self.count == self.capacity

    def __len__(self) -> int:
        return self.count

    def enqueue(self, q_rows, z_rows, labels=None, tags=None) -> np.ndarray:
        """Append rows, evicting the oldest; returns the slots written."""
        q_rows = np.atleast_2d(q_rows)
        z_rows = np.atleast_2d(z_rows)
        n = q_rows.shape[0]
        if q_rows.shape[1] != self.Q.shape[1] or z_rows.shape != (n, self.Z.shape[1]):
            raise EncoderError(
                f"row shape mismatch: q {q_rows.shape}, z {z_rows.shape} for queue "
                f"({self.Q.shape[1]}, {self.Z.shape[1]})"
            )
        if n > self.capacity:
            raise EncoderError(f"cannot enqueue {n} rows into capacity {self.capacity}")
        labels = np.full(n, -1, dtype=np.int64) if labels is None else np.asarray(labels)
        tags = np.full(n, -1, dtype=np.int64) if tags is None else np.asarray(tags)
        slots = (self.cursor + np.arange(n)) % self.capacity
        self.Q[slots] = q_rows
        self.Z[slots] = z_rows
        self.labels[slots] = labels
        self.tags[slots] = tags
        self.cursor = int((self.cursor + n) % self.capacity)
        self.count = min(self.capacity, self.count + n)
        return slots

    def contents(self):
        """Occupied rows, oldest first."""
        if self.full:
            order = (self.cursor + np.arange(self.capacity)) % self.capacity
        else:
            order = np.arange(self.count)
        return self.Q[order], self.Z[order], self.labels[order]

    def state(self) -> dict:
        return {
            "Q": self.Q.copy(), "Z": self.Z.copy(), "labels": self.labels.copy(),
            "tags": self.tags.copy(), "cursor": self.cursor, "count": self.count,
        }

    @classmethod
    def from_state(cls, st: dict) -> "QueuePair":
        q = cls(st["Q"].shape[0], st["Q"].shape[1], st["Z"].shape[1])
        q.Q, q.Z = st["Q"].copy(), st["Z"].copy()
        q.labels, q.tags = st["labels"].copy(), st["tags"].copy()
        q.cursor, q.count = int(st["cursor"]), int(st["count"])
        return q


# -- gradient checking -----------------------------------------------------


def finite_difference(fn, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of scalar ``fn`` at array ``x``."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + eps
        f_plus = fn(x)
        flat[j] = orig - eps
        f_minus = fn(x)
        flat[j] = orig
        g[j] = (f_plus - f_minus) / (2.0 * eps)
    return grad


def grad_check(loss_fn, params, eps: float = 1e-6) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn(params)`` returns ``(loss, grads)``. ``params`` is an array or
    a dict of arrays; ``grads`` must have the same structure. The error per
    entry is ``|analytic - fd| / (|fd| + 1e-8)``.
    """
    if isinstance(params, np.ndarray):
        loss0, _ = loss_fn(params)
        again, analytic = loss_fn(params)
        if loss0 != again:
            raise EncoderError("loss function is not deterministic")
        fd = finite_difference(lambda p: loss_fn(p)[0], params, eps)
        return float(np.max(np.abs(analytic - fd) / (np.abs(fd) + 1e-8)))

    loss0, _ = loss_fn(params)
    again, analytic = loss_fn(params)
    if loss0 != again:
        raise EncoderError("loss function is not deterministic")
    worst = 0.0
    for name in params:
        def partial(arr, name=name):
            trial = dict(params)
            trial[name] = arr
            return loss_fn(trial)[0]

        fd = finite_difference(partial, params[name], eps)
        err = np.abs(analytic[name] - fd) / (np.abs(fd) + 1e-8)
        worst = max(worst, float(err.max()) if err.size else 0.0)
    return worst
