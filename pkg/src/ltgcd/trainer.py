"""Two-stage training loop: category discovery, then representation balancing."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import encoder as enc
from .balancing import build_neighborhoods, balanced_loss, neighborhood_stats
from .clustering import estimate_distribution
from .config import TrainConfig
from .data import LtDataset
from .evaluation import evaluate, infer_clusters
from .objectives import cls_sup, cls_total, cls_unsup, rep_sup, rep_total, rep_unsup
from .pseudo_label import (LearnableDistribution, guided_loss, sinkhorn,
                           update_distribution)

log = logging.getLogger(__name__)

STAGE2_PARAMS = enc.BACKBONE + enc.PROJ_HEAD
_Q_FLOOR = 1e-300
HEAD_INIT_SCALE = 10.0


class NumericalError(RuntimeError):
    pass


@dataclass
class TrainState:
    params: dict
    momentum_params: dict
    queue: enc.QueuePair
    rng: np.random.Generator
    dist: LearnableDistribution | None = None
    pi_tilde: np.ndarray | None = None
    epoch1: int = 0
    epoch2: int = 0
    step1: int = 0
    history: list = field(default_factory=list)
    estimates: list = field(default_factory=list)
    refreshes: list = field(default_factory=list)
    bal_weights: np.ndarray | None = None
    bal_means: np.ndarray | None = None


def init_state(cfg: TrainConfig, ds: LtDataset) -> TrainState:
    rng = np.random.default_rng(cfg.seed)
    params = enc.init_params(ds.d, cfg.hidden, ds.C, cfg.dz, rng)
    return TrainState(
        params=params,
        momentum_params=enc.copy_params(params),
        queue=enc.QueuePair(cfg.queue_size, ds.C, cfg.dz),
        rng=rng,
    )


def _batches(M, B, rng):
    perm = rng.permutation(M)
    return [perm[i : i + B] for i in range(0, M, B)]


def _queue_labels(ds: LtDataset, idx):
    return np.where(ds.labeled_mask[idx], ds.true_labels[idx], -1)


def warm_up_queue(cfg: TrainConfig, ds: LtDataset, state: TrainState) -> int:
    """Forward-only momentum passes until the queue is full."""
    passes = 0
    while not state.queue.full:
        for idx in _batches(ds.M, cfg.batch_size, state.rng):
            room = state.queue.capacity - state.queue.count
            if room <= 0:
                break
            idx = idx[:room]
            x2 = enc.jitter(ds.features[idx], cfg.jitter, state.rng)
            _, q2, z2, _ = enc.forward(state.momentum_params, x2)
            state.queue.enqueue(q2, z2, _queue_labels(ds, idx), idx)
        passes += 1
    return passes


def target_distribution(cfg: TrainConfig, state: TrainState, C: int) -> np.ndarray:
    if cfg.target_dist == "uniform":
        return np.full(C, 1.0 / C)
    if cfg.target_dist == "estimated":
        pi = np.maximum(state.pi_tilde, 1e-12)
        return pi / pi.sum()
    return state.dist.pi


def refresh_estimate(cfg: TrainConfig, ds: LtDataset, state: TrainState):
    """Cluster momentum-backbone features to re-estimate the class distribution."""
    _, q_m, _, _ = enc.forward(state.momentum_params, ds.features)
    V = enc.backbone(state.momentum_params, ds.features)
    labeled_idx = np.flatnonzero(ds.labeled_mask)
    est = estimate_distribution(
        V, ds.C, gamma=cfg.gamma, seed=cfg.seed + state.epoch1,
        known_classes=ds.known_classes, labeled_idx=labeled_idx,
        labeled_labels=ds.true_labels[labeled_idx], predictions=np.argmax(q_m, axis=1),
        step=cfg.cluster_step, max_iter=cfg.cluster_iters, mean_mode=cfg.alpha_mean,
        n_init=cfg.kmeans_restarts,
    )
    pi_tilde = est.pi_tilde
    if not state.estimates and cfg.head_init == "prototypes":
        init_head_from_prototypes(state, est, V)
    state.pi_tilde = pi_tilde
    if cfg.target_dist == "learnable" and state.dist is None:
        state.dist = LearnableDistribution.from_pi(state.pi_tilde)
    state.estimates.append({
        "epoch": state.epoch1,
        "alpha": est.alpha,
        "sizes": [int(s) for s in est.sizes],
        "pi_tilde": [float(p) for p in est.pi_tilde],
    })
    return est


def init_head_from_prototypes(state: TrainState, est, V) -> None:
    """Point each classifier column at the prototype of its cluster.

    A fresh head has no basis for telling novel columns apart, so the first
    estimate's column assignment would otherwise be arbitrary. Logits start
    as ``HEAD_INIT_SCALE`` times the cosine to each prototype.
    """
    P = est.prototypes / np.linalg.norm(est.prototypes, axis=1, keepdims=True)
    scale = HEAD_INIT_SCALE / float(np.mean(np.linalg.norm(V, axis=1)))
    Wc = np.zeros_like(state.params["Wc"])
    Wc[:, est.column_of_cluster] = scale * P.T
    for params in (state.params, state.momentum_params):
        params["Wc"] = Wc.copy()
        params["bc"] = np.zeros_like(params["bc"])


def _finite(name, value, epoch):
    if not math.isfinite(value):
        raise NumericalError(f"non-finite {name} at epoch {epoch}")


def _check_params(params, where):
    for name, value in params.items():
        if not np.all(np.isfinite(value)):
            raise NumericalError(f"non-finite {name} {where}")


def run_stage1(cfg: TrainConfig, ds: LtDataset, state: TrainState | None = None,
               stop_at: int | None = None) -> TrainState:
    """Discovery stage; ``stop_at`` ends this call early at that epoch count."""
    if state is None:
        state = init_state(cfg, ds)
    warm_up_queue(cfg, ds, state)
    n_batches = math.ceil(ds.M / cfg.batch_size)
    total_steps = max(cfg.stage1_epochs * n_batches, 1)
    lam = cfg.lam
    labels_all = ds.true_labels
    last = cfg.stage1_epochs if stop_at is None else min(stop_at, cfg.stage1_epochs)
    while state.epoch1 < last:
        epoch = state.epoch1
        if epoch % cfg.T1 == 0 or state.pi_tilde is None:
            refresh_estimate(cfg, ds, state)
        sums = dict.fromkeys(("L_cls_u", "L_cls_s", "L_gud", "L_rep_u", "L_rep_s"), 0.0)
        row_viol = col_viol = 0.0
        for idx in _batches(ds.M, cfg.batch_size, state.rng):
            xb = ds.features[idx]
            x1 = enc.jitter(xb, cfg.jitter, state.rng)
            x2 = enc.jitter(xb, cfg.jitter, state.rng)
            _, q, z, cache = enc.forward(state.params, x1)
            _, q2, z2, _ = enc.forward(state.momentum_params, x2)
            negatives = state.queue.Z.copy()
            slots = state.queue.enqueue(q2, z2, _queue_labels(ds, idx), idx)
            Q = np.maximum(state.queue.Q, _Q_FLOOR)

            if cfg.target_dist == "learnable":
                l_gud, grad_n, res = guided_loss(Q, state.dist.log_sizes, state.pi_tilde,
                                                 cfg.beta, cfg.eps_reg, cfg.sinkhorn_iters)
            else:
                res = sinkhorn(Q, target_distribution(cfg, state, ds.C),
                               cfg.sinkhorn_iters, cfg.eps_reg)
                l_gud, grad_n = 0.0, None
            h = res.H[slots]
            lab = ds.labeled_mask[idx]

            l_u, g_u = cls_unsup(q, h)
            l_s, g_s = cls_sup(q[lab], labels_all[idx][lab])
            r_u, gz_u = rep_unsup(z, z2, negatives, cfg.tau_unsup)
            r_s, gz_s = rep_sup(z[lab], labels_all[idx][lab], state.queue.Z,
                                state.queue.labels, cfg.tau_sup)
            total = cls_total(l_u, l_s, l_gud, lam) + rep_total(r_u, r_s, lam)
            _finite("stage-1 loss", total, epoch)

            grad_q = (1.0 - lam) * g_u
            grad_q[lab] += lam * g_s
            grad_z = (1.0 - lam) * gz_u
            grad_z[lab] += lam * gz_s
            grads = enc.backward(state.params, cache, grad_q, grad_z)
            lr = 0.5 * cfg.lr * (1.0 + math.cos(math.pi * state.step1 / total_steps))
            enc.sgd_step(state.params, grads, lr)
            _check_params(state.params, f"after stage-1 step {state.step1} (epoch {epoch})")
            if grad_n is not None:
                state.dist = update_distribution(state.dist, grad_n, cfg.lr_pi)
            state.momentum_params = enc.momentum_update(state.params, state.momentum_params,
                                                        cfg.momentum)
            state.step1 += 1
            w = len(idx) / ds.M
            for key, val in zip(sums, (l_u, l_s, l_gud, r_u, r_s)):
                sums[key] += w * val
            row_viol = max(row_viol, res.row_violation)
            col_viol = max(col_viol, res.col_violation)

        pi_now = target_distribution(cfg, state, ds.C)
        state.history.append({
            "stage": 1, "epoch": epoch, **sums, "L_bal": None,
            "pi": [float(p) for p in pi_now],
            "pi_tilde": [float(p) for p in state.pi_tilde],
            "row_violation": row_viol, "col_violation": col_viol,
        })
        state.epoch1 += 1
    return state


def snapshot_neighborhoods(cfg: TrainConfig, ds: LtDataset, state: TrainState, epoch: int):
    _, _, Z_all, _ = enc.forward(state.params, ds.features)
    index = build_neighborhoods(Z_all, cfg.K, epoch)
    weights, means = neighborhood_stats(Z_all, index)
    state.refreshes.append({
        "epoch": epoch,
        "class_mean_scale": [
            float(np.mean(1.0 + weights[ds.true_labels == c])) for c in range(ds.C)
        ],
    })
    return index, weights, means


def run_stage2(cfg: TrainConfig, ds: LtDataset, state: TrainState,
               stop_at: int | None = None) -> TrainState:
    """Balance the backbone and projection head; the classifier is left alone."""
    last = cfg.stage2_epochs if stop_at is None else min(stop_at, cfg.stage2_epochs)
    while state.epoch2 < last:
        epoch = state.epoch2
        if state.bal_weights is None or epoch % cfg.T2 == 0:
            _, state.bal_weights, state.bal_means = snapshot_neighborhoods(cfg, ds, state, epoch)
        weights, means = state.bal_weights, state.bal_means
        total = 0.0
        for idx in _batches(ds.M, cfg.batch_size, state.rng):
            x1 = enc.jitter(ds.features[idx], cfg.jitter, state.rng)
            _, _, z, cache = enc.forward(state.params, x1)
            loss, gz, _ = balanced_loss(z, weights[idx], means[idx])
            _finite("balanced loss", loss, epoch)
            grads = enc.backward(state.params, cache, None, gz)
            enc.sgd_step(state.params, grads, cfg.lr_stage2, STAGE2_PARAMS)
            _check_params(state.params, f"after stage-2 step (epoch {epoch})")
            total += loss * len(idx) / ds.M
        state.history.append({
            "stage": 2, "epoch": epoch, "L_cls_u": None, "L_cls_s": None, "L_gud": None,
            "L_rep_u": None, "L_rep_s": None, "L_bal": total,
            "pi": None, "pi_tilde": None, "row_violation": None, "col_violation": None,
        })
        state.epoch2 += 1
    return state


# -- evaluation ------------------------------------------------------------


def extract_features(cfg: TrainConfig, params: dict, X: np.ndarray) -> np.ndarray:
    if cfg.eval_features == "projection":
        return enc.forward(params, X)[2]
    return enc.backbone(params, X)


def evaluate_state(cfg: TrainConfig, ds: LtDataset, state: TrainState):
    feats = extract_features(cfg, state.params, ds.test_features)
    lab = np.flatnonzero(ds.labeled_mask)
    pred = infer_clusters(
        feats, ds.C, cfg.eval_mode, cfg.seed,
        labeled_features=extract_features(cfg, state.params, ds.features[lab]),
        labeled_labels=ds.true_labels[lab], known_classes=ds.known_classes,
    )
    return evaluate(pred, ds.test_labels, ds.C, ds.known_classes, ds.class_sizes,
                    cfg.many_above, cfg.few_below)


def column_classes(state: TrainState, ds: LtDataset) -> np.ndarray:
    """True class matched to each classifier column.

    Columns are matched to classes with a Hungarian assignment on the
    training-set argmax predictions of the online head.
    """
    from scipy.optimize import linear_sum_assignment

    _, q, _, _ = enc.forward(state.params, ds.features)
    pred = np.argmax(q, axis=1)
    counts = np.zeros((ds.C, ds.C))
    np.add.at(counts, (pred, ds.true_labels), 1)
    rows, cols = linear_sum_assignment(counts, maximize=True)
    out = np.empty(ds.C, dtype=np.int64)
    out[rows] = cols
    return out


def aligned_distribution(state: TrainState, ds: LtDataset, pi: np.ndarray) -> np.ndarray:
    """Re-index a classifier-column distribution by true class."""
    out = np.zeros(ds.C)
    out[column_classes(state, ds)] = np.asarray(pi)
    return out


# -- checkpoints -----------------------------------------------------------


def save_checkpoint(state: TrainState, path) -> None:
    arrays = {f"p_{k}": v for k, v in state.params.items()}
    arrays.update({f"m_{k}": v for k, v in state.momentum_params.items()})
    qs = state.queue.state()
    arrays.update({f"q_{k}": v for k, v in qs.items() if isinstance(v, np.ndarray)})
    if state.dist is not None:
        arrays["log_sizes"] = state.dist.log_sizes
    if state.pi_tilde is not None:
        arrays["pi_tilde"] = state.pi_tilde
    if state.bal_weights is not None:
        arrays["bal_weights"] = state.bal_weights
        arrays["bal_means"] = state.bal_means
    meta = {
        "epoch1": state.epoch1, "epoch2": state.epoch2, "step1": state.step1,
        "cursor": qs["cursor"], "count": qs["count"],
        "rng": state.rng.bit_generator.state,
        "history": state.history, "estimates": state.estimates, "refreshes": state.refreshes,
    }
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> TrainState:
    with np.load(path) as z:
        data = {k: z[k] for k in z.files}
    meta = json.loads(bytes(data.pop("meta")).decode())
    params = {k[2:]: v for k, v in data.items() if k.startswith("p_")}
    mom = {k[2:]: v for k, v in data.items() if k.startswith("m_")}
    qs = {k[2:]: v for k, v in data.items() if k.startswith("q_")}
    qs.update(cursor=meta["cursor"], count=meta["count"])
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng"]
    return TrainState(
        params=params,
        momentum_params=mom,
        queue=enc.QueuePair.from_state(qs),
        rng=rng,
        dist=LearnableDistribution(data["log_sizes"]) if "log_sizes" in data else None,
        pi_tilde=data.get("pi_tilde"),
        epoch1=meta["epoch1"],
        epoch2=meta["epoch2"],
        step1=meta["step1"],
        history=meta["history"],
        estimates=meta["estimates"],
        refreshes=meta["refreshes"],
        bal_weights=data.get("bal_weights"),
        bal_means=data.get("bal_means"),
    )
