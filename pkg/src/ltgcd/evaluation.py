"""Inference-time clustering and accuracy metrics.

Predictions are cluster ids; a single Hungarian assignment maps them onto
ground-truth classes for the whole test set, and Old/New/All accuracies are
read off that one mapping. Classes are bucketed into Many/Medium/Few by
their training-set size to measure balancedness.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .clustering import _kmeanspp, _sq_dists, kmeans, lloyd

MANY_ABOVE = 100
FEW_BELOW = 20
GROUPS = ("many", "medium", "few")


class EvalError(ValueError):
    pass


def _check_labels(labels, C, what):
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise EvalError(f"{what} label out of range [0, {C})")
    return labels


def hungarian_match(pred, truth, C):
    """Best bijection cluster -> class; returns ``(mapping, accuracy %)``."""
    pred = _check_labels(pred, C, "predicted")
    truth = _check_labels(truth, C, "true")
    if pred.shape != truth.shape:
        raise EvalError("prediction and truth lengths differ")
    counts = np.zeros((C, C), dtype=np.int64)
    np.add.at(counts, (pred, truth), 1)
    rows, cols = linear_sum_assignment(counts, maximize=True)
    mapping = np.empty(C, dtype=np.int64)
    mapping[rows] = cols
    matched = counts[rows, cols].sum()
    acc = 100.0 * matched / max(len(truth), 1)
    return mapping, float(acc)


def per_class_accuracy(mapped, truth, C) -> np.ndarray:
    acc = np.full(C, np.nan)
    for c in range(C):
        sel = truth == c
        if sel.any():
            acc[c] = 100.0 * np.mean(mapped[sel] == c)
    return acc


def group_of(class_sizes, many_above=MANY_ABOVE, few_below=FEW_BELOW) -> np.ndarray:
    """Group name per class from its training instance count."""
    sizes = np.asarray(class_sizes)
    if few_below > many_above:
        raise EvalError("group thresholds overlap")
    return np.where(sizes > many_above, "many", np.where(sizes < few_below, "few", "medium"))


def group_metrics(class_acc, class_sizes, many_above=MANY_ABOVE, few_below=FEW_BELOW,
                  select=None) -> dict:
    """Mean per-class accuracy for each group and their population std.

    Absent groups are reported as ``None``; the std needs all three.
    """
    class_acc = np.asarray(class_acc, dtype=np.float64)
    groups = group_of(class_sizes, many_above, few_below)
    if select is None:
        select = np.ones(class_acc.size, dtype=bool)
    out = {}
    for g in GROUPS:
        members = select & (groups == g) & ~np.isnan(class_acc)
        out[g] = float(class_acc[members].mean()) if members.any() else None
    vals = [out[g] for g in GROUPS]
    out["std"] = float(np.std(vals)) if all(v is not None for v in vals) else None
    return out


@dataclass
class EvalReport:
    acc_all: float
    acc_old: float | None
    acc_new: float | None
    groups_all: dict
    groups_known: dict
    groups_novel: dict
    std_known: float | None
    std_novel: float | None
    mapping: list
    class_accuracy: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def table(self) -> str:
        def fmt(v):
            return "  -  " if v is None else f"{v:5.1f}"

        lines = [
            "            Old    New    All",
            f"accuracy  {fmt(self.acc_old)}  {fmt(self.acc_new)}  {fmt(self.acc_all)}",
            "",
            "           Many   Med    Few    Std",
        ]
        for name, grp in (("all", self.groups_all), ("known", self.groups_known),
                          ("novel", self.groups_novel)):
            lines.append(f"{name:<9} {fmt(grp['many'])}  {fmt(grp['medium'])}  "
                         f"{fmt(grp['few'])}  {fmt(grp['std'])}")
        return "\n".join(lines)


def evaluate(pred, truth, C, known_classes, train_sizes, many_above=MANY_ABOVE,
             few_below=FEW_BELOW) -> EvalReport:
    truth = _check_labels(truth, C, "true")
    mapping, acc_all = hungarian_match(pred, truth, C)
    mapped = mapping[np.asarray(pred, dtype=np.int64)]
    known = np.zeros(C, dtype=bool)
    known[list(known_classes)] = True
    old = known[truth]
    acc_old = float(100.0 * np.mean(mapped[old] == truth[old])) if old.any() else None
    acc_new = float(100.0 * np.mean(mapped[~old] == truth[~old])) if (~old).any() else None
    class_acc = per_class_accuracy(mapped, truth, C)
    g_all = group_metrics(class_acc, train_sizes, many_above, few_below)
    g_known = group_metrics(class_acc, train_sizes, many_above, few_below, select=known)
    g_novel = group_metrics(class_acc, train_sizes, many_above, few_below, select=~known)
    return EvalReport(
        acc_all=acc_all, acc_old=acc_old, acc_new=acc_new,
        groups_all=g_all, groups_known=g_known, groups_novel=g_novel,
        std_known=g_known["std"], std_novel=g_novel["std"],
        mapping=[int(m) for m in mapping],
        class_accuracy=[None if np.isnan(a) else float(a) for a in class_acc],
    )


# -- inference clustering --------------------------------------------------

KMEANS = "kmeans"
SEMI_SUP = "semi-sup-kmeans"


def _unit(X):
    X = np.asarray(X, dtype=np.float64)
    norms = np.linalg.norm(X, axis=1, keepdims=True)
    return X / np.maximum(norms, 1e-12)


def semi_supervised_kmeans(X, C, labeled_X, labeled_y, known_classes, seed, max_iter=300):
    """k-means with labeled rows pinned to their class clusters.

    Known-class centres start at labeled means; the rest are k-means++
    seeded from ``X``. Returns cluster ids for the rows of ``X``.
    """
    known = list(known_classes)
    n_known = len(known)
    if X.shape[0] < C - n_known:
        raise EvalError("fewer unlabeled samples than novel clusters")
    slot = {k: j for j, k in enumerate(known)}
    centres = np.zeros((C, X.shape[1]))
    for k, j in slot.items():
        centres[j] = labeled_X[labeled_y == k].mean(axis=0)
    rng = np.random.default_rng(seed)
    if C > n_known:
        if n_known:
            closest = _sq_dists(X, centres[:n_known]).min(axis=1)
            for j in range(n_known, C):
                total = closest.sum()
                idx = rng.choice(len(X), p=closest / total) if total > 0 else rng.integers(len(X))
                centres[j] = X[idx]
                closest = np.minimum(closest, _sq_dists(X, centres[j : j + 1])[:, 0])
        else:
            centres = _kmeanspp(X, C, rng)
    data = np.concatenate([labeled_X, X], axis=0)
    rows = np.arange(labeled_X.shape[0])
    pinned = np.array([slot[int(y)] for y in labeled_y], dtype=np.int64)
    _, assign, _ = lloyd(data, centres, max_iter, fixed=(rows, pinned))
    return assign[labeled_X.shape[0]:]


def infer_clusters(features, C, mode=KMEANS, seed=0, labeled_features=None,
                   labeled_labels=None, known_classes=()):
    """Cluster test features (on the unit sphere) into ``C`` groups."""
    X = _unit(features)
    if C > X.shape[0]:
        raise EvalError(f"C={C} exceeds the number of test samples {X.shape[0]}")
    if mode == KMEANS:
        return kmeans(X, C, seed)[1]
    if mode == SEMI_SUP:
        if labeled_features is None:
            raise EvalError("semi-supervised k-means needs labeled features")
        return semi_supervised_kmeans(X, C, _unit(labeled_features),
                                      np.asarray(labeled_labels), known_classes, seed)
    raise EvalError(f"unknown inference mode {mode!r}")
