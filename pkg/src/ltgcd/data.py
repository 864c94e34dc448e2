"""Synthetic long-tailed feature datasets and their on-disk container.

Every class is an isotropic Gaussian blob in feature space. Class sizes
follow an exponential or Pareto profile; half of each known class (rounded
down) is labeled, everything else is unlabeled. A balanced test split is
drawn from the same blobs.
"""

from __future__ import annotations

import csv
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

EXPONENTIAL = "exp"
PARETO = "pareto"
PROFILE_KINDS = (EXPONENTIAL, PARETO)

MAGIC = b"LTGCDDS\x00"
FORMAT_VERSION = 1
# magic, version, C, d, M, T, seed, kind, rho, n_max, sep, sigma
_HEADER = struct.Struct("<8sIIIIIQBdIdd")


class DatasetError(ValueError):
    """Invalid dataset parameters or a dataset violating its invariants."""


class DatasetFormatError(DatasetError):
    """A dataset file that cannot be parsed."""


@dataclass(frozen=True)
class ImbalanceProfile:
    kind: str
    rho: float
    C: int
    n_max: int

    def sizes(self) -> np.ndarray:
        return class_sizes(self)


def class_sizes(profile: ImbalanceProfile) -> np.ndarray:
    """Per-class instance counts, non-increasing in class index.

    Exponential: ``n_max * rho**(-c/(C-1))``. Pareto: ``n_max * (c+1)**(-a)``
    with ``a = log(rho)/log(C)`` so the last class is exactly ``n_max/rho``
    before rounding.
    """
    kind, rho, C, n_max = profile.kind, float(profile.rho), int(profile.C), int(profile.n_max)
    if kind not in PROFILE_KINDS:
        raise DatasetError(f"unknown profile kind {kind!r}")
    if C < 2:
        raise DatasetError(f"need at least 2 classes, got C={C}")
    if not rho >= 1.0:
        raise DatasetError(f"imbalance ratio must be >= 1, got {rho}")
    if n_max < C:
        raise DatasetError(f"n_max={n_max} must be >= C={C}")
    c = np.arange(C, dtype=np.float64)
    if kind == EXPONENTIAL:
        raw = n_max * rho ** (-c / (C - 1))
    else:
        raw = n_max * (c + 1.0) ** (-np.log(rho) / np.log(C))
    sizes = np.floor(raw + 0.5).astype(np.int64)
    if sizes[-1] < 2:
        raise DatasetError(
            f"tail class would hold {sizes[-1]} instance(s); need >= 2 to split"
        )
    return sizes


@dataclass(frozen=True, eq=False)
class LtDataset:
    features: np.ndarray
    true_labels: np.ndarray
    labeled_mask: np.ndarray
    known_classes: tuple
    C: int
    profile: ImbalanceProfile
    seed: int
    sep: float
    sigma: float = 1.0
    test_features: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    test_labels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        validate(self)

    @property
    def rho(self) -> float:
        return self.profile.rho

    @property
    def d(self) -> int:
        return self.features.shape[1]

    @property
    def M(self) -> int:
        return self.features.shape[0]

    @property
    def M1(self) -> int:
        return int(self.labeled_mask.sum())

    @property
    def M2(self) -> int:
        return self.M - self.M1

    @property
    def novel_classes(self) -> tuple:
        return tuple(c for c in range(self.C) if c not in set(self.known_classes))

    @property
    def class_sizes(self) -> np.ndarray:
        return np.bincount(self.true_labels, minlength=self.C)

    @property
    def known_mask(self) -> np.ndarray:
        """Length-C boolean mask of known classes."""
        mask = np.zeros(self.C, dtype=bool)
        mask[list(self.known_classes)] = True
        return mask

    def class_distribution(self) -> np.ndarray:
        sizes = self.class_sizes.astype(np.float64)
        return sizes / sizes.sum()


def validate(ds: LtDataset) -> None:
    if ds.C < 1:
        raise DatasetError(f"C must be positive, got {ds.C}")
    X, y, mask = ds.features, ds.true_labels, ds.labeled_mask
    if X.ndim != 2:
        raise DatasetError("features must be a 2-D matrix")
    if y.shape != (X.shape[0],) or mask.shape != (X.shape[0],):
        raise DatasetError("labels/mask length does not match feature rows")
    if y.size and (y.min() < 0 or y.max() >= ds.C):
        raise DatasetError("label out of range")
    known = np.zeros(ds.C, dtype=bool)
    for c in ds.known_classes:
        if not 0 <= c < ds.C:
            raise DatasetError(f"known class {c} out of range")
        known[c] = True
    if np.any(mask & ~known[y]):
        raise DatasetError("labeled sample from a novel class")
    if ds.test_features.size and ds.test_features.shape[1] != X.shape[1]:
        raise DatasetError("test feature dimension mismatch")
    if not np.all(np.isfinite(X)):
        raise DatasetError("non-finite feature values")


def class_means(C: int, d: int, sep: float, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Blob centres with pairwise distance at least ``sep * sigma``."""
    if C <= d:
        # Random orthonormal frame: every pair sits exactly sep*sigma apart.
        q, _ = np.linalg.qr(rng.standard_normal((d, C)))
        return q.T * (sep * sigma / np.sqrt(2.0))
    dirs = rng.standard_normal((C, d))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    gaps = np.linalg.norm(dirs[:, None, :] - dirs[None, :, :], axis=-1)
    min_gap = gaps[~np.eye(C, dtype=bool)].min()
    if min_gap <= 0:
        raise DatasetError("degenerate class centres")
    return dirs * (sep * sigma / min_gap)


def split_labeled(sizes: np.ndarray, known: np.ndarray) -> np.ndarray:
    """Per-class labeled counts: floor(size/2) for known classes, 0 otherwise."""
    return np.where(known, sizes // 2, 0)


def synth_dataset(
    profile: ImbalanceProfile,
    d: int,
    sep: float,
    seed: int,
    n_known: int | None = None,
    known_select: str = "random",
    test_per_class: int = 50,
    sigma: float = 1.0,
) -> LtDataset:
    """Draw a long-tailed Gaussian-mixture dataset.

    ``known_select`` picks which classes carry labels: ``"random"`` (seeded
    choice) or ``"head"`` (the ``n_known`` largest classes).
    """
    if not sep > 0:
        raise DatasetError(f"sep must be positive, got {sep}")
    if d < 1:
        raise DatasetError(f"d must be positive, got {d}")
    sizes = class_sizes(profile)
    C = profile.C
    if n_known is None:
        n_known = C // 2
    if not 0 <= n_known <= C:
        raise DatasetError(f"n_known={n_known} out of range for C={C}")
    rng = np.random.default_rng(seed)
    means = class_means(C, d, sep, sigma, rng)
    if known_select == "random":
        known_classes = tuple(sorted(int(c) for c in rng.choice(C, size=n_known, replace=False)))
    elif known_select == "head":
        known_classes = tuple(range(n_known))
    else:
        raise DatasetError(f"unknown known_select {known_select!r}")
    known = np.zeros(C, dtype=bool)
    known[list(known_classes)] = True

    labels = np.repeat(np.arange(C), sizes)
    X = means[labels] + sigma * rng.standard_normal((labels.size, d))
    mask = np.zeros(labels.size, dtype=bool)
    n_lab = split_labeled(sizes, known)
    start = 0
    for c in range(C):
        pick = rng.permutation(sizes[c])[: n_lab[c]]
        mask[start + pick] = True
        start += sizes[c]

    test_labels = np.repeat(np.arange(C), test_per_class)
    X_test = means[test_labels] + sigma * rng.standard_normal((test_labels.size, d))
    return LtDataset(
        features=X,
        true_labels=labels.astype(np.int64),
        labeled_mask=mask,
        known_classes=known_classes,
        C=C,
        profile=profile,
        seed=int(seed),
        sep=float(sep),
        sigma=float(sigma),
        test_features=X_test,
        test_labels=test_labels.astype(np.int64),
    )


def split_counts(ds: LtDataset) -> tuple[np.ndarray, np.ndarray]:
    """(labeled, unlabeled) instance counts per class."""
    labeled = np.bincount(ds.true_labels[ds.labeled_mask], minlength=ds.C)
    return labeled, ds.class_sizes - labeled


# -- container -------------------------------------------------------------


def save_dataset(ds: LtDataset, path) -> None:
    """Write ``ds`` to a versioned little-endian binary container.

    Layout: fixed header, known-class flags (C bytes), train features (M*d
    f8), labels (M i8), labeled flags (M bytes), test features (T*d f8),
    test labels (T i8), then a CRC32 of everything before it.
    """
    kind = PROFILE_KINDS.index(ds.profile.kind)
    header = _HEADER.pack(
        MAGIC, FORMAT_VERSION, ds.C, ds.d, ds.M, ds.test_labels.size, ds.seed,
        kind, float(ds.rho), ds.profile.n_max, ds.sep, ds.sigma,
    )
    test_X = ds.test_features.reshape(ds.test_labels.size, ds.d)
    body = b"".join([
        header,
        ds.known_mask.astype(np.uint8).tobytes(),
        np.ascontiguousarray(ds.features, dtype="<f8").tobytes(),
        np.ascontiguousarray(ds.true_labels, dtype="<i8").tobytes(),
        ds.labeled_mask.astype(np.uint8).tobytes(),
        np.ascontiguousarray(test_X, dtype="<f8").tobytes(),
        np.ascontiguousarray(ds.test_labels, dtype="<i8").tobytes(),
    ])
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


def load_dataset(path) -> LtDataset:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size + 4:
        raise DatasetFormatError(f"{path}: file too short for header")
    (magic, version, C, d, M, T, seed, kind, rho, n_max, sep, sigma) = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise DatasetFormatError(f"{path}: bad magic")
    if version != FORMAT_VERSION:
        raise DatasetFormatError(f"{path}: unsupported version {version}")
    if C < 1 or d < 1:
        raise DatasetError(f"{path}: invalid dimensions C={C} d={d}")
    if kind >= len(PROFILE_KINDS):
        raise DatasetFormatError(f"{path}: unknown profile kind {kind}")
    expected = _HEADER.size + C + M * d * 8 + M * 8 + M + T * d * 8 + T * 8 + 4
    if len(raw) != expected:
        raise DatasetFormatError(
            f"{path}: size {len(raw)} does not match header dimensions (expected {expected})"
        )
    (crc,) = struct.unpack_from("<I", raw, len(raw) - 4)
    if zlib.crc32(raw[:-4]) != crc:
        raise DatasetFormatError(f"{path}: checksum mismatch")

    off = _HEADER.size

    def take(count, dtype):
        nonlocal off
        arr = np.frombuffer(raw, dtype=dtype, count=count, offset=off).copy()
        off += arr.nbytes
        return arr

    known = take(C, np.uint8).astype(bool)
    X = take(M * d, "<f8").reshape(M, d).astype(np.float64)
    y = take(M, "<i8").astype(np.int64)
    mask = take(M, np.uint8).astype(bool)
    X_test = take(T * d, "<f8").reshape(T, d).astype(np.float64)
    y_test = take(T, "<i8").astype(np.int64)
    profile = ImbalanceProfile(PROFILE_KINDS[kind], rho, C, n_max)
    return LtDataset(
        features=X,
        true_labels=y,
        labeled_mask=mask,
        known_classes=tuple(int(c) for c in np.flatnonzero(known)),
        C=C,
        profile=profile,
        seed=int(seed),
        sep=float(sep),
        sigma=float(sigma),
        test_features=X_test,
        test_labels=y_test,
    )


def export_labels_csv(ds: LtDataset, path) -> None:
    """Audit dump: one row per training sample."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "label", "labeled"])
        for i, (lab, flag) in enumerate(zip(ds.true_labels, ds.labeled_mask)):
            w.writerow([i, int(lab), int(flag)])
