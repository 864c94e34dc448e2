import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ltgcd.data import (DatasetError, DatasetFormatError, ImbalanceProfile, LtDataset,
                        class_means, class_sizes, export_labels_csv, load_dataset, save_dataset,
                        split_counts, split_labeled, synth_dataset, validate)


def test_rho_one_is_balanced():
    sizes = class_sizes(ImbalanceProfile("exp", 1.0, 4, 100))
    assert sizes.tolist() == [100, 100, 100, 100]


def test_cifar100_lt_ratio():
    sizes = class_sizes(ImbalanceProfile("exp", 100.0, 100, 500))
    assert sizes[0] == 500
    assert sizes[-1] == 5
    assert sizes[0] / sizes[-1] == pytest.approx(100.0)


def test_pareto_matches_closed_form():
    # evaluate the profile formula independently: n_max * (c+1)^(-ln(rho)/ln(C))
    expected = [math.floor(64 * (c + 1) ** (-math.log(4) / math.log(3)) + 0.5) for c in range(3)]
    sizes = class_sizes(ImbalanceProfile("pareto", 4.0, 3, 64))
    assert sizes.tolist() == expected == [64, 27, 16]


@pytest.mark.parametrize("profile", [
    ImbalanceProfile("exp", 0.5, 4, 100),
    ImbalanceProfile("exp", 100.0, 10, 100),  # tail of 1
    ImbalanceProfile("exp", 2.0, 1, 100),
    ImbalanceProfile("zipf", 2.0, 4, 100),
])
def test_bad_profiles_rejected(profile):
    with pytest.raises(DatasetError):
        class_sizes(profile)


def test_split_counts_examples():
    sizes = np.array([10, 9, 7])
    known = np.array([True, True, False])
    labeled = split_labeled(sizes, known)
    assert list(zip(labeled, sizes - labeled)) == [(5, 5), (4, 5), (0, 7)]


def test_split_counts_from_masks():
    ds = synth_dataset(ImbalanceProfile("exp", 5.0, 5, 41), 4, 5.0, seed=3, n_known=3)
    labeled, unlabeled = split_counts(ds)
    sizes = ds.class_sizes
    for c in range(ds.C):
        want = sizes[c] // 2 if c in ds.known_classes else 0
        assert labeled[c] == want
        assert labeled[c] + unlabeled[c] == sizes[c]
    assert ds.M1 + ds.M2 == ds.M


@pytest.mark.parametrize("C,d", [(6, 3), (4, 8)])
def test_centres_are_separated(C, d):
    centres = class_means(C, d, 2.5, 1.5, np.random.default_rng(0))
    gaps = np.linalg.norm(centres[:, None] - centres[None], axis=-1)[~np.eye(C, dtype=bool)]
    assert gaps.min() >= 2.5 * 1.5 - 1e-9


def test_synth_is_reproducible():
    p = ImbalanceProfile("exp", 10.0, 5, 50)
    a = synth_dataset(p, 6, 4.0, seed=11)
    b = synth_dataset(p, 6, 4.0, seed=11)
    assert np.array_equal(a.features, b.features)
    assert np.array_equal(a.labeled_mask, b.labeled_mask)
    assert a.known_classes == b.known_classes


def test_balanced_test_split():
    ds = synth_dataset(ImbalanceProfile("exp", 10.0, 5, 50), 6, 4.0, seed=1, test_per_class=7)
    assert np.bincount(ds.test_labels).tolist() == [7] * 5


def test_round_trip(tmp_path):
    ds = synth_dataset(ImbalanceProfile("pareto", 8.0, 6, 90), 5, 4.0, seed=2)
    path = tmp_path / "ds.bin"
    save_dataset(ds, path)
    back = load_dataset(path)
    assert back.features.tobytes() == ds.features.tobytes()
    assert np.array_equal(back.true_labels, ds.true_labels)
    assert np.array_equal(back.labeled_mask, ds.labeled_mask)
    assert back.test_features.tobytes() == ds.test_features.tobytes()
    assert back.known_classes == ds.known_classes
    assert back.profile == ds.profile
    assert (back.seed, back.sep, back.sigma) == (ds.seed, ds.sep, ds.sigma)


def test_truncated_file_is_format_error(tmp_path):
    ds = synth_dataset(ImbalanceProfile("exp", 4.0, 4, 40), 3, 4.0, seed=0)
    path = tmp_path / "ds.bin"
    save_dataset(ds, path)
    path.write_bytes(path.read_bytes()[:-50])
    with pytest.raises(DatasetFormatError):
        load_dataset(path)


def test_corrupted_payload_is_format_error(tmp_path):
    ds = synth_dataset(ImbalanceProfile("exp", 4.0, 4, 40), 3, 4.0, seed=0)
    path = tmp_path / "ds.bin"
    save_dataset(ds, path)
    raw = bytearray(path.read_bytes())
    raw[200] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(DatasetFormatError, match="checksum"):
        load_dataset(path)


def test_zero_class_header_is_validation_error(tmp_path):
    ds = synth_dataset(ImbalanceProfile("exp", 4.0, 4, 40), 3, 4.0, seed=0)
    path = tmp_path / "ds.bin"
    save_dataset(ds, path)
    raw = bytearray(path.read_bytes())
    raw[12:16] = (0).to_bytes(4, "little")  # C follows magic and version
    path.write_bytes(bytes(raw))
    with pytest.raises(DatasetError) as info:
        load_dataset(path)
    assert not isinstance(info.value, DatasetFormatError)


def test_bad_magic_and_version(tmp_path):
    ds = synth_dataset(ImbalanceProfile("exp", 4.0, 4, 40), 3, 4.0, seed=0)
    path = tmp_path / "ds.bin"
    save_dataset(ds, path)
    raw = bytearray(path.read_bytes())
    bad = bytearray(raw)
    bad[0:1] = b"X"
    path.write_bytes(bytes(bad))
    with pytest.raises(DatasetFormatError, match="magic"):
        load_dataset(path)
    bad = bytearray(raw)
    bad[8:12] = (99).to_bytes(4, "little")
    path.write_bytes(bytes(bad))
    with pytest.raises(DatasetFormatError, match="version"):
        load_dataset(path)


def test_labels_csv(tmp_path):
    ds = synth_dataset(ImbalanceProfile("exp", 4.0, 4, 40), 3, 4.0, seed=0)
    path = tmp_path / "labels.csv"
    export_labels_csv(ds, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "index,label,labeled"
    assert len(lines) == ds.M + 1
    assert sum(int(line.split(",")[2]) for line in lines[1:]) == ds.M1


def test_validate_rejects_labeled_novel():
    ds = synth_dataset(ImbalanceProfile("exp", 4.0, 4, 40), 3, 4.0, seed=0, n_known=2)
    mask = ds.labeled_mask.copy()
    novel = ds.novel_classes[0]
    mask[np.flatnonzero(ds.true_labels == novel)[0]] = True
    with pytest.raises(DatasetError):
        LtDataset(ds.features, ds.true_labels, mask, ds.known_classes, ds.C, ds.profile,
                  ds.seed, ds.sep, ds.sigma, ds.test_features, ds.test_labels)


@settings(max_examples=40, deadline=None)
@given(
    kind=st.sampled_from(["exp", "pareto"]),
    C=st.integers(2, 12),
    rho=st.floats(1.0, 30.0),
    n_max=st.integers(60, 400),
    seed=st.integers(0, 2**32 - 1),
)
def test_profile_and_split_invariants(kind, C, rho, n_max, seed):
    profile = ImbalanceProfile(kind, rho, C, n_max)
    try:
        sizes = class_sizes(profile)
    except DatasetError:
        # only a too-small tail is a legitimate rejection here
        assert n_max / rho < 2.5
        return
    assert np.all(np.diff(sizes) <= 0)
    # rounding moves each end by at most half a unit
    lo, hi = (sizes[0] - 0.5) / (sizes[-1] + 0.5), (sizes[0] + 0.5) / (sizes[-1] - 0.5)
    assert lo <= rho * (1 + 1e-12) and hi >= rho * (1 - 1e-12)
    ds = synth_dataset(profile, 3, 3.0, seed % 1000)
    validate(ds)
    assert sizes.sum() == ds.M
    assert np.array_equal(ds.class_sizes, sizes)
    labeled, _ = split_counts(ds)
    assert np.array_equal(labeled, np.where(ds.known_mask, sizes // 2, 0))
    assert not np.any(ds.labeled_mask & ~ds.known_mask[ds.true_labels])
