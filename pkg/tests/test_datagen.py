import struct

import numpy as np
import pytest

from mmlego.datagen import (BAG_MAGIC, ModalitySpec, MultiSource, SyntheticSpec, apply_overlap,
                            generate, load_dataset, parse_bags, read_bags, save_dataset,
                            split_folds, write_bags)
from mmlego.errors import ConfigError, EmptyBag, MalformedFile, TooFewSamples
from mmlego.training import TaskSpec, auc


def test_fold_sizes_and_disjointness():
    folds = split_folds(100, 5, seed=0)
    assert len(folds) == 5
    for tr, va, te in folds:
        assert (len(tr), len(va), len(te)) == (70, 15, 15)
        assert len(set(tr) | set(va) | set(te)) == 100


def test_folds_deterministic_and_seed_sensitive():
    a = split_folds(100, seed=3)
    assert all(np.array_equal(x, y) for fa, fb in zip(a, split_folds(100, seed=3))
               for x, y in zip(fa, fb))
    firsts = {tuple(split_folds(100, seed=s)[0][0]) for s in range(10)}
    assert len(firsts) == 10


def test_folds_are_independent_subsamples():
    folds = split_folds(200, seed=1)
    assert not np.array_equal(folds[0][2], folds[1][2])
    assert len(set(folds[0][2]) & set(folds[1][2])) > 0


def test_too_few_samples():
    with pytest.raises(TooFewSamples):
        split_folds(19)


def test_generator_is_deterministic():
    a, b = generate(SyntheticSpec(n_samples=50, seed=4)), generate(SyntheticSpec(n_samples=50, seed=4))
    assert np.array_equal(a.modalities["tab"].values, b.modalities["tab"].values)
    assert all(np.array_equal(x, y) for x, y in zip(a.modalities["bag"].values,
                                                     b.modalities["bag"].values))
    assert np.array_equal(a.y, b.y)


@pytest.mark.parametrize("balance", [0.5, 0.3])
def test_class_balance_within_tolerance(balance):
    ds = generate(SyntheticSpec(n_samples=2000, class_balance=balance, seed=1))
    assert abs(ds.y.mean() - balance) < 0.05


def test_noise_free_modality_is_perfectly_informative():
    spec = SyntheticSpec(n_samples=400, factor_dim=4,
                         modalities=(ModalitySpec("a", "tabular", 4, np.inf),), seed=2)
    ds = generate(spec)
    x = ds.modalities["a"].values
    # the label score is linear in z, and z is a linear image of x
    coef, *_ = np.linalg.lstsq(x, ds.score, rcond=None)
    assert auc(x @ coef, ds.y) > 0.999


def test_zero_snr_modality_is_uninformative():
    spec = SyntheticSpec(n_samples=2000, modalities=(ModalitySpec("a", "tabular", 8, 0.0),),
                         seed=3)
    ds = generate(spec)
    x = ds.modalities["a"].values
    coef, *_ = np.linalg.lstsq(x[:1000], ds.score[:1000], rcond=None)
    assert abs(auc(x[1000:] @ coef, ds.y[1000:]) - 0.5) < 0.06


def test_censoring_rate_matches_target():
    ds = generate(SyntheticSpec(n_samples=3000, task=TaskSpec("survival"), censoring_rate=0.3,
                                seed=5))
    assert abs(ds.censorship.mean() - 0.3) < 0.03
    assert (ds.times > 0).all()


def test_zero_overlap_gives_disjoint_training_sets():
    ds = generate(SyntheticSpec(n_samples=200, overlap=0.0, seed=6))
    tr, va, te = ds.folds[0]
    a = set(ds.available("tab", tr))
    b = set(ds.available("bag", tr))
    assert not a & b and a | b == set(tr)
    assert abs(len(a) - len(b)) <= 1
    assert ds.availability[va].all() and ds.availability[te].all()


@pytest.mark.parametrize("rho", [0.0, 0.3, 0.5, 1.0])
def test_paired_count_is_floor_rho_n(rho):
    base = generate(SyntheticSpec(n_samples=101, seed=7))
    tr = base.folds[0][0]
    ds = apply_overlap(base, tr, rho, seed=7)
    paired = ds.availability[tr].all(axis=1).sum()
    assert paired == int(np.floor(rho * len(tr)))


def test_invalid_overlap():
    with pytest.raises(ConfigError):
        SyntheticSpec(overlap=1.5)


def test_multisource_masks_modalities(small_dataset):
    src = MultiSource(small_dataset, np.arange(10), mask=("bag",))
    batch = src.collate(np.arange(4))
    assert batch.availability(["tab", "bag"]).tolist() == [[True, False]] * 4
    assert batch.positions("bag").size == 0


def test_dataset_roundtrip_is_bit_identical(tmp_path, small_dataset):
    ds = apply_overlap(small_dataset, small_dataset.folds[0][0], 0.5, seed=1)
    save_dataset(ds, tmp_path)
    back = load_dataset(tmp_path)
    assert np.array_equal(back.availability, ds.availability)
    rows = ds.available("tab")
    assert np.array_equal(back.modalities["tab"].values[rows], ds.modalities["tab"].values[rows])
    for i in ds.available("bag"):
        assert np.array_equal(back.modalities["bag"].values[i], ds.modalities["bag"].values[i])
    assert np.array_equal(back.y, ds.y)
    for fa, fb in zip(back.folds, ds.folds):
        assert all(np.array_equal(x, y) for x, y in zip(fa, fb))


def test_survival_labels_roundtrip(tmp_path):
    ds = generate(SyntheticSpec(n_samples=40, task=TaskSpec("survival"), seed=2))
    save_dataset(ds, tmp_path)
    back = load_dataset(tmp_path)
    assert np.array_equal(back.times, ds.times)
    assert np.array_equal(back.censorship, ds.censorship)


def _bag_bytes():
    rec = struct.pack("<I", 2) + b"s1" + struct.pack("<II", 2, 3) + np.arange(6.0).tobytes()
    return BAG_MAGIC + struct.pack("<H", 1) + rec


def test_truncated_payload_reports_offset():
    buf = _bag_bytes()
    payload_start = 6 + 4 + 2 + 8
    with pytest.raises(MalformedFile) as err:
        parse_bags(buf[:-5])
    assert err.value.offset == payload_start
    assert f"byte offset {payload_start}" in str(err.value)


def test_truncated_header_reports_offset():
    with pytest.raises(MalformedFile) as err:
        parse_bags(_bag_bytes()[:8])
    assert err.value.offset == 6


def test_bad_magic():
    with pytest.raises(MalformedFile) as err:
        parse_bags(b"XXXX\x01\x00")
    assert err.value.offset == 0


def test_empty_bag_rejected_at_load(tmp_path):
    buf = BAG_MAGIC + struct.pack("<H", 1) + struct.pack("<I", 1) + b"a" + struct.pack("<II", 0, 3)
    with pytest.raises(EmptyBag):
        parse_bags(buf)


def test_bag_file_roundtrip(tmp_path):
    bags = [np.random.default_rng(0).normal(size=(n, 3)) for n in (1, 4)]
    write_bags(tmp_path / "b.bags", ["x", "ÿ"], bags)
    ids, back = read_bags(tmp_path / "b.bags")
    assert ids == ["x", "ÿ"] and all(np.array_equal(a, b) for a, b in zip(bags, back))
