import random

import pytest
from hypothesis import given, settings, strategies as st

from strokeclot.dataset import (
    DatasetIndex, DatasetKind, DuplicateImageId, DuplicateImageNum, EmptyIndex,
    IllegalLabelForKind, ImageRecord, Label, MissingColumn, TooFewPatients, class_stats,
    load_folds, load_metadata, select_last_chronological, stratified_kfold, write_folds,
)
from oracles import count_labels, last_per_group


def make_index(spec, kind=DatasetKind.TRAIN):
    """spec: list of (patient, n_images, label)."""
    recs = []
    for patient, n, label in spec:
        for k in range(n):
            recs.append(ImageRecord(f"{patient}_{k}", patient, k, Label(label)))
    return DatasetIndex(tuple(recs), kind)


def test_load_sorts_by_patient_and_image_num(metadata_csv):
    path = metadata_csv([("c", "p1", 2, "11", "CE"), ("a", "p1", 0, "11", "CE"), ("b", "p1", 1, "11", "CE")])
    index = load_metadata(path)
    assert [r.image_num for r in index.records] == [0, 1, 2]
    assert [r.image_id for r in index.records] == ["a", "b", "c"]
    assert index.records[0].center_id == "11"


def test_load_without_center_column(metadata_csv):
    path = metadata_csv([("a", "p1", 0, "LAA")], header=("image_id", "patient_id", "image_num", "label"))
    (rec,) = load_metadata(path).records
    assert rec.center_id is None and rec.label is Label.LAA


def test_duplicate_image_id(metadata_csv):
    path = metadata_csv([("a", "p1", 0, "", "CE"), ("a", "p2", 0, "", "CE")])
    with pytest.raises(DuplicateImageId):
        load_metadata(path)


def test_duplicate_image_num(metadata_csv):
    path = metadata_csv([("a", "p1", 0, "", "CE"), ("b", "p1", 0, "", "CE")])
    with pytest.raises(DuplicateImageNum):
        load_metadata(path)


def test_train_rejects_other_label(metadata_csv):
    path = metadata_csv([("a", "p1", 0, "", "Other")])
    with pytest.raises(IllegalLabelForKind):
        load_metadata(path, DatasetKind.TRAIN)
    assert len(load_metadata(path, DatasetKind.OTHER)) == 1


def test_other_rejects_ce(metadata_csv):
    path = metadata_csv([("a", "p1", 0, "", "CE")])
    with pytest.raises(IllegalLabelForKind):
        load_metadata(path, DatasetKind.OTHER)


def test_missing_column(metadata_csv):
    path = metadata_csv([("a", "p1", "CE")], header=("image_id", "patient_id", "label"))
    with pytest.raises(MissingColumn):
        load_metadata(path)


def test_ca_alias_is_ce(metadata_csv):
    path = metadata_csv([("a", "p1", 0, "", "CA")])
    assert load_metadata(path).records[0].label is Label.CE


def test_more_than_five_images_warns(metadata_csv):
    path = metadata_csv([(f"i{k}", "p1", k, "", "CE") for k in range(6)])
    with pytest.warns(UserWarning):
        index = load_metadata(path)
    assert len(index) == 6


def test_class_stats_imbalanced_counts():
    index = make_index([(f"ce{i}", 1, "CE") for i in range(547)] + [(f"laa{i}", 1, "LAA") for i in range(207)])
    stats = class_stats(index)
    assert stats.counts == {Label.CE: 547, Label.LAA: 207}
    assert stats.rates[Label.CE] == pytest.approx(547 / 754, abs=1e-15)
    assert round(stats.rates[Label.CE], 2) == 0.73
    assert round(stats.rates[Label.LAA], 2) == 0.27


def test_class_stats_single_record():
    stats = class_stats(make_index([("p", 1, "CE")]))
    assert stats.counts == {Label.CE: 1, Label.LAA: 0}
    assert stats.rates == {Label.CE: 1.0, Label.LAA: 0.0}


def test_class_stats_empty():
    with pytest.raises(EmptyIndex):
        class_stats(DatasetIndex((), DatasetKind.TRAIN))


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 5), st.sampled_from(["CE", "LAA"])), min_size=1, max_size=60))
def test_class_stats_matches_counting_oracle(patients):
    index = make_index([(f"p{i}", n, lab) for i, (n, lab) in enumerate(patients)])
    stats = class_stats(index)
    expected = count_labels(r.label.value for r in index.records)
    total = sum(expected.values())
    for lab in (Label.CE, Label.LAA):
        assert stats.counts[lab] == expected.get(lab.value, 0)
        assert stats.rates[lab] == expected.get(lab.value, 0) / total
    assert abs(sum(stats.rates.values()) - 1.0) <= 1e-9
    assert stats.total == len(index)


def test_last_chronological_picks_max_image_num():
    recs = tuple(ImageRecord(f"i{n}", "p", n, Label.LAA) for n in (0, 4, 1))
    out = select_last_chronological(DatasetIndex(recs))
    assert [(r.image_id, r.image_num, r.label) for r in out.records] == [("i4", 4, Label.LAA)]


def test_last_chronological_identity_on_one_per_patient():
    index = make_index([("a", 1, "CE"), ("b", 1, "LAA")])
    assert select_last_chronological(index) == index


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 9), st.integers(0, 30)), min_size=1, max_size=80, unique=True))
def test_last_chronological_matches_group_max(pairs):
    recs = tuple(ImageRecord(f"p{p}_{n}", f"p{p}", n, Label.CE) for p, n in pairs)
    out = select_last_chronological(DatasetIndex(recs))
    expected = last_per_group((r.patient_id, r.image_num, r.image_id) for r in recs)
    assert {r.patient_id: r.image_id for r in out.records} == expected
    assert len(out) == len(expected)
    assert select_last_chronological(out) == out


def test_kfold_exact_divisibility():
    index = make_index([(f"ce{i}", 2, "CE") for i in range(5)] + [(f"laa{i}", 1, "LAA") for i in range(5)])
    for seed in (0, 1, 99):
        folds = stratified_kfold(index, 5, seed)
        for f in range(5):
            members = folds.patients_in(f)
            assert sorted(p[:2] for p in members) == ["ce", "la"]


def test_kfold_deterministic(tmp_path):
    index = make_index([(f"p{i}", 1, "CE" if i % 3 else "LAA") for i in range(40)])
    a, b = stratified_kfold(index, 5, 7), stratified_kfold(index, 5, 7)
    write_folds(a, tmp_path / "a.csv")
    write_folds(b, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert load_folds(tmp_path / "a.csv").fold_of_patient == a.fold_of_patient
    assert stratified_kfold(index, 5, 8).fold_of_patient != a.fold_of_patient


def test_kfold_632_patients_recount():
    rnd = random.Random(3)
    spec = [(f"p{i:03d}", rnd.randint(1, 5), "CE" if rnd.random() < 0.73 else "LAA") for i in range(632)]
    index = make_index(spec)
    folds = stratified_kfold(index, 5, 2024)
    labels = {p: lab for p, _, lab in spec}
    assert sorted(folds.fold_of_patient) == sorted(labels)
    for lab in ("CE", "LAA"):
        n = sum(v == lab for v in labels.values())
        for f in range(5):
            got = sum(labels[p] == lab for p in folds.patients_in(f))
            assert abs(got - n / 5) <= 1
    # every image of a patient shares the patient's fold by construction of the map
    assert all(r.patient_id in folds.fold_of_patient for r in index.records)


def test_kfold_too_few_patients():
    index = make_index([(f"ce{i}", 1, "CE") for i in range(10)] + [("laa0", 1, "LAA")])
    with pytest.raises(TooFewPatients):
        stratified_kfold(index, 5, 0)
    with pytest.raises(ValueError):
        stratified_kfold(index, 1, 0)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 7), st.integers(0, 2**63), st.integers(7, 40), st.integers(7, 40))
def test_kfold_invariants(k, seed, n_ce, n_laa):
    index = make_index([(f"c{i}", 1, "CE") for i in range(n_ce)] + [(f"l{i}", 1, "LAA") for i in range(n_laa)])
    folds = stratified_kfold(index, k, seed)
    assert set(folds.fold_of_patient) == {r.patient_id for r in index.records}
    assert set(folds.fold_of_patient.values()) <= set(range(k))
    for prefix, n in (("c", n_ce), ("l", n_laa)):
        for f in range(k):
            got = sum(p.startswith(prefix) for p in folds.patients_in(f))
            assert n // k <= got <= -(-n // k)
