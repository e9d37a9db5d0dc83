import numpy as np
import pytest

from cxrkit.dataset import (SPLIT_PRESETS, Finding, LabelScheme, Manifest, SampleRecord, Source, Split,
                            class_counts, class_rng, encode_label, fuse, kfold, read_manifest, split,
                            stratified_folds, write_manifest)
from cxrkit.errors import ConfigError, CountMismatchError, DuplicatePathError, TooFewSamplesError
from cxrkit.synthetic import corpus_standin


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    manifests = corpus_standin(root, size=4)
    return root, fuse([manifests[Source.COVID19], manifests[Source.RSNA], manifests[Source.NLMMC]])


def _records(findings):
    return Manifest(tuple(SampleRecord(path=f"img_{i}.png", source=Source.SYNTHETIC, finding=f)
                          for i, f in enumerate(findings)))


@pytest.mark.parametrize("scheme,expected", [
    (LabelScheme.Binary, [0, 1, 0, 0]),
    (LabelScheme.Multi3, [0, 1, 2, 2]),
    (LabelScheme.Multi4, [0, 1, 2, 3]),
])
def test_encode_label(scheme, expected):
    findings = [Finding.Normal, Finding.COVID19, Finding.OtherPneumonia, Finding.Tuberculosis]
    assert [encode_label(f, scheme) for f in findings] == expected


def test_label_scheme_parse_and_names():
    assert LabelScheme.parse("m3") is LabelScheme.Multi3
    assert LabelScheme.parse("Binary") is LabelScheme.Binary
    assert LabelScheme.Multi4.num_classes == 4
    assert LabelScheme.Binary.class_names == ("nonCOVID19", "COVID19")
    with pytest.raises(ValueError):
        LabelScheme.parse("five")


def test_label_scheme_is_still_a_str():
    assert LabelScheme.Multi3.encode("unicode_escape") == b"Multi3"
    assert LabelScheme.Multi3.index_of(Finding.Tuberculosis) == 2


def test_manifest_rejects_duplicate_paths():
    record = SampleRecord(path="a.png", source=Source.RSNA, finding=Finding.Normal)
    with pytest.raises(DuplicatePathError):
        Manifest((record, record))


def test_fuse_counts_per_class(corpus):
    _, fused = corpus
    assert len(fused) == 1214
    assert class_counts(fused, LabelScheme.Multi4).tolist() == [533, 108, 515, 58]
    assert class_counts(fused, LabelScheme.Multi3).tolist() == [533, 108, 573]
    assert class_counts(fused, LabelScheme.Binary).tolist() == [1106, 108]
    assert fused.records[0].source == Source.COVID19
    assert fuse([]).records == ()


@pytest.mark.parametrize("preset", ["table2-cb", "table2-cm3", "table2-cm4"])
def test_split_presets_reproduce_counts(corpus, preset):
    _, fused = corpus
    scheme, counts = SPLIT_PRESETS[preset]
    assigned = split(fused, scheme, counts, seed=7)
    for s, column in ((Split.Train, 0), (Split.Val, 1), (Split.Test, 2)):
        expected = [counts[c][column] for c in range(scheme.num_classes)]
        assert class_counts(assigned, scheme, s).tolist() == expected
    assert [r.path for r in assigned] == [r.path for r in fused]


def test_split_is_deterministic_per_seed(corpus):
    _, fused = corpus
    scheme, counts = SPLIT_PRESETS["table2-cb"]
    first = [r.split for r in split(fused, scheme, counts, seed=3)]
    second = [r.split for r in split(fused, scheme, counts, seed=3)]
    other = [r.split for r in split(fused, scheme, counts, seed=4)]
    assert first == second
    assert first != other


def test_split_seeds_give_distinct_partitions(corpus):
    _, fused = corpus
    scheme, counts = SPLIT_PRESETS["table2-cm4"]
    partitions = [tuple(r.split for r in split(fused, scheme, counts, seed=s)) for s in range(6)]
    assert len(set(partitions)) == len(partitions)


def test_split_count_mismatch():
    manifest = _records([Finding.Normal] * 5 + [Finding.COVID19] * 2)
    with pytest.raises(CountMismatchError):
        split(manifest, LabelScheme.Binary, {0: (3, 1, 0), 1: (1, 1, 0)}, seed=0)
    with pytest.raises(CountMismatchError):
        split(manifest, LabelScheme.Binary, {0: (3, 1, 1), 1: (1, 1, 0), 2: (0, 0, 0)}, seed=0)


def test_class_rng_streams_are_independent():
    assert class_rng(1, 0).integers(0, 1000, 5).tolist() == class_rng(1, 0).integers(0, 1000, 5).tolist()
    assert class_rng(1, 0).integers(0, 1000, 5).tolist() != class_rng(1, 1).integers(0, 1000, 5).tolist()


def test_stratified_folds_partition_and_balance():
    labels = np.array([0] * 10 + [1] * 7 + [2] * 4)
    folds = stratified_folds(labels, 4, seed=0)
    assert len(folds) == 4
    val_union = np.concatenate([val for _, val in folds])
    assert sorted(val_union.tolist()) == list(range(len(labels)))
    for train, val in folds:
        assert not set(train) & set(val)
    for cls in range(3):
        sizes = [int(np.sum(labels[val] == cls)) for _, val in folds]
        assert max(sizes) - min(sizes) <= 1


def test_stratified_folds_need_k_per_class():
    with pytest.raises(TooFewSamplesError):
        stratified_folds(np.array([0, 0, 0, 0, 1, 1, 1]), 4, seed=0)
    with pytest.raises(ValueError):
        stratified_folds(np.array([0, 1]), 1, seed=0)


def test_kfold_on_manifest():
    manifest = _records([Finding.Normal] * 8 + [Finding.Tuberculosis] * 4)
    folds = kfold(manifest, 4, seed=1)
    assert all(len(val) == 3 for _, val in folds)


def test_manifest_csv_round_trip(tmp_path):
    manifest = _records([Finding.Normal, Finding.COVID19])
    path = write_manifest(manifest, tmp_path / "m.csv")
    assert path.read_text().splitlines()[0] == "path,source,finding,split"
    assert read_manifest(path).records == manifest.records


def test_read_manifest_errors(tmp_path):
    bad_header = tmp_path / "bad.csv"
    bad_header.write_text("file,label\na.png,Normal\n")
    with pytest.raises(ConfigError):
        read_manifest(bad_header)
    bad_value = tmp_path / "value.csv"
    bad_value.write_text("path,source,finding,split\na.png,RSNA,Flu,Train\n")
    with pytest.raises(ConfigError):
        read_manifest(bad_value)
    with pytest.raises(ConfigError):
        read_manifest(tmp_path / "missing.csv")
