import struct

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from rebalance.errors import (
    DegenerateSplitError,
    InvalidInputError,
    LabelRangeError,
    MagicMismatchError,
    MissingAnnotationError,
    ParseError,
    TruncationError,
    VersionError,
)
from rebalance.models import AnnotationLedger, EmbeddingDataset, SplitSpec
from rebalance.services import dataset
from conftest import make_grouped


def _gemb(n=3, d=2, classes=(0, 1, 1), spurious=(1, 0, 1), num_classes=2, num_spurious=2, version=1):
    header = struct.pack("<4sIQQII", b"GEMB", version, n, d, num_classes, num_spurious)
    features = np.arange(n * d, dtype="<f4").tobytes()
    body = np.asarray(classes, dtype="<u4").tobytes()
    if num_spurious:
        body += np.asarray(spurious, dtype="<u4").tobytes()
    return header + features + body


def test_decode_gemb_reads_features_and_labels():
    ds = dataset.decode_gemb(_gemb())
    assert (ds.n, ds.d, ds.num_classes, ds.num_spurious) == (3, 2, 2, 2)
    assert ds.features.dtype == np.float64
    assert_array_equal(ds.features[2], [4.0, 5.0])
    assert_array_equal(ds.group_ids, [1, 2, 3])


def test_decode_gemb_without_spurious_block():
    ds = dataset.decode_gemb(_gemb(num_spurious=0))
    assert ds.spurious_labels is None
    with pytest.raises(MissingAnnotationError):
        ds.group_ids


def test_decode_gemb_errors():
    good = _gemb()
    with pytest.raises(MagicMismatchError) as err:
        dataset.decode_gemb(b"GEMX" + good[4:])
    assert err.value.offset == 0

    with pytest.raises(VersionError):
        dataset.decode_gemb(_gemb(version=2))

    with pytest.raises(TruncationError):
        dataset.decode_gemb(good[:-4])

    with pytest.raises(LabelRangeError) as err:
        dataset.decode_gemb(_gemb(classes=(0, 5, 1)))
    assert err.value.offset == dataset.GEMB_HEADER.size + 3 * 2 * 4 + 4

    with pytest.raises(ParseError):
        dataset.decode_gemb(good + b"\x00")


def test_gemb_file_round_trip(tmp_path, separable):
    path = tmp_path / "sep.gemb"
    dataset.save_embeddings(separable, str(path))
    loaded = dataset.load_embeddings(str(path))
    assert_array_equal(loaded.features, separable.features.astype(np.float32))
    assert_array_equal(loaded.class_labels, separable.class_labels)
    assert_array_equal(loaded.spurious_labels, separable.spurious_labels)


def test_load_csv(tmp_path):
    path = tmp_path / "tiny.csv"
    path.write_text("f0,f1,class,spurious\n0.5,1.5,0,1\n-1,2,1,0\n2,2,2,1\n")
    ds = dataset.load_embeddings(str(path))
    assert (ds.n, ds.d, ds.num_classes, ds.num_spurious) == (3, 2, 3, 2)
    assert_array_equal(ds.class_labels, [0, 1, 2])


def test_load_csv_rejects_bad_header(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("a,b,class\n1,2,0\n")
    with pytest.raises(ParseError):
        dataset.load_csv(str(path))


@pytest.mark.parametrize("rows", ["0.5,1.5,1.7\n-1,2,0\n", "0.5,1.5,1\n-1,2,0.5\n"])
def test_load_csv_rejects_fractional_labels(tmp_path, rows):
    path = tmp_path / "frac.csv"
    path.write_text("f0,f1,class\n" + rows)
    with pytest.raises(InvalidInputError, match="not an integer"):
        dataset.load_csv(str(path))


def test_load_csv_accepts_integral_floats(tmp_path):
    path = tmp_path / "floats.csv"
    path.write_text("f0,f1,class,spurious\n0.5,1.5,1.0,0.0\n-1,2,0.0,1.0\n")
    ds = dataset.load_csv(str(path))
    assert_array_equal(ds.class_labels, [1, 0])
    assert_array_equal(ds.spurious_labels, [0, 1])


def test_load_csv_missing_label_is_a_parse_error(tmp_path):
    path = tmp_path / "gap.csv"
    path.write_text("f0,f1,class\n0.5,1.5,\n-1,2,0\n")
    with pytest.raises(ParseError):
        dataset.load_csv(str(path))


def test_csv_round_trip_keeps_labels(tmp_path, separable):
    path = tmp_path / "sep.csv"
    dataset.save_embeddings(separable, str(path))
    loaded = dataset.load_embeddings(str(path))
    assert_array_equal(loaded.class_labels, separable.class_labels)
    np.testing.assert_allclose(loaded.features, separable.features, rtol=1e-6)


def test_split_sizes_and_partition():
    parts = dataset.split_indices(1000, SplitSpec(fractions=[0.95, 0.05], seed=4))
    assert [len(p) for p in parts] == [950, 50]
    assert_array_equal(np.sort(np.concatenate(parts)), np.arange(1000))


def test_split_remainder_goes_first():
    parts = dataset.split_indices(10, SplitSpec(fractions=[0.7, 0.1, 0.1, 0.1]))
    assert [len(p) for p in parts] == [7, 1, 1, 1]
    parts = dataset.split_indices(11, SplitSpec(fractions=[0.5, 0.5]))
    assert [len(p) for p in parts] == [6, 5]


def test_split_is_seeded(separable):
    a = dataset.split(separable, SplitSpec(fractions=[0.5, 0.5], seed=9))
    b = dataset.split(separable, SplitSpec(fractions=[0.5, 0.5], seed=9))
    assert_array_equal(a[0].features, b[0].features)


def test_degenerate_split():
    with pytest.raises(DegenerateSplitError):
        dataset.split_indices(1, SplitSpec(fractions=[0.5, 0.5]))
    with pytest.raises(DegenerateSplitError):
        dataset.split_indices(5, SplitSpec(fractions=[0.9, 0.1]))


def test_split_spec_validation():
    with pytest.raises(InvalidInputError):
        SplitSpec(fractions=[0.5, 0.6])


def test_halve(separable):
    heldout, val = dataset.halve(separable, seed=1)
    assert heldout.n == val.n == 200


def test_counts_and_concat():
    ds = make_grouped([3, 1, 2, 0])
    assert dataset.group_counts(ds) == {0: 3, 1: 1, 2: 2}
    assert dataset.class_counts(ds) == {0: 4, 1: 2}
    both = dataset.concat([ds, ds])
    assert both.n == 12
    with pytest.raises(InvalidInputError):
        dataset.concat([ds, make_grouped([1, 1, 1, 1], d=3)])


def test_subsample_annotations_keeps_one_row(separable):
    assert dataset.subsample_annotations(separable, 0.0001, seed=0).n == 1
    assert dataset.subsample_annotations(separable, 0.25, seed=0).n == 100


def test_labels_validated_on_construction():
    with pytest.raises(InvalidInputError):
        EmbeddingDataset(np.zeros((2, 2)), np.array([0, 2]), num_classes=2)
    with pytest.raises(InvalidInputError):
        EmbeddingDataset(np.array([[np.inf, 0.0]]), np.array([0]))


def test_ledger_counts_each_row_once():
    ledger = AnnotationLedger(10)
    assert ledger.reveal([1, 2, 3], "class") == 3
    assert ledger.reveal([3, 4], "class") == 1
    dataset.reveal_labels(ledger, np.arange(10), "group")
    assert ledger.totals() == {"class": 4, "group": 10}
    assert AnnotationLedger.merge(ledger, None, AnnotationLedger(5)) == {"class": 4, "group": 10}
    with pytest.raises(InvalidInputError):
        ledger.reveal([10], "class")
