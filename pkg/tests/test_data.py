import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from loradrop.data import (
    FAMILIES,
    DatasetFormatError,
    InfeasibleTaskError,
    TaskSpec,
    check_compatible,
    generate,
    generic_specs,
    label_of,
    load_dataset,
    save_dataset,
)


def small(family="token-count", **kw):
    return TaskSpec(family=family, train_size=200, dev_size=50, **kw)


def test_token_count_all_same_token():
    spec = TaskSpec(num_classes=4)
    assert label_of([3] * 16, spec) == 3 % 4
    assert label_of([6] * 16, spec) == 6 % 4


def test_pairwise_order_marker_rule():
    spec = TaskSpec(family="pairwise-order", num_classes=2, seq_len=6)
    assert label_of([5, 0, 7, 1, 9, 9], spec) == 0
    assert label_of([5, 1, 7, 0, 9, 9], spec) == 1


def test_nested_depth_rule():
    spec = TaskSpec(family="nested-dependency", num_classes=4)
    assert label_of([0, 1, 5, 0, 0, 1, 1], spec) == 1
    assert label_of([0, 0, 0, 1, 1, 1], spec) == 2
    with pytest.raises(ValueError, match="unbalanced"):
        label_of([0, 0, 1], spec)


@pytest.mark.parametrize("family", FAMILIES)
def test_labels_recomputable_and_splits_disjoint(family):
    train, dev = generate(small(family))
    spec = train.spec
    for ex in list(train) + list(dev):
        assert label_of(ex.tokens, spec) == ex.label
    assert not {t.tobytes() for t in train.tokens} & {t.tobytes() for t in dev.tokens}
    assert not set(train.ids) & set(dev.ids)


@pytest.mark.parametrize("family", FAMILIES)
def test_generation_is_deterministic(family):
    assert generate(small(family)) == generate(small(family))
    a, _ = generate(small(family))
    b, _ = generate(small(family, seed=1))
    assert a != b


def test_variant_relabels_vocabulary_but_keeps_rule():
    train, _ = generate(small("pairwise-order", variant=1))
    for ex in train:
        assert label_of(ex.tokens, train.spec) == ex.label
    base, _ = generate(small("pairwise-order"))
    assert not np.array_equal(train.tokens, base.tokens)


def test_balance_within_tolerance_on_10k():
    train, _ = generate(TaskSpec(train_size=10_000, dev_size=10))
    freq = np.bincount(train.labels, minlength=4) / len(train)
    assert ((freq >= 0.20) & (freq <= 0.30)).all()


def test_requested_skewed_balance():
    train, _ = generate(small(balance=(0.7, 0.1, 0.1, 0.1)))
    freq = np.bincount(train.labels, minlength=4) / len(train)
    np.testing.assert_allclose(freq, [0.7, 0.1, 0.1, 0.1], atol=0.05)


@pytest.mark.parametrize(
    "spec",
    [
        TaskSpec(family="pairwise-order", num_classes=3),
        TaskSpec(family="nested-dependency", num_classes=9),
        TaskSpec(family="token-count", vocab_size=3, num_classes=4),
        TaskSpec(family="sentiment"),
        TaskSpec(balance=(1.0, 1.0)),
    ],
)
def test_infeasible_specs(spec):
    with pytest.raises(InfeasibleTaskError):
        generate(spec)


def test_generic_specs_cover_every_family():
    specs = generic_specs(TaskSpec())
    assert [s.family for s in specs] == list(FAMILIES)
    assert all(s.variant == 1 for s in specs)


def test_save_load_round_trip(tmp_path):
    train, _ = generate(small("nested-dependency"))
    path = tmp_path / "d.jsonl"
    save_dataset(train, path)
    back = load_dataset(path)
    assert back == train
    assert list(back) == list(train)
    header = json.loads(path.read_text().splitlines()[0])
    assert header["spec"]["family"] == "nested-dependency"


def test_load_truncated_file(tmp_path):
    train, _ = generate(small())
    path = tmp_path / "d.jsonl"
    save_dataset(train, path)
    lines = path.read_text().splitlines()
    path.write_text("\n".join(lines[:10]) + "\n")
    with pytest.raises(DatasetFormatError, match="expected"):
        load_dataset(path)
    path.write_text(lines[0] + "\n" + lines[1][:7])
    with pytest.raises(DatasetFormatError, match="malformed"):
        load_dataset(path)


def test_load_wrong_version(tmp_path):
    train, _ = generate(small())
    path = tmp_path / "d.jsonl"
    save_dataset(train, path)
    lines = path.read_text().splitlines()
    header = json.loads(lines[0])
    header["version"] = 99
    path.write_text("\n".join([json.dumps(header)] + lines[1:]))
    with pytest.raises(DatasetFormatError, match="version"):
        load_dataset(path)


def test_vocabulary_compatibility():
    train, _ = generate(small())
    check_compatible(train, 16, 16, 4)
    with pytest.raises(ValueError, match="vocabulary"):
        check_compatible(train, 8, 16, 4)
    with pytest.raises(ValueError, match="exceed 8"):
        check_compatible(train, 16, 8, 4)


def test_subset_concat():
    train, _ = generate(small())
    a, b = train.subset(range(0, 10)), train.subset(range(10, 20))
    assert a.concat(b) == train.subset(range(20))


@settings(max_examples=25, deadline=None)
@given(
    family=st.sampled_from(FAMILIES),
    seed=st.integers(0, 10_000),
    variant=st.integers(0, 3),
    num_classes=st.sampled_from([2, 4]),
)
def test_label_self_consistency_property(family, seed, variant, num_classes):
    spec = TaskSpec(family=family, seed=seed, variant=variant, num_classes=num_classes, train_size=40, dev_size=10)
    train, dev = generate(spec)
    assert len(train) == 40 and len(dev) == 10
    for ex in list(train) + list(dev):
        assert label_of(ex.tokens, spec) == ex.label
        assert max(ex.tokens) < spec.vocab_size
