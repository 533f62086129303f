import dataclasses
from collections import Counter

import pytest

from scarcebench.benchgen import build_manifest
from scarcebench.benchgen.synthetic import synthetic_raw, zipf_counts
from scarcebench.datamodel import manifest_hash, serialize
from scarcebench.regimes import (
    base_training_images,
    instance_portion_report,
    portion_csv,
    scarce_class,
    scarce_class_adjust,
    scarce_image,
    subsample_supervision,
    training_instance_count,
)

BASE_COUNTS = [400, 300, 250, 200, 180, 150, 120, 110]


@pytest.fixture(scope="module")
def full():
    raw = synthetic_raw(BASE_COUNTS + [40, 30, 20, 16], image_size=(32, 64), objects_per_image=4, seed=9)
    return build_manifest(raw, global_seed=2)


def train_counts(m):
    return Counter(o.category_id for o in m.instances if o.subset == "base_train")


def test_scarce_class_removes_smallest(full):
    m = scarce_class(full, 0.75)
    base = full.categories_in("base")
    # sort-and-drop oracle
    smallest = sorted(base, key=lambda c: c.instance_count)[: int(0.25 * len(base))]
    assert len(m.categories_in("base")) == 6
    assert {c.category_id for c in smallest}.isdisjoint(c.category_id for c in m.categories)
    assert m.regime.op == "scarce_class" and m.regime.base_hash == manifest_hash(full)
    assert len(m.instances_in("novel_query")) == len(full.instances_in("novel_query"))


def test_keep_one_is_identity_except_provenance(full):
    for m in (scarce_class(full, 1.0), scarce_image(full, 1.0, seed=0), scarce_class_adjust(full, 1.0, seed=0),
              subsample_supervision(full, "attribute", 1.0, seed=0)):
        assert m.instances == full.instances
        assert m.images == full.images
        assert not m.is_full


@pytest.mark.parametrize("ratio", [0.0, -0.1, 1.5, "abc"])
def test_bad_ratios(full, ratio):
    with pytest.raises(ValueError):
        scarce_class(full, ratio)
    with pytest.raises(ValueError):
        scarce_image(full, ratio, seed=0)


def test_scarce_image_four_images(full):
    keep_images = base_training_images(full)[:4]
    ids = {o.instance_id for o in full.instances if o.subset != "base_train" or o.image_id in keep_images}
    small = full.replace(
        instances=tuple(o for o in full.instances if o.instance_id in ids),
        images=tuple(dataclasses.replace(im, instance_ids=tuple(i for i in im.instance_ids if i in ids)) for im in full.images),
    )
    m = scarce_image(small, 0.5, seed=3)
    assert len(base_training_images(m)) == 2


def test_scarce_image_drops_whole_images(full):
    m = scarce_image(full, 0.25, seed=1)
    n = len(base_training_images(full))
    assert len(base_training_images(m)) == round(0.25 * n)
    kept = set(base_training_images(m))
    # every base_train instance of a surviving image survives
    survivors = {o.instance_id for o in m.instances}
    for o in full.instances:
        if o.subset == "base_train" and o.image_id in kept:
            assert o.instance_id in survivors
    assert m.instances_in("base_val") == full.instances_in("base_val")


def test_adjust_matches_scarce_image_total(full):
    for ratio in (0.25, 0.5, 0.75):
        adj = scarce_class_adjust(full, ratio, seed=5)
        si = scarce_image(full, ratio, seed=5)
        assert training_instance_count(adj) == training_instance_count(si)
        sc = scarce_class(full, ratio)
        assert {c.category_id for c in adj.categories} == {c.category_id for c in sc.categories}
        rate = training_instance_count(si) / training_instance_count(sc)
        before, after = train_counts(sc), train_counts(adj)
        for cid, n in before.items():
            assert abs(after[cid] - rate * n) <= 2


def test_supervision_fraction(full):
    ids = sorted(o.instance_id for o in full.instances if o.subset == "base_train")[:1000]
    keep = set(ids) | {o.instance_id for o in full.instances if o.subset != "base_train"}
    sub = full.replace(
        instances=tuple(o for o in full.instances if o.instance_id in keep),
        images=tuple(dataclasses.replace(im, instance_ids=tuple(i for i in im.instance_ids if i in keep)) for im in full.images),
    )
    m = subsample_supervision(sub, "attribute", 0.25, seed=1)
    train = [o for o in m.instances if o.subset == "base_train"]
    assert len(train) == 1000
    assert sum("attribute" not in o.masked_heads for o in train) == 250
    zero = subsample_supervision(sub, "attribute", 0.0, seed=1)
    assert all("attribute" in o.masked_heads for o in zero.instances if o.subset == "base_train")


def test_supervision_image_head(full):
    m = subsample_supervision(full, "scene", 0.5, seed=1)
    units = base_training_images(full)
    masked = [im for im in m.images if "scene" in im.masked_heads]
    assert len(masked) == len(units) - round(0.5 * len(units))
    with pytest.raises(ValueError):
        subsample_supervision(full, "cls", 0.5, seed=1)


def test_regimes_need_full_manifest(full):
    derived = scarce_class(full, 0.5)
    for op in (lambda: scarce_class(derived, 0.5), lambda: scarce_image(derived, 0.5, 0),
               lambda: scarce_class_adjust(derived, 0.5, 0), lambda: subsample_supervision(derived, "part", 0.5, 0)):
        with pytest.raises(ValueError, match="full manifest"):
            op()


def test_regimes_are_deterministic(full):
    assert serialize(scarce_image(full, 0.5, seed=4)) == serialize(scarce_image(full, 0.5, seed=4))
    assert serialize(scarce_class_adjust(full, 0.5, seed=4)) == serialize(scarce_class_adjust(full, 0.5, seed=4))


def test_portion_report(full):
    rows = instance_portion_report([full, scarce_image(full, 0.5, seed=0)], full)
    assert rows[0]["portion_pct"] == 100.0
    n = training_instance_count(full)
    expected = round(100 * training_instance_count(scarce_image(full, 0.5, seed=0)) / n, 2)
    assert rows[1]["portion_pct"] == expected
    text = portion_csv(rows, ["command: x"])
    assert text.splitlines()[:2] == ["# command: x", "regime,ratio,instances,portion_pct"]
    with pytest.raises(ValueError):
        instance_portion_report([full], None)


def test_zipf_head_dominates():
    counts = zipf_counts(40, 1.0, 12000)
    raw = synthetic_raw(counts, image_size=(32, 64), objects_per_image=4, seed=4)
    full = build_manifest(raw, global_seed=1)
    (row,) = instance_portion_report([scarce_class(full, 0.25)], full)
    assert row["portion_pct"] > 25.0
