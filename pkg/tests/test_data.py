import numpy as np
import pytest
import torch

from scarcebench.data import (
    RegionDataset,
    Vocabulary,
    cell_coverage,
    collate,
    feature_grid_edges,
    iter_batches,
    majority_raster,
    region_mask_target,
)
from scarcebench.heads import IGNORE

SUB = 4  # sub-pixel supersampling factor for the coverage oracle


def coverage_oracle(mask, ye, xe):
    """Count sub-pixel centres inside each cell; exact when edges are multiples of 1/SUB."""
    fine = np.kron(mask.astype(float), np.ones((SUB, SUB))) / SUB**2
    cy = (np.arange(fine.shape[0]) + 0.5) / SUB
    cx = (np.arange(fine.shape[1]) + 0.5) / SUB
    out = np.zeros((len(ye) - 1, len(xe) - 1))
    for i in range(len(ye) - 1):
        rows = (cy >= ye[i]) & (cy < ye[i + 1])
        for j in range(len(xe) - 1):
            cols = (cx >= xe[j]) & (cx < xe[j + 1])
            out[i, j] = fine[np.ix_(rows, cols)].sum()
    return out


def test_cell_coverage_matches_supersampling(rng):
    for _ in range(20):
        mask = rng.random((13, 17)) < 0.4
        ye = np.sort(rng.integers(0, 13 * SUB + 1, 5)) / SUB
        xe = np.sort(rng.integers(0, 17 * SUB + 1, 6)) / SUB
        assert np.allclose(cell_coverage(mask, ye, xe), coverage_oracle(mask, ye, xe), atol=1e-12)


def test_region_mask_target(rng):
    mask = np.zeros((20, 20), bool)
    mask[4:12, 6:14] = True
    full = region_mask_target(mask, (6, 4, 8, 8), 4)
    assert full.shape == (4, 4) and full.all()
    half = region_mask_target(mask, (6, 4, 16, 8), 4)
    assert half[:, :2].all() and not half[:, 2:].any()
    for _ in range(10):
        m = rng.random((16, 16)) < 0.5
        box = (2.0, 1.0, 12.0, 14.0)
        ye = box[1] + box[3] * np.arange(5) / 4
        xe = box[0] + box[2] * np.arange(5) / 4
        ref = coverage_oracle(m, ye, xe) >= 0.5 * 3.0 * 3.5
        assert np.array_equal(region_mask_target(m, box, 4).astype(bool), ref)
    with pytest.raises(ValueError):
        region_mask_target(mask, (1, 1, 0, 5), 4)


def test_majority_raster():
    a = np.zeros((16, 16), bool)
    a[:, :8] = True
    b = np.zeros((16, 16), bool)
    b[:4, 8:] = True
    edges = np.array([0.0, 8.0, 16.0])
    out = majority_raster({3: a, 5: b}, edges, edges)
    # b covers exactly half of the top-right cell; the bottom-right cell is empty
    assert out.tolist() == [[3, 5], [3, IGNORE]]
    assert (majority_raster({}, edges, edges) == IGNORE).all()


def test_feature_grid_edges():
    # 30 px resized to 60: stride-8 cells of 8 resized px are 4 original px wide, last one clipped
    assert feature_grid_edges(30, 60, 8).tolist() == [0, 4, 8, 12, 16, 20, 24, 28, 30]


def test_dataset_on_toy(toy_data):
    manifest, root = toy_data
    ds = RegionDataset(manifest, root, short_edge=64)
    vocab = Vocabulary.from_manifest(manifest)
    assert vocab.n_classes == 3
    s = ds[0]
    assert s.image.shape == (3, 64, 64)
    assert s.fcn.shape == s.stuff.shape == (8, 8)
    assert s.masks.shape == (len(s.instance_ids), 14, 14)
    assert bool(s.mask_ok.all())
    # boxes scale with the resize factor of 2
    inst = {o.instance_id: o for o in manifest.instances}
    first = inst[s.instance_ids[0]]
    assert s.regions[0].tolist() == pytest.approx([2 * v for v in first.region_box])
    assert set(np.unique(s.stuff.numpy())) <= {IGNORE, 0, 1}
    assert all(o.subset == "base_train" for o in (inst[i] for i in s.instance_ids))


def test_query_dataset_uses_category_ids(toy_data):
    manifest, root = toy_data
    ds = RegionDataset(manifest, root, short_edge=32, subsets=("novel_query",), targets=False)
    novel = {c.category_id for c in manifest.categories_in("novel_val", "novel_test")}
    labels = torch.cat([ds[i].labels for i in range(len(ds))])
    assert set(labels.tolist()) <= novel


def test_batches_keep_order(toy_data):
    manifest, root = toy_data
    ds = RegionDataset(manifest, root, short_edge=32)
    order = list(range(len(ds)))[::-1][:10]
    seq = [b.samples[0].image_id for b in iter_batches(ds, order, 3)]
    par = [b.samples[0].image_id for b in iter_batches(ds, order, 3, workers=2)]
    assert seq == par
    batch = collate([ds[0], ds[1]])
    assert batch.boxes.shape[1] == 5
    assert batch.boxes[:, 0].tolist() == [0.0] * len(ds[0].regions) + [1.0] * len(ds[1].regions)
