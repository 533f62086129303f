import math

import numpy as np
import pytest
import torch

from scarcebench.backbone import FeatureMap, RegionFeature
from scarcebench.heads import (
    IGNORE,
    PATCH_NEIGHBORS,
    BoxHead,
    ClsHead,
    FCNHead,
    HierarchyHead,
    MaskHead,
    MultiLabelHead,
    PatchLocationHead,
    RotationHead,
    SceneHead,
    StuffHead,
    bbox_loss,
    bbox_targets,
    cls_loss,
    grid_cell,
    hierarchy_loss,
    masked_bce,
    masked_ce,
    multilabel_loss,
    patch_location_edit,
    rotation_edit,
    seg_region_loss,
)

D64 = torch.float64


def log_softmax_ce(z, y):
    m = max(z)
    return -(z[y] - m - math.log(sum(math.exp(v - m) for v in z)))


def bce(z, t):
    p = 1 / (1 + math.exp(-z))
    return -(t * math.log(p) + (1 - t) * math.log(1 - p))


# trivial values ------------------------------------------------------------

def test_cls_trivial():
    assert cls_loss(torch.zeros(1, 7, dtype=D64), torch.tensor([3])).item() == pytest.approx(math.log(7), abs=1e-12)
    logits = torch.zeros(1, 5, dtype=D64)
    logits[0, 2] = 1e6
    assert cls_loss(logits, torch.tensor([2])).item() == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ValueError):
        cls_loss(torch.zeros(1, 5), torch.tensor([5]))


def test_multilabel_trivial():
    A = 9
    t = torch.randint(0, 2, (1, A))
    assert multilabel_loss(torch.zeros(1, A, dtype=D64), t).item() == pytest.approx(A * math.log(2), abs=1e-12)
    avail = torch.tensor([True, False])
    logits = torch.randn(2, A, dtype=D64)
    t2 = torch.randint(0, 2, (2, A))
    assert multilabel_loss(logits, t2, avail).item() == pytest.approx(multilabel_loss(logits[:1], t2[:1]).item(), abs=1e-12)
    assert multilabel_loss(logits, t2, torch.tensor([False, False])).item() == 0.0


def test_hierarchy_trivial():
    sizes = (2, 3, 5, 11)
    logits = [torch.zeros(1, k, dtype=D64) for k in sizes]
    assert hierarchy_loss(logits, torch.tensor([[1, 2, 4, 10]])).item() == pytest.approx(sum(map(math.log, sizes)), abs=1e-12)
    hot = [torch.nn.functional.one_hot(torch.tensor([k - 1]), k).to(D64) * 1e6 for k in sizes]
    assert hierarchy_loss(hot, torch.tensor([[k - 1 for k in sizes]])).item() == pytest.approx(0.0, abs=1e-9)
    with pytest.raises(ValueError, match="level 2"):
        hierarchy_loss(logits, torch.tensor([[0, 0, 5, 0]]))
    with pytest.raises(ValueError):
        hierarchy_loss(logits, torch.tensor([[0, 0, 0]]))


def test_bbox_trivial():
    box = torch.tensor([[3.0, 4.0, 10.0, 6.0]], dtype=D64)
    assert torch.equal(bbox_targets(box, box), torch.zeros(1, 4, dtype=D64))
    assert bbox_loss(torch.zeros(1, 4, dtype=D64), box, box).item() == 0.0
    tight = torch.tensor([[10.0, 20.0, 8.0, 6.0]], dtype=D64)
    region = torch.tensor([[6.0, 17.0, 16.0, 12.0]], dtype=D64)  # twice the size, same centre
    t = bbox_targets(region, tight)[0]
    assert t[:2].abs().max().item() < 1e-15
    assert t[2].item() == pytest.approx(-math.log(2), abs=1e-15)
    assert t[3].item() == pytest.approx(-math.log(2), abs=1e-15)
    with pytest.raises(ValueError):
        bbox_targets(region, torch.tensor([[0.0, 0.0, 0.0, 1.0]], dtype=D64))


def test_seg_region_trivial():
    M = 14
    target = torch.ones(1, M, M)
    assert seg_region_loss(torch.full((1, M, M), 50.0, dtype=D64), target).item() < 1e-15 * M * M + 1e-18
    assert seg_region_loss(torch.zeros(1, M, M, dtype=D64), torch.randint(0, 2, (1, M, M))).item() == pytest.approx(M * M * math.log(2), abs=1e-10)


def test_fcn_trivial():
    labels = torch.full((3, 4), IGNORE)
    loss, flag = masked_ce(torch.randn(6, 3, 4, dtype=D64), labels)
    assert flag and loss.item() == 0.0
    labels[1, 2] = 3
    loss, flag = masked_ce(torch.zeros(6, 3, 4, dtype=D64), labels)
    assert not flag and loss.item() == pytest.approx(math.log(6), abs=1e-12)


def test_stuff_trivial():
    plain = StuffHead(4).double()
    loss, flag = plain.loss_one(torch.randn(1, 3, 3, dtype=D64), torch.full((3, 3), IGNORE))
    assert flag and loss.item() == 0.0
    comb = StuffHead(4, n_object_classes=3, n_stuff_classes=2, combined=True).double()
    logits = torch.randn(5, 4, 4, dtype=D64)
    labels = torch.randint(3, 5, (4, 4))  # background (stuff) classes only
    weighted, _ = comb.loss_one(logits, labels)
    unweighted, _ = masked_ce(logits, labels)
    assert weighted.item() == pytest.approx(0.1 * unweighted.item(), rel=1e-12)


def test_scene_trivial():
    head = SceneHead(3, 6).double()
    torch.nn.init.zeros_(head.fc.weight)
    torch.nn.init.zeros_(head.fc.bias)
    fm = FeatureMap(torch.randn(2, 3, 4, 4, dtype=D64), 8)
    assert head.loss(fm, torch.tensor([1, 4])).item() == pytest.approx(2 * math.log(6), abs=1e-12)
    assert head.loss(fm, torch.tensor([IGNORE, IGNORE])).item() == 0.0


def test_self_supervision_trivial():
    rot = RotationHead(3).double()
    patch = PatchLocationHead(3).double()
    for h in (rot, patch):
        torch.nn.init.zeros_(h.fc.weight)
        torch.nn.init.zeros_(h.fc.bias)
    fm = FeatureMap(torch.randn(1, 3, 2, 2, dtype=D64), 8)
    assert rot.loss(fm, torch.tensor([2])).item() == pytest.approx(math.log(4), abs=1e-12)
    assert patch.loss(fm, fm, torch.tensor([5])).item() == pytest.approx(math.log(8), abs=1e-12)


# scalar oracles --------------------------------------------------------------

def test_oracles_random():
    rng = np.random.default_rng(0)
    for _ in range(20):
        n, k = rng.integers(1, 5), rng.integers(2, 7)
        z = rng.normal(size=(n, k))
        y = rng.integers(0, k, n)
        ref = sum(log_softmax_ce(list(z[i]), y[i]) for i in range(n))
        assert abs(cls_loss(torch.tensor(z), torch.tensor(y)).item() - ref) < 1e-9

        a = rng.normal(size=(n, 6))
        t = rng.integers(0, 2, (n, 6))
        ref = sum(bce(a[i, j], t[i, j]) for i in range(n) for j in range(6))
        assert abs(multilabel_loss(torch.tensor(a), torch.tensor(t)).item() - ref) < 1e-9

        sizes = [2, 3, 4, 5]
        levels = [rng.normal(size=(n, s)) for s in sizes]
        lab = np.stack([rng.integers(0, s, n) for s in sizes], axis=1)
        ref = sum(log_softmax_ce(list(levels[l][i]), lab[i, l]) for l in range(4) for i in range(n))
        got = hierarchy_loss([torch.tensor(v) for v in levels], torch.tensor(lab)).item()
        assert abs(got - ref) < 1e-9

    # 4x4 mask case
    m = rng.normal(size=(1, 4, 4))
    t = rng.integers(0, 2, (1, 4, 4))
    ref = sum(bce(m[0, i, j], t[0, i, j]) for i in range(4) for j in range(4))
    assert abs(seg_region_loss(torch.tensor(m), torch.tensor(t)).item() - ref) < 1e-9


def test_masked_ce_and_weighted_oracles():
    rng = np.random.default_rng(1)
    for _ in range(10):
        K = 5
        z = rng.normal(size=(K, 3, 4))
        lab = rng.integers(-1, K, (3, 4))
        w = np.array([1, 1, 1, 0.1, 0.1])
        cells = [(i, j) for i in range(3) for j in range(4) if lab[i, j] != IGNORE]
        if not cells:
            continue
        ref = sum(log_softmax_ce(list(z[:, i, j]), lab[i, j]) for i, j in cells) / len(cells)
        refw = sum(w[lab[i, j]] * log_softmax_ce(list(z[:, i, j]), lab[i, j]) for i, j in cells) / len(cells)
        assert abs(masked_ce(torch.tensor(z), torch.tensor(lab))[0].item() - ref) < 1e-9
        assert abs(masked_ce(torch.tensor(z), torch.tensor(lab), torch.tensor(w))[0].item() - refw) < 1e-9
        b = rng.normal(size=(3, 4))
        bl = rng.integers(-1, 2, (3, 4))
        cells = [(i, j) for i in range(3) for j in range(4) if bl[i, j] != IGNORE]
        if cells:
            ref = sum(bce(b[i, j], bl[i, j]) for i, j in cells) / len(cells)
            assert abs(masked_bce(torch.tensor(b), torch.tensor(bl))[0].item() - ref) < 1e-9


# edits -------------------------------------------------------------------------

def test_rotation_group():
    img = torch.rand(3, 12, 16)
    assert torch.equal(rotation_edit(img, 0)[0], img[:, :, 2:14])
    once, _ = rotation_edit(img, 1)
    twice, _ = rotation_edit(once, 1)
    assert torch.equal(twice, rotation_edit(img, 2)[0])
    with pytest.raises(ValueError):
        rotation_edit(img, 4)


def test_patch_table():
    img = torch.arange(3 * 27 * 27, dtype=torch.float32).reshape(3, 27, 27)
    table = {}
    for grid_index in PATCH_NEIGHBORS:
        center, nb, label = patch_location_edit(img, np.random.default_rng(0), neighbor=grid_index)
        table[grid_index] = label
        assert torch.equal(center, img[:, 9:18, 9:18])
        assert torch.equal(nb, grid_cell(img, grid_index))
    assert table == {0: 0, 1: 1, 2: 2, 3: 3, 5: 4, 6: 5, 7: 6, 8: 7}
    rng = np.random.default_rng(3)
    assert {patch_location_edit(img, rng)[2] for _ in range(200)} == set(range(8))
    with pytest.raises(ValueError):
        patch_location_edit(torch.rand(3, 20, 20), rng)


# type enforcement ----------------------------------------------------------------

def test_heads_enforce_input_type():
    rf = RegionFeature(torch.rand(2, 8))
    fm = FeatureMap(torch.rand(2, 8, 3, 3), 8)
    for head in (ClsHead(8, 3), MultiLabelHead(8, 4), HierarchyHead(8, [2, 2, 2, 2]), BoxHead(8)):
        head(rf)
        with pytest.raises(TypeError):
            head(fm)
    for head in (SceneHead(8, 3), RotationHead(8), FCNHead(8, 4), StuffHead(8)):
        head(fm)
        with pytest.raises(TypeError):
            head(rf)
    with pytest.raises(TypeError):
        MaskHead(8)(fm)


# finite differences ----------------------------------------------------------------

def central_diff(f, x, step=1e-5):
    g = torch.zeros_like(x)
    flat = x.view(-1)
    for i in range(flat.numel()):
        old = flat[i].item()
        flat[i] = old + step
        hi = f(x).item()
        flat[i] = old - step
        lo = f(x).item()
        flat[i] = old
        g.view(-1)[i] = (hi - lo) / (2 * step)
    return g


def check_grad(f, x):
    x = x.clone().requires_grad_(True)
    (g,) = torch.autograd.grad(f(x), x)
    with torch.no_grad():
        num = central_diff(f, x.detach().clone())
    rel = (g - num).norm() / max(num.norm().item(), 1e-12)
    assert rel < 1e-4, rel


def _cases():
    return range(20)


@pytest.mark.parametrize("case", _cases())
def test_object_head_gradients(case):
    torch.manual_seed(case)
    n, d = 3, 5
    x = torch.randn(n, d, dtype=D64)
    cls = ClsHead(d, 4).double()
    y = torch.randint(0, 4, (n,))
    check_grad(lambda v: cls.loss(RegionFeature(v), y), x)
    attr = MultiLabelHead(d, 6).double()
    t = torch.randint(0, 2, (n, 6))
    check_grad(lambda v: attr.loss(RegionFeature(v), t), x)
    hier = HierarchyHead(d, [2, 3, 4, 5]).double()
    lab = torch.stack([torch.randint(0, k, (n,)) for k in (2, 3, 4, 5)], 1)
    check_grad(lambda v: hier.loss(RegionFeature(v), lab), x)
    box = BoxHead(d).double()
    region = torch.tensor([[0.0, 0.0, 20.0, 16.0]] * n, dtype=D64)
    tight = region.clone()
    tight[:, 2:] = torch.rand(n, 2, dtype=D64) * 10 + 4
    check_grad(lambda v: box.loss(RegionFeature(v), region, tight), x)
    mask = MaskHead(3, hidden=4).double()
    crops = torch.randn(n, 3, 4, 4, dtype=D64)
    mt = torch.randint(0, 2, (n, 4, 4))
    check_grad(lambda v: mask.loss(RegionFeature(x, mask_crops=v), mt), crops)


@pytest.mark.parametrize("case", _cases())
def test_image_head_gradients(case):
    torch.manual_seed(100 + case)
    fmap = torch.randn(2, 3, 4, 4, dtype=D64)
    scene = SceneHead(3, 5).double()
    check_grad(lambda v: scene.loss(FeatureMap(v, 8), torch.tensor([0, 3])), fmap)
    fcn = FCNHead(3, 4).double()
    lab = torch.randint(-1, 4, (4, 4))
    lab[0, 0] = 1
    check_grad(lambda v: fcn.loss_one(fcn(FeatureMap(v, 8))[0], lab)[0], fmap)
    stuff = StuffHead(3, 2, 3, combined=True).double()
    slab = torch.randint(0, 5, (4, 4))
    check_grad(lambda v: stuff.loss_one(stuff(FeatureMap(v, 8))[1], slab)[0], fmap)
    rot = RotationHead(3).double()
    check_grad(lambda v: rot.loss(FeatureMap(v, 8), torch.tensor([1, 3])), fmap)
    patch = PatchLocationHead(3).double()
    check_grad(lambda v: patch.loss(FeatureMap(v, 8), FeatureMap(v.flip(0), 8), torch.tensor([2, 7])), fmap)
