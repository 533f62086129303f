import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scarcebench.benchgen.geometry import center_form, enlarge_and_jitter, find_jitter_range, ratio_assign
from scarcebench.datamodel import box_contains, box_in_image


def max_product_oracle(gamma, bound_h, bound_w, n=2001):
    """Grid search for the largest gh*gw <= gamma with 1 <= gh <= bound_h, 1 <= gw <= bound_w."""
    best = 1.0
    for gh in np.linspace(1.0, bound_h, n):
        gw = min(bound_w, gamma / gh)
        if gw >= 1.0:
            best = max(best, gh * gw)
    return best


def test_ratio_assign_ample_room():
    for u in (0.0, 0.3, 0.5, 1.0):
        gh, gw = ratio_assign(1000, 1000, 10, 10, 500, 500, 2.7, u=u)
        assert gh * gw == pytest.approx(2.7, abs=1e-9)
        assert gh >= 1 and gw >= 1


def test_ratio_assign_gamma_one():
    assert ratio_assign(100, 100, 10, 20, 50, 50, 1.0, u=0.7) == (1.0, 1.0)


def test_ratio_assign_full_height():
    # h = H leaves no vertical room
    for w, W in ((10, 100), (60, 100)):
        gh, gw = ratio_assign(50, W, 50, w, 25, 50, 2.7, u=0.8)
        assert gh == 1.0
        assert gw == pytest.approx(min(2.7, W / w), abs=1e-12)


@given(
    H=st.floats(10, 500),
    W=st.floats(10, 500),
    fh=st.floats(0.01, 1.0),
    fw=st.floats(0.01, 1.0),
    gamma=st.floats(1.0, 8.0),
    u=st.floats(0.0, 1.0),
)
def test_ratio_assign_product_matches_feasibility_oracle(H, W, fh, fw, gamma, u):
    h, w = fh * H, fw * W
    gh, gw = ratio_assign(H, W, h, w, H / 2, W / 2, gamma, u=u)
    assert gh >= 1 and gw >= 1
    assert gh * h <= H * (1 + 1e-12) and gw * w <= W * (1 + 1e-12)
    assert gh * gw == pytest.approx(min(gamma, (H / h) * (W / w)), rel=1e-9)


def test_product_rule_equals_grid_oracle():
    cases = [(2.7, 1.5, 1.2), (2.7, 5, 5), (2.7, 1.0, 3.0), (4.0, 1.1, 1.1), (1.3, 2.0, 1.0)]
    for gamma, bh, bw in cases:
        gh, gw = ratio_assign(bh, bw, 1.0, 1.0, bh / 2, bw / 2, gamma, u=0.5)
        assert gh * gw == pytest.approx(max_product_oracle(gamma, bh, bw), rel=1e-6)


def test_jitter_range_example():
    assert find_jitter_range(100, 100, 20, 20, 40, 40, 50, 50) == (-10, 10, -10, 10)


def test_jitter_range_fully_constrained():
    # enlarged box = image: one admissible centre, the image centre
    y_min, y_max, x_min, x_max = find_jitter_range(80, 60, 10, 10, 80, 60, 30, 20)
    assert y_min == y_max == 40 - 30
    assert x_min == x_max == 30 - 20


def test_jitter_range_no_enlargement():
    assert find_jitter_range(100, 100, 20, 30, 20, 30, 40, 40) == (0, 0, 0, 0)


def interval_oracle(H, h, hb, y, n=4001):
    """Brute-force offsets whose box fits in [0, H] and covers [y - h/2, y + h/2]."""
    ok = []
    for m in np.linspace(-H, H, n):
        c = y + m
        if c - hb / 2 >= -1e-9 and c + hb / 2 <= H + 1e-9 and c - hb / 2 <= y - h / 2 + 1e-9 and c + hb / 2 >= y + h / 2 - 1e-9:
            ok.append(m)
    return min(ok), max(ok)


@pytest.mark.parametrize("H,h,hb,y", [(100, 20, 40, 50), (100, 20, 40, 15), (100, 20, 60, 88), (50, 10, 50, 30), (70, 7, 21, 4)])
def test_jitter_range_matches_interval_oracle(H, h, hb, y):
    lo, hi, _, _ = find_jitter_range(H, H, h, h, hb, hb, y, y)
    olo, ohi = interval_oracle(H, h, hb, y)
    step = 2 * H / 4000
    assert lo == pytest.approx(olo, abs=step)
    assert hi == pytest.approx(ohi, abs=step)


def test_gamma_one_returns_tight_box(rng):
    assert enlarge_and_jitter((3, 4, 10, 12), (50, 60), 1.0, rng) == (3.0, 4.0, 10.0, 12.0)


def test_seeded_output_is_reproducible():
    a = enlarge_and_jitter((10, 12, 8, 9), (64, 64), 2.7, np.random.default_rng([7, 1]))
    b = enlarge_and_jitter((10, 12, 8, 9), (64, 64), 2.7, np.random.default_rng([7, 1]))
    assert a == b


def test_rejects_box_outside_image(rng):
    with pytest.raises(ValueError):
        enlarge_and_jitter((50, 0, 20, 10), (40, 60), 2.7, rng)
    with pytest.raises(ValueError):
        enlarge_and_jitter((0, 0, 0, 10), (40, 60), 2.7, rng)


@settings(max_examples=300)
@given(
    H=st.integers(2, 800),
    W=st.integers(2, 800),
    a=st.floats(0, 1),
    b=st.floats(0, 1),
    c=st.floats(0.01, 1),
    d=st.floats(0.01, 1),
    gamma=st.floats(1.0, 6.0),
    seed=st.integers(0, 2**32),
)
def test_containment_and_ratio_property(H, W, a, b, c, d, gamma, seed):
    tw, th = max(c * W, 1e-3), max(d * H, 1e-3)
    tx, ty = a * (W - tw), b * (H - th)
    tight = (tx, ty, tw, th)
    region = enlarge_and_jitter(tight, (H, W), gamma, np.random.default_rng(seed))
    assert box_contains(region, tight)
    assert box_in_image(region, W, H)
    ratio = region[2] * region[3] / (tw * th)
    # unclamped cases give gamma; clamped ones the largest feasible product
    assert ratio == pytest.approx(min(gamma, (H * W) / (th * tw)), rel=1e-9)


def test_center_form_round_trip():
    assert center_form((2, 4, 6, 10)) == (5, 9, 10, 6)


def test_ten_thousand_cases_are_fast():
    rng = np.random.default_rng(0)
    start = time.perf_counter()
    for _ in range(10_000):
        W, H = rng.integers(16, 1000, size=2)
        tw, th = rng.uniform(1, W), rng.uniform(1, H)
        tight = (rng.uniform(0, W - tw), rng.uniform(0, H - th), tw, th)
        region = enlarge_and_jitter(tight, (H, W), 2.7, rng)
        assert box_contains(region, tight) and box_in_image(region, W, H)
    assert time.perf_counter() - start < 10
