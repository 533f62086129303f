"""Context enlargement and random jitter of tight object boxes.

Boxes are real-valued.  The image occupies ``[0, W] x [0, H]`` (closed) and
containment is tested with ``<=``.  Centres are ``(y, x)``; sizes ``(h, w)``.
"""

from __future__ import annotations

import math

import numpy as np

from ..datamodel import Box


def ratio_assign(H, W, h, w, y, x, gamma, u=None, rng=None):
    """Split ``gamma`` into per-axis factors ``(gamma_h, gamma_w)``.

    ``gamma_h = gamma ** u`` with ``u ~ U[0, 1]`` (pass ``u`` to fix it),
    ``gamma_w = gamma / gamma_h``.  A factor exceeding its axis bound
    (``H / h`` or ``W / w``) is clamped to the bound; the slack is moved to
    the other axis only as far as that axis' own bound allows.  Both factors
    stay >= 1 and their product is ``min(gamma, (H * W) / (h * w))``.
    """
    if gamma < 1:
        raise ValueError(f"context ratio must be >= 1, got {gamma}")
    if not (0 < h <= H and 0 < w <= W):
        raise ValueError("tight box must have positive size and fit in the image")
    if u is None:
        u = (rng if rng is not None else np.random.default_rng()).uniform(0.0, 1.0)
    bound_h = H / h
    bound_w = W / w
    gamma_h = min(gamma**u, bound_h)
    gamma_w = gamma / gamma_h
    if gamma_w > bound_w:
        gamma_w = bound_w
        gamma_h = min(gamma / gamma_w, bound_h)
    return max(gamma_h, 1.0), max(gamma_w, 1.0)


def find_jitter_range(H, W, h, w, h_big, w_big, y, x):
    """Offsets ``(y_min, y_max, x_min, x_max)`` for the enlarged box centre.

    Any centre ``(y + m_y, x + m_x)`` with offsets in range keeps the
    ``h_big x w_big`` box inside the image and around the tight box.
    """
    y_min = max(h_big / 2 - y, (h - h_big) / 2)
    y_max = min(H - h_big / 2 - y, (h_big - h) / 2)
    x_min = max(w_big / 2 - x, (w - w_big) / 2)
    x_max = min(W - w_big / 2 - x, (w_big - w) / 2)
    # float noise only; the interval is non-empty whenever the big box fits
    assert y_min <= y_max + 1e-9 * max(H, 1.0) and x_min <= x_max + 1e-9 * max(W, 1.0), (
        "enlarged box cannot both fit the image and contain the tight box"
    )
    return y_min, max(y_min, y_max), x_min, max(x_min, x_max)


def _place(start: float, size: float, lo_inner: float, hi_inner: float, extent: float) -> float:
    """Snap a 1-D interval start so that the closed checks hold in float.

    Requirements: ``start <= lo_inner``, ``start + size >= hi_inner``,
    ``start >= 0`` and ``start + size <= extent``.
    """
    lo = max(0.0, hi_inner - size)
    hi = min(lo_inner, extent - size)
    start = min(max(start, lo), hi)
    for _ in range(64):
        ok_low = start >= 0 and start <= lo_inner
        ok_high = start + size <= extent and start + size >= hi_inner
        if ok_low and ok_high:
            return start
        if start + size > extent or start > lo_inner:
            start = math.nextafter(start, -math.inf)
        else:
            start = math.nextafter(start, math.inf)
    raise AssertionError("could not place interval")


def enlarge_and_jitter(tight_box: Box, image_size: tuple[int, int], gamma: float, rng) -> Box:
    """Enlarged, jittered region box for ``tight_box`` (both ``(x, y, w, h)``).

    ``image_size`` is ``(H, W)``.  With ``gamma == 1`` the tight box is
    returned unchanged.
    """
    H, W = (float(v) for v in image_size)
    tx, ty, tw, th = (float(v) for v in tight_box)
    if tw <= 0 or th <= 0:
        raise ValueError(f"degenerate tight box {tight_box}")
    if tx < 0 or ty < 0 or tx + tw > W or ty + th > H:
        raise ValueError(f"tight box {tight_box} outside image {W}x{H}")
    if gamma == 1:
        return (tx, ty, tw, th)

    cy, cx = ty + th / 2, tx + tw / 2
    gamma_h, gamma_w = ratio_assign(H, W, th, tw, cy, cx, gamma, rng=rng)
    h_big = min(th * gamma_h, H)
    w_big = min(tw * gamma_w, W)
    y_min, y_max, x_min, x_max = find_jitter_range(H, W, th, tw, h_big, w_big, cy, cx)
    m_x = rng.uniform(x_min, x_max) if x_max > x_min else x_min
    m_y = rng.uniform(y_min, y_max) if y_max > y_min else y_min
    new_cy, new_cx = cy + m_y, cx + m_x

    x0 = _place(new_cx - w_big / 2, w_big, tx, tx + tw, W)
    y0 = _place(new_cy - h_big / 2, h_big, ty, ty + th, H)
    return (x0, y0, w_big, h_big)


def center_form(box: Box) -> tuple[float, float, float, float]:
    """``(x, y, w, h)`` top-left box as ``(x_c, y_c, h, w)``."""
    x, y, w, h = box
    return (x + w / 2, y + h / 2, h, w)
