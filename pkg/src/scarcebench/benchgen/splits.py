"""Category filtering, base/novel splitting and per-instance subset tags."""

from __future__ import annotations

import dataclasses
import warnings
from collections import defaultdict
from typing import Iterable, Sequence

from ..datamodel import (
    BASE_THRESHOLD,
    HIERARCHY_DEPTH,
    KINDS,
    MIN_INSTANCES,
    SUPPORT_SHOTS,
    CategoryRecord,
    ObjectInstance,
    keyed_rng,
)
from .raw import RawAnnotationSet

# novel-val share of the novel categories, 0.34 as an exact fraction
NOVEL_VAL_NUM = 17
NOVEL_VAL_DEN = 50


def pad_hierarchy(path: Sequence[str], name: str) -> tuple[str, ...]:
    """Force a coarse-to-fine path to exactly four levels.

    Short paths repeat their deepest label; long ones keep the three
    coarsest levels and the leaf.  An empty path becomes the name itself.
    """
    path = tuple(path) or (name,)
    if len(path) > HIERARCHY_DEPTH:
        return path[: HIERARCHY_DEPTH - 1] + path[-1:]
    return path + (path[-1],) * (HIERARCHY_DEPTH - len(path))


def filter_categories(raw: RawAnnotationSet, min_count: int = MIN_INSTANCES) -> list[CategoryRecord]:
    bad = sorted(c.name for c in raw.categories if c.kind not in KINDS)
    if bad:
        raise ValueError(f"categories with unknown kind: {', '.join(bad)}")
    counts = raw.counts()
    out = []
    for cid, c in enumerate(raw.categories):
        n = counts.get(c.name, 0)
        keep = c.kind == "object" and n >= min_count
        out.append(
            CategoryRecord(
                category_id=cid,
                name=c.name,
                kind=c.kind,
                instance_count=n,
                attributes=tuple(c.attributes),
                hierarchy_path=pad_hierarchy(c.hierarchy, c.name) if c.kind == "object" else tuple(c.hierarchy),
                split=None if keep else "dropped",
            )
        )
    return out


def novel_val_size(n_novel: int) -> int:
    """``round(0.34 * n_novel)`` with halves rounded up; 293 gives 100."""
    return (2 * NOVEL_VAL_NUM * n_novel + NOVEL_VAL_DEN) // (2 * NOVEL_VAL_DEN)


def split_base_novel(categories: Iterable[CategoryRecord], seed: int) -> list[CategoryRecord]:
    """Assign ``base`` / ``novel_val`` / ``novel_test`` to kept categories.

    ``seed`` is the ``novel_split`` purpose seed.
    """
    categories = list(categories)
    kept = [c for c in categories if c.split != "dropped"]
    novel = sorted((c.category_id for c in kept if c.instance_count <= BASE_THRESHOLD))
    if not novel:
        warnings.warn("no category has 15..100 instances; novel sets are empty", stacklevel=2)
    order = keyed_rng(seed).permutation(len(novel))
    n_val = novel_val_size(len(novel))
    val = {novel[i] for i in order[:n_val]}

    out = []
    for c in categories:
        if c.split == "dropped":
            out.append(c)
        elif c.instance_count > BASE_THRESHOLD:
            out.append(dataclasses.replace(c, split="base"))
        else:
            out.append(dataclasses.replace(c, split="novel_val" if c.category_id in val else "novel_test"))
    return out


def assign_subsets(
    categories: Iterable[CategoryRecord],
    instances: Iterable[ObjectInstance],
    base_val_seed: int,
    support_seed: int,
) -> list[ObjectInstance]:
    """Tag every instance ``base_train``/``base_val``/``novel_support``/``novel_query``.

    Each base category holds out ``floor(n / 6)`` uniformly chosen instances;
    each novel category gets exactly five support instances.  Draws are keyed
    by category id, so categories can be processed in any order.
    """
    cats = {c.category_id: c for c in categories}
    instances = list(instances)
    members: dict[int, list[int]] = defaultdict(list)
    for idx, o in enumerate(instances):
        members[o.category_id].append(idx)

    tags: dict[int, tuple[str, int | None]] = {}
    for cid in sorted(members):
        c = cats[cid]
        idxs = sorted(members[cid], key=lambda i: instances[i].instance_id)
        n = len(idxs)
        if c.split == "base":
            held = set(keyed_rng(base_val_seed, cid).choice(n, size=n // 6, replace=False).tolist())
            for k, i in enumerate(idxs):
                tags[i] = ("base_val" if k in held else "base_train", None)
        elif c.split in ("novel_val", "novel_test"):
            if n < SUPPORT_SHOTS + 1:
                raise ValueError(
                    f"novel category {c.category_id} ({c.name}) has {n} instances; "
                    f"needs at least {SUPPORT_SHOTS + 1} for support plus query"
                )
            order = keyed_rng(support_seed, cid).permutation(n)
            rank = {int(k): r for r, k in enumerate(order[:SUPPORT_SHOTS])}
            for k, i in enumerate(idxs):
                if k in rank:
                    tags[i] = ("novel_support", rank[k])
                else:
                    tags[i] = ("novel_query", None)
        else:
            raise ValueError(f"instance of category {cid} with split {c.split!r} cannot be tagged")

    return [
        dataclasses.replace(o, subset=tags[i][0], support_index=tags[i][1]) for i, o in enumerate(instances)
    ]
