"""Frozen-feature k-shot evaluation on novel classes.

Evaluation is full-way: every query is scored against all novel classes of
its split.  Top-k ties are broken by class id ascending (classes are
columns in id order and ranks come from a stable sort).

Stopping rule for the fitted classifiers: full-batch L-BFGS until the
projected gradient norm drops below 1e-6 or 1000 iterations, with an L2
penalty of 1e-4 on the linear weights.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.optimize import minimize
from scipy.special import log_softmax

from .backbone import parameter_hash
from .data import RegionDataset, iter_batches
from .datamodel import BenchmarkManifest

CLASSIFIERS = ("linear", "cosine", "proto")
L2_PENALTY = 1e-4
GTOL = 1e-6
MAX_ITER = 1000
COSINE_SCALE = 10.0
REPORT_COLUMNS = (
    "regime",
    "split",
    "k_shot",
    "way",
    "classifier",
    "top1",
    "top5",
    "seed",
    "support_id",
    "n_query",
    "model_hash",
    "flags",
)


@dataclass
class FeatureTable:
    instance_ids: np.ndarray
    vectors: np.ndarray  # [N, d] float64
    category_ids: np.ndarray
    subsets: np.ndarray
    support_index: np.ndarray  # -1 for queries

    def rows(self, mask: np.ndarray) -> "FeatureTable":
        return FeatureTable(*(getattr(self, f)[mask] for f in ("instance_ids", "vectors", "category_ids", "subsets", "support_index")))


def embed_novel(model, manifest: BenchmarkManifest, root=None, short_edge: int = 800, batch_size: int = 8) -> FeatureTable:
    """Features of every novel support and query instance, rows in instance-id order."""
    dataset = RegionDataset(manifest, root, short_edge, ("novel_support", "novel_query"), targets=False, cache=False)
    expected = {o.instance_id: o for o in manifest.instances_in("novel_support", "novel_query")}
    ids, vecs = [], []
    dtype = next(model.parameters()).dtype
    was_training = model.training
    model.eval()
    try:
        for batch in iter_batches(dataset, range(len(dataset)), batch_size, dtype=dtype):
            ids += [i for s in batch.samples for i in s.instance_ids]
            vecs.append(model.embed(batch).double().cpu().numpy())
    finally:
        model.train(was_training)
    missing = sorted(set(expected) - set(ids))
    if missing:
        raise ValueError(f"{len(missing)} novel instances were not embedded, e.g. {missing[:5]}")
    order = np.argsort(ids, kind="stable")
    ids = np.asarray(ids)[order]
    objs = [expected[int(i)] for i in ids]
    d = getattr(model, "dim", vecs[0].shape[1] if vecs else 0)
    return FeatureTable(
        instance_ids=ids,
        vectors=np.concatenate(vecs)[order] if vecs else np.zeros((0, d)),
        category_ids=np.asarray([o.category_id for o in objs]),
        subsets=np.asarray([o.subset for o in objs]),
        support_index=np.asarray([-1 if o.support_index is None else o.support_index for o in objs]),
    )


# ---------------------------------------------------------------------------
# classifiers


def select_support(table: FeatureTable, classes, k: int) -> FeatureTable:
    """Support rows with ``support_index < k`` (so 1-shot takes index 0)."""
    if k < 1:
        raise ValueError("k must be at least 1")
    classes = np.asarray(classes)
    mask = (table.subsets == "novel_support") & (table.support_index < k) & np.isin(table.category_ids, classes)
    sup = table.rows(mask)
    counts = {int(c): int((sup.category_ids == c).sum()) for c in classes}
    empty = [c for c, n in counts.items() if n == 0]
    if empty:
        raise ValueError(f"classes without support: {empty[:10]}")
    short = [c for c, n in counts.items() if n != k]
    if short:
        raise ValueError(f"classes with fewer than {k} support: {short[:10]}")
    return sup


def _check_labels(y: np.ndarray, n_classes: int) -> None:
    present = np.bincount(y, minlength=n_classes)
    if (present == 0).any():
        raise ValueError(f"class indices without support: {np.flatnonzero(present == 0)[:10].tolist()}")


@dataclass
class FitInfo:
    iterations: int
    converged: bool
    grad_norm: float


@dataclass
class LinearClassifier:
    weight: np.ndarray  # [C, d]
    bias: np.ndarray
    info: FitInfo | None = None

    def scores(self, x: np.ndarray) -> np.ndarray:
        return x @ self.weight.T + self.bias


@dataclass
class CosineClassifier:
    weight: np.ndarray
    scale: float = COSINE_SCALE
    info: FitInfo | None = None

    def scores(self, x: np.ndarray) -> np.ndarray:
        return self.scale * _normalize(x) @ _normalize(self.weight).T


def _normalize(x: np.ndarray) -> np.ndarray:
    return x / np.maximum(np.linalg.norm(x, axis=-1, keepdims=True), 1e-12)


def _lbfgs(fun, x0):
    res = minimize(fun, x0, jac=True, method="L-BFGS-B", options={"maxiter": MAX_ITER, "gtol": GTOL, "ftol": 0.0})
    _, g = fun(res.x)
    return res.x, FitInfo(int(res.nit), bool(np.abs(g).max() < GTOL or res.success), float(np.abs(g).max()))


def _softmax_grad(logits: np.ndarray, y: np.ndarray):
    n = len(y)
    logp = log_softmax(logits, axis=1)
    loss = -logp[np.arange(n), y].mean()
    g = np.exp(logp)
    g[np.arange(n), y] -= 1.0
    return loss, g / n


def fit_linear(x: np.ndarray, y: np.ndarray, n_classes: int, l2: float = L2_PENALTY) -> LinearClassifier:
    """Multinomial logistic regression: mean CE + ``l2/2 * ||W||^2``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    _check_labels(y, n_classes)
    n, d = x.shape

    def fun(theta):
        W = theta[: n_classes * d].reshape(n_classes, d)
        b = theta[n_classes * d :]
        loss, g = _softmax_grad(x @ W.T + b, y)
        gW = g.T @ x + l2 * W
        return loss + 0.5 * l2 * float((W * W).sum()), np.concatenate([gW.ravel(), g.sum(axis=0)])

    theta, info = _lbfgs(fun, np.zeros(n_classes * (d + 1)))
    return LinearClassifier(theta[: n_classes * d].reshape(n_classes, d), theta[n_classes * d :], info)


def fit_cosine(x: np.ndarray, y: np.ndarray, n_classes: int, scale: float = COSINE_SCALE) -> CosineClassifier:
    """Scaled-cosine classifier; weights start at the class means."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    _check_labels(y, n_classes)
    d = x.shape[1]
    xn = _normalize(x)
    init = np.stack([x[y == c].mean(axis=0) for c in range(n_classes)])

    def fun(theta):
        W = theta.reshape(n_classes, d)
        norms = np.maximum(np.linalg.norm(W, axis=1, keepdims=True), 1e-12)
        Wn = W / norms
        loss, g = _softmax_grad(scale * xn @ Wn.T, y)
        gWn = scale * g.T @ xn
        # d(W/|W|)/dW = (I - Wn Wn^T) / |W|
        gW = (gWn - (gWn * Wn).sum(axis=1, keepdims=True) * Wn) / norms
        return loss, gW.ravel()

    theta, info = _lbfgs(fun, init.ravel())
    return CosineClassifier(theta.reshape(n_classes, d), scale, info)


def prototype_scores(support: np.ndarray, labels: np.ndarray, n_classes: int, query: np.ndarray) -> np.ndarray:
    """Negative squared Euclidean distance from each query to each class mean."""
    support = np.asarray(support, dtype=np.float64)
    labels = np.asarray(labels)
    _check_labels(labels, n_classes)
    protos = np.stack([support[labels == c].mean(axis=0) for c in range(n_classes)])
    q = np.asarray(query, dtype=np.float64)
    return -(((q[:, None, :] - protos[None, :, :]) ** 2).sum(axis=2))


def prototype_classify(support, labels, n_classes: int, query) -> np.ndarray:
    return rank(prototype_scores(support, labels, n_classes, query))[:, 0]


# ---------------------------------------------------------------------------
# scoring


def rank(scores: np.ndarray) -> np.ndarray:
    """Column indices by descending score; ties keep ascending column order."""
    return np.argsort(-np.asarray(scores), axis=1, kind="stable")


def score(scores: np.ndarray, labels: np.ndarray) -> tuple[float, float]:
    """(top-1, top-5) accuracy in percent; ``labels`` are column indices."""
    scores = np.asarray(scores)
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("no queries to score")
    order = rank(scores)
    hit = order == labels[:, None]
    top1 = 100.0 * hit[:, :1].any(axis=1).mean()
    top5 = 100.0 * hit[:, :5].any(axis=1).mean()
    return float(top1), float(top5)


# ---------------------------------------------------------------------------
# reports


@dataclass
class EvalReport:
    regime: str
    split: str
    k_shot: int
    way: int
    classifier: str
    top1: float
    top5: float
    seed: int
    support_id: str
    n_query: int
    model_hash: str = ""
    flags: list[str] = field(default_factory=list)
    fit: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0 <= self.top1 <= self.top5 <= 100:
            raise ValueError(f"inconsistent accuracies top1={self.top1} top5={self.top5}")

    def row(self) -> dict:
        d = asdict(self)
        d["flags"] = ";".join(self.flags)
        return {c: d[c] for c in REPORT_COLUMNS}


def regime_id(m: BenchmarkManifest) -> str:
    if m.is_full:
        return "full"
    return f"{m.regime.op}:{json.dumps(m.regime.params, sort_keys=True, separators=(',', ':'))}"


def duplicate_support(x: np.ndarray, y: np.ndarray) -> bool:
    """True if identical feature vectors carry different labels."""
    seen: dict[bytes, int] = {}
    for v, c in zip(np.ascontiguousarray(x), y):
        key = v.tobytes()
        if seen.setdefault(key, int(c)) != int(c):
            return True
    return False


def evaluate(
    table: FeatureTable,
    manifest: BenchmarkManifest,
    split: str = "novel_test",
    classifier: str = "linear",
    k: int = 5,
    model_hash: str = "",
) -> EvalReport:
    if classifier not in CLASSIFIERS:
        raise ValueError(f"classifier must be one of {CLASSIFIERS}")
    classes = np.asarray(sorted(c.category_id for c in manifest.categories_in(split)))
    if len(classes) == 0:
        raise ValueError(f"no categories in split {split!r}")
    col = {int(c): j for j, c in enumerate(classes)}
    sup = select_support(table, classes, k)
    qry = table.rows((table.subsets == "novel_query") & np.isin(table.category_ids, classes))
    ys = np.asarray([col[int(c)] for c in sup.category_ids])
    yq = np.asarray([col[int(c)] for c in qry.category_ids])
    fit = {}
    if classifier == "linear":
        clf = fit_linear(sup.vectors, ys, len(classes))
        s = clf.scores(qry.vectors)
        fit = {**asdict(clf.info), "l2": L2_PENALTY, "gtol": GTOL, "max_iter": MAX_ITER}
    elif classifier == "cosine":
        clf = fit_cosine(sup.vectors, ys, len(classes))
        s = clf.scores(qry.vectors)
        fit = {**asdict(clf.info), "scale": COSINE_SCALE, "gtol": GTOL, "max_iter": MAX_ITER}
    else:
        s = prototype_scores(sup.vectors, ys, len(classes), qry.vectors)
    top1, top5 = score(s, yq)
    flags = ["duplicate_support"] if duplicate_support(sup.vectors, ys) else []
    if fit and not fit["converged"]:
        flags.append("not_converged")
    support_id = hashlib.sha256(",".join(map(str, sorted(sup.instance_ids.tolist()))).encode()).hexdigest()[:16]
    return EvalReport(
        regime=regime_id(manifest),
        split=split,
        k_shot=k,
        way=len(classes),
        classifier=classifier,
        top1=top1,
        top5=top5,
        seed=int(manifest.seeds.get("support", 0)),
        support_id=support_id,
        n_query=len(yq),
        model_hash=model_hash,
        flags=flags,
        fit=fit,
    )


def evaluate_model(model, manifest, root=None, classifiers=("linear",), ks=(5,), split="novel_test", short_edge=800):
    """Embed once, then one report per (classifier, k); asserts the model is untouched."""
    before = parameter_hash(model)
    with torch.no_grad():
        table = embed_novel(model, manifest, root, short_edge)
    if parameter_hash(model) != before:
        raise RuntimeError("evaluation modified model parameters")
    return [evaluate(table, manifest, split, c, k, before) for c in classifiers for k in ks]


def append_reports(path, reports, header: dict | None = None) -> None:
    path = Path(path)
    new = not path.exists()
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("a", newline="", encoding="utf-8") as fh:
        if new:
            for k, v in (header or {}).items():
                fh.write(f"# {k}: {v}\n")
            csv.writer(fh).writerow(REPORT_COLUMNS)
        w = csv.DictWriter(fh, REPORT_COLUMNS)
        for r in reports:
            w.writerow(r.row())


def summary(reports) -> dict:
    """``{split: {"{k}-shot": {classifier: {"top1", "top5"}}}}``."""
    out: dict = {}
    for r in reports:
        out.setdefault(r.split, {}).setdefault(f"{r.k_shot}-shot", {})[r.classifier] = {"top1": r.top1, "top5": r.top5, "way": r.way}
    return out
