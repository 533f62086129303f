"""Summary tables and bar charts from eval, portion and metrics CSVs.

Each chart is an SVG plus a ``.json`` sidecar holding the plotted values,
so results can be checked without reading pixels.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .fewshot import REPORT_COLUMNS  # noqa: E402
from .regimes import PORTION_COLUMNS  # noqa: E402
from .trainer import METRIC_COLUMNS  # noqa: E402


def read_csv(path) -> tuple[list[str], list[dict]]:
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    reader = csv.DictReader(lines)
    rows = list(reader)
    return list(reader.fieldnames or []), rows


def kind_of(columns) -> str:
    cols = set(columns)
    if set(REPORT_COLUMNS) <= cols:
        return "eval"
    if set(PORTION_COLUMNS) <= cols:
        return "portion"
    if set(METRIC_COLUMNS) <= cols:
        return "metrics"
    raise ValueError(f"unrecognised CSV columns {sorted(cols)}")


def bar_chart(groups: list[str], series: dict[str, list[float]], ylabel: str, title: str, path: Path, header: dict) -> Path:
    """Grouped bars; writes ``path`` (SVG) and ``path.json`` with the bar heights."""
    fig, ax = plt.subplots(figsize=(max(4.0, 1.2 * len(groups) * max(1, len(series))), 3.2))
    width = 0.8 / max(1, len(series))
    for i, (name, values) in enumerate(series.items()):
        xs = [g + (i - (len(series) - 1) / 2) * width for g in range(len(groups))]
        ax.bar(xs, values, width, label=name)
    ax.set_xticks(range(len(groups)))
    ax.set_xticklabels(groups, rotation=20, ha="right", fontsize=8)
    ax.set_ylabel(ylabel)
    ax.set_title(title, fontsize=9)
    if len(series) > 1:
        ax.legend(fontsize=7)
    fig.tight_layout()
    plt.rcParams["svg.hashsalt"] = "scarcebench"
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    sidecar = {"header": header, "title": title, "ylabel": ylabel, "groups": groups, "series": series}
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _eval_outputs(rows_by_model: dict[str, list[dict]], out: Path, header: dict) -> list[Path]:
    outputs = []
    keys = sorted({(r["split"], r["classifier"], int(r["k_shot"])) for rows in rows_by_model.values() for r in rows})
    regimes = sorted({r["regime"] for rows in rows_by_model.values() for r in rows})
    table = []
    for regime in regimes:
        for model, rows in rows_by_model.items():
            hits = [r for r in rows if r["regime"] == regime]
            if not hits:
                continue
            entry = {"regime": regime, "model": model}
            for r in hits:
                prefix = f"{r['split']}_{r['classifier']}_{r['k_shot']}shot"
                entry[f"{prefix}_top1"] = float(r["top1"])
                entry[f"{prefix}_top5"] = float(r["top5"])
            table.append(entry)
    columns = ["regime", "model"] + sorted({k for e in table for k in e} - {"regime", "model"})
    path = out / "eval_summary.csv"
    with path.open("w", newline="", encoding="utf-8") as fh:
        for k, v in header.items():
            fh.write(f"# {k}: {v}\n")
        w = csv.DictWriter(fh, columns, restval="")
        w.writeheader()
        w.writerows(table)
    outputs.append(path)
    for split, clf, k in keys:
        prefix = f"{split}_{clf}_{k}shot"
        series = {}
        for model in rows_by_model:
            series[model] = [next((e[f"{prefix}_top1"] for e in table if e["regime"] == g and e["model"] == model and f"{prefix}_top1" in e), 0.0) for g in regimes]
        outputs.append(bar_chart(regimes, series, "top-1 (%)", f"{split} {k}-shot {clf}", out / f"{prefix}_top1.svg", header))
    return outputs


def write_report(inputs: list[Path], out: Path, header: dict | None = None) -> list[Path]:
    header = header or {}
    out.mkdir(parents=True, exist_ok=True)
    evals: dict[str, list[dict]] = {}
    portions: list[dict] = []
    metrics: dict[str, list[dict]] = {}
    for path in inputs:
        columns, rows = read_csv(path)
        if not rows:
            raise ValueError(f"{path}: no data rows")
        kind = kind_of(columns)
        if kind == "eval":
            evals.setdefault(path.stem, []).extend(rows)
        elif kind == "portion":
            portions.extend(rows)
        else:
            metrics[path.parent.name or path.stem] = rows
    outputs: list[Path] = []
    if evals:
        outputs += _eval_outputs(evals, out, header)
    if portions:
        seen = {}
        for r in portions:
            seen[f"{r['regime']}@{r['ratio']}"] = float(r["portion_pct"])
        groups = list(seen)
        outputs.append(bar_chart(groups, {"portion": [seen[g] for g in groups]}, "base-train instances (%)", "instance portion", out / "portion.svg", header))
    if metrics:
        groups, finals, accs = [], [], []
        for run, rows in metrics.items():
            totals = [r for r in rows if r["head"] == "total"]
            vals = [r for r in rows if r["head"] == "base_val"]
            groups.append(run)
            finals.append(float(totals[-1]["loss"]) if totals else 0.0)
            accs.append(float(vals[-1]["acc"]) if vals else 0.0)
        outputs.append(bar_chart(groups, {"final total loss": finals}, "loss", "final training loss", out / "final_loss.svg", header))
        outputs.append(bar_chart(groups, {"base-val accuracy": accs}, "accuracy (%)", "base-val accuracy", out / "base_val.svg", header))
    return outputs
