"""Summary and per-dataset tables (CSV + Markdown) and area-normalised score histograms."""

from __future__ import annotations

import csv
from collections import defaultdict
from pathlib import Path

import numpy as np

from .errors import DataError
from .metrics import HIGHER_IS_BETTER, METRICS, per_dataset, summarize

METRIC_LABELS = {"auroc": "AUROC", "aupr": "AUPR", "fpr95": "FPR95"}


def fmt(mean: float, std: float) -> str:
    return f"{100 * mean:.1f} ±{100 * std:.1f}"


def mark_best(rows, metric: str) -> set:
    """Methods whose mean lies within one std (of the best entry) of the best mean."""
    if not rows:
        return set()
    higher = HIGHER_IS_BETTER[metric]
    best = max(rows, key=lambda r: r.mean) if higher else min(rows, key=lambda r: r.mean)
    return {r.method for r in rows if abs(r.mean - best.mean) <= best.std + 1e-12}


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def write_summary(records, out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    summary = summarize(records)
    by_metric = defaultdict(list)
    for r in summary:
        by_metric[r.metric].append(r)
    marked = {m: mark_best(rows, m) for m, rows in by_metric.items()}
    methods = sorted({r.method for r in summary})
    cell = {(r.method, r.metric): r for r in summary}

    csv_rows = [[r.method, r.metric, repr(r.mean), repr(r.std), f"{100 * r.mean:.1f}",
                 f"{100 * r.std:.1f}", fmt(r.mean, r.std), int(r.method in marked[r.metric]),
                 r.n_seeds] for r in summary]
    t1 = out_dir / "table1.csv"
    _write_csv(t1, ["method", "metric", "mean", "std", "mean_x100", "std_x100", "formatted",
                    "marked", "n_seeds"], csv_rows)

    lines = ["| Method | " + " | ".join(f"{METRIC_LABELS[m]} mean ±σ" for m in METRICS) + " |",
             "|---|" + "---:|" * len(METRICS)]
    for method in methods:
        cells = []
        for m in METRICS:
            r = cell[method, m]
            text = fmt(r.mean, r.std)
            cells.append(f"**{text}**" if method in marked[m] else text)
        lines.append(f"| {method} | " + " | ".join(cells) + " |")
    n = summary[0].n_seeds
    lines += ["", f"Per-run mean over datasets, then mean ±σ (sample) across {n} run(s). "
              "Values ×100; marked entries lie within one σ of the best."]
    md1 = out_dir / "table1.md"
    md1.write_text("\n".join(lines) + "\n")
    return [t1, md1]


def write_per_dataset(records, out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = per_dataset(records)
    groups = defaultdict(list)
    for r in rows:
        groups[r.dataset, r.metric].append(r)
    marked = {k: mark_best(v, k[1]) for k, v in groups.items()}
    methods = sorted({r.method for r in rows})
    datasets = sorted({r.dataset for r in rows})

    csv_rows = [[r.dataset, r.metric, r.method, repr(r.mean), repr(r.std), fmt(r.mean, r.std),
                 int(r.method in marked[r.dataset, r.metric])] for r in rows]
    t2 = out_dir / "table2.csv"
    _write_csv(t2, ["dataset", "metric", "method", "mean", "std", "formatted", "marked"], csv_rows)

    lines = []
    cell = {(r.dataset, r.metric, r.method): r for r in rows}
    for metric in METRICS:
        lines += [f"### {METRIC_LABELS[metric]}", "",
                  "| Dataset | " + " | ".join(methods) + " |",
                  "|---|" + "---:|" * len(methods)]
        for d in datasets:
            cells = []
            for m in methods:
                r = cell[d, metric, m]
                text = fmt(r.mean, r.std)
                cells.append(f"**{text}**" if m in marked[d, metric] else text)
            lines.append(f"| {d} | " + " | ".join(cells) + " |")
        lines.append("")
    md2 = out_dir / "table2.md"
    md2.write_text("\n".join(lines))
    return [t2, md2]


def histogram(curves: dict[str, np.ndarray], bins: int = 100):
    """Shared-range histograms whose density integrates to one per curve.

    Returns ``(edges, {curve: density})``.
    """
    if not curves:
        raise DataError("no score curves to histogram")
    pooled = np.concatenate([np.asarray(v, dtype=np.float64) for v in curves.values()])
    if pooled.size == 0:
        raise DataError("empty score curves")
    lo, hi = float(pooled.min()), float(pooled.max())
    if hi <= lo:
        lo, hi = lo - 0.5, hi + 0.5
    edges = np.linspace(lo, hi, bins + 1)
    out = {}
    for name, values in curves.items():
        counts, _ = np.histogram(values, bins=edges)
        out[name] = counts / (counts.sum() * np.diff(edges))
    return edges, out


def write_histograms(per_method: dict[str, dict[str, np.ndarray]], path, bins: int = 100) -> Path:
    rows = []
    for method in sorted(per_method):
        edges, dens = histogram(per_method[method], bins)
        for curve, density in dens.items():
            for b in range(bins):
                rows.append([method, curve, b, repr(float(edges[b])), repr(float(edges[b + 1])),
                             repr(float(density[b]))])
    _write_csv(path, ["method", "curve", "bin", "left", "right", "density"], rows)
    return Path(path)
