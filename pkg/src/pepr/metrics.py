"""OOD detection metrics with in-distribution as the positive class, and the
two-stage aggregation: mean over datasets within a run, then mean and
sample standard deviation of those per-run means across seeds."""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .errors import DataError

METRICS = ("auroc", "aupr", "fpr95")
# direction of "better" for each metric
HIGHER_IS_BETTER = {"auroc": True, "aupr": True, "fpr95": False}


def _check(in_scores, ood_scores):
    a = np.asarray(in_scores, dtype=np.float64).ravel()
    b = np.asarray(ood_scores, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise DataError("metrics need non-empty in-distribution and OOD score arrays")
    if not (np.isfinite(a).all() and np.isfinite(b).all()):
        raise DataError("scores must be finite")
    return a, b


def auroc(in_scores, ood_scores) -> float:
    """P(S_in > S_ood) + P(S_in = S_ood) / 2 via the Mann-Whitney rank sum."""
    a, b = _check(in_scores, ood_scores)
    ranks = rankdata(np.concatenate([a, b]))  # ties get average ranks
    n1, n2 = a.size, b.size
    u = ranks[:n1].sum() - n1 * (n1 + 1) / 2.0
    return float(u / (n1 * n2))


def aupr(in_scores, ood_scores) -> float:
    """Average precision over descending thresholds; tied scores form one step."""
    a, b = _check(in_scores, ood_scores)
    scores = np.concatenate([a, b])
    is_in = np.concatenate([np.ones(a.size), np.zeros(b.size)])
    order = np.argsort(-scores, kind="mergesort")
    scores, is_in = scores[order], is_in[order]
    # last index of every run of equal scores
    ends = np.r_[np.flatnonzero(np.diff(scores)), scores.size - 1]
    tp = np.cumsum(is_in)[ends]
    fp = (ends + 1) - tp
    precision = tp / (tp + fp)
    recall_step = np.diff(np.r_[0.0, tp]) / a.size
    return float((precision * recall_step).sum())


def _min_count(n: int, rate: float) -> int:
    """Smallest k with k / n >= rate (evaluated in floating point)."""
    k = max(0, min(n, math.ceil(rate * n)))
    while k > 0 and (k - 1) / n >= rate:
        k -= 1
    while k < n and k / n < rate:
        k += 1
    return k


def fpr_at_tpr(in_scores, ood_scores, tpr: float = 0.95) -> float:
    """FPR at the largest threshold whose TPR (with ``score >= threshold``) reaches ``tpr``."""
    a, b = _check(in_scores, ood_scores)
    k = _min_count(a.size, tpr)
    if k == 0:  # zero target: the threshold can sit above every score
        return 0.0
    tau = np.sort(a)[::-1][k - 1]
    return float((b >= tau).mean())


def fpr95(in_scores, ood_scores) -> float:
    return fpr_at_tpr(in_scores, ood_scores, 0.95)


def evaluate_scores(in_scores, ood_scores) -> dict[str, float]:
    return {
        "auroc": auroc(in_scores, ood_scores),
        "aupr": aupr(in_scores, ood_scores),
        "fpr95": fpr95(in_scores, ood_scores),
    }


# ---------------------------------------------------------------- records


@dataclass(frozen=True)
class EvalRecord:
    method: str
    dataset: str
    seed: int
    auroc: float
    aupr: float
    fpr95: float


@dataclass(frozen=True)
class SummaryRow:
    method: str
    metric: str
    mean: float
    std: float
    n_seeds: int


def _sample_std(values) -> float:
    values = np.asarray(values, dtype=np.float64)
    return float(values.std(ddof=1)) if values.size > 1 else 0.0


def _grid(records):
    methods = sorted({r.method for r in records})
    datasets = sorted({r.dataset for r in records})
    seeds = sorted({r.seed for r in records})
    cells = {}
    for r in records:
        key = (r.method, r.dataset, r.seed)
        if key in cells:
            raise DataError(f"duplicate record for {key}")
        cells[key] = r
    gaps = [(m, d, s) for m in methods for d in datasets for s in seeds if (m, d, s) not in cells]
    if gaps:
        shown = ", ".join(f"{m}/{d}/seed {s}" for m, d, s in gaps[:10])
        more = f" (+{len(gaps) - 10} more)" if len(gaps) > 10 else ""
        raise DataError(f"incomplete record grid, missing: {shown}{more}")
    return methods, datasets, seeds, cells


def summarize(records) -> list[SummaryRow]:
    """Per method and metric: mean over datasets per seed, then mean and
    sample std of those per-seed values."""
    records = list(records)
    if not records:
        raise DataError("no records to summarize")
    methods, datasets, seeds, cells = _grid(records)
    rows = []
    for m in methods:
        for metric in METRICS:
            per_seed = [np.mean([getattr(cells[m, d, s], metric) for d in datasets]) for s in seeds]
            rows.append(SummaryRow(m, metric, float(np.mean(per_seed)), _sample_std(per_seed),
                                   len(seeds)))
    return rows


@dataclass(frozen=True)
class DatasetRow:
    method: str
    dataset: str
    metric: str
    mean: float
    std: float
    n_seeds: int


def per_dataset(records) -> list[DatasetRow]:
    methods, datasets, seeds, cells = _grid(list(records))
    rows = []
    for d in datasets:
        for m in methods:
            for metric in METRICS:
                vals = [getattr(cells[m, d, s], metric) for s in seeds]
                rows.append(DatasetRow(m, d, metric, float(np.mean(vals)), _sample_std(vals),
                                       len(seeds)))
    return rows


def write_records(path, records):
    names = [f.name for f in fields(EvalRecord)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names)
        for r in sorted(records, key=lambda r: (r.method, r.dataset, r.seed)):
            w.writerow([r.method, r.dataset, r.seed] + [repr(float(getattr(r, k))) for k in METRICS])


def read_records(path) -> list[EvalRecord]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"record file {path} not found")
    out = []
    with open(path, newline="") as fh:
        for i, row in enumerate(csv.DictReader(fh), start=2):
            try:
                out.append(EvalRecord(row["method"], row["dataset"], int(row["seed"]),
                                      float(row["auroc"]), float(row["aupr"]), float(row["fpr95"])))
            except (KeyError, ValueError, TypeError) as exc:
                raise DataError(f"{path}:{i}: malformed record ({exc})") from None
    return out


def records_as_dicts(records):
    return [asdict(r) for r in records]
