"""precompute -> train -> evaluate -> report, on disk under ``RunConfig.out``.

Layout::

    out/manifest.json
    out/cache/index.json, train.bin, val.bin, ood-<name>.bin
    out/checkpoints/seed-000/{flat,grouped,mos-01,...}.npz
    out/logs/seed-000-{flat,grouped,...}.csv
    out/scores/seed-000/<METHOD>.csv
    out/records.csv
    out/report/table1.{csv,md}, table2.{csv,md}, histograms.csv
"""

from __future__ import annotations

import csv
import json
import logging
import time
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig
from .data import FeatureCache, FeatureDataset, gen_synthetic, load_feature_file, precompute_cache, sha256_file
from .errors import ConfigError, DataError, NumericError
from .metrics import EvalRecord, evaluate_scores, read_records, write_records
from .models import embed_and_classify, load_model, save_model, train_pepr
from .report import write_histograms, write_per_dataset, write_summary
from .scoring import KlmCounter, Method, fit_klm_templates, score_method

log = logging.getLogger(__name__)

IN_CURVE = "in-distribution"


# ---------------------------------------------------------------- planning


@dataclass(frozen=True)
class Plan:
    """Model variants a method set needs, per seed."""

    flat: bool
    grouped: bool
    n_regressors: int
    mos_members: int
    klm: bool


def resolve_plan(methods: list[Method]) -> Plan:
    flat = any(m.variant == "flat" for m in methods)
    grouped = any(m.variant == "grouped" for m in methods)
    n_reg = max([m.members for m in methods if m.base in ("PEPR", "CPEPR")], default=0)
    mos = max([m.members for m in methods if m.base == "MOS"], default=0)
    return Plan(flat, grouped, n_reg, mos, any(m.base == "KLM" for m in methods))


def member_seed(seed: int, j: int) -> int:
    """Seed of the j-th extra classifier in a MOS ensemble (j >= 1)."""
    return int(np.random.SeedSequence([seed, 303, j]).generate_state(1)[0])


# ---------------------------------------------------------------- manifest


class Manifest:
    def __init__(self, cfg: RunConfig):
        self.path = cfg.out_dir / "manifest.json"
        self.data = {}
        if self.path.exists():
            try:
                self.data = json.loads(self.path.read_text())
            except json.JSONDecodeError:
                self.data = {}
        self.data.update({
            "fingerprint": cfg.fingerprint(),
            "software_version": __version__,
            "config": cfg.to_dict(),
            "seeds": list(cfg.seeds),
        })
        self.data.setdefault("artifacts", {})
        self.data.setdefault("timings", {})
        self.data.setdefault("errors", [])
        self.root = cfg.out_dir

    def record(self, *paths):
        for p in paths:
            p = Path(p)
            self.data["artifacts"][str(p.relative_to(self.root))] = sha256_file(p)

    def timing(self, stage: str, seconds: float):
        self.data["timings"][stage] = round(seconds, 3)

    def save(self):
        self.root.mkdir(parents=True, exist_ok=True)
        self.path.write_text(json.dumps(self.data, indent=2, sort_keys=True) + "\n")


def _start(cfg: RunConfig) -> Manifest:
    try:
        cfg.out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {cfg.out_dir}: {exc}") from None
    m = Manifest(cfg)
    m.save()  # written before any result of this stage
    return m


# ---------------------------------------------------------------- data


def build_dataset(cfg: RunConfig) -> FeatureDataset:
    if cfg.synthetic is not None:
        return gen_synthetic(cfg.synthetic)
    src = cfg.files
    parts = [load_feature_file(src.train, src.format, "train")]
    if src.val:
        parts.append(load_feature_file(src.val, src.format, "val"))
    if src.test_in:
        parts.append(load_feature_file(src.test_in, src.format, "test-in"))
    for p in src.ood:
        parts.append(load_feature_file(p, src.format, "test-ood"))
    return FeatureDataset.concatenate(parts).validate()


def resolve_sigma_aug(cfg: RunConfig, ds: FeatureDataset) -> float:
    if cfg.sigma_aug is not None:
        return float(cfg.sigma_aug)
    if cfg.synthetic is not None:
        return 0.05 * cfg.synthetic.within_sigma
    x, _ = ds.split("train")
    return float(0.05 * x.std(axis=0).mean())


def cache_dir(cfg: RunConfig) -> Path:
    return cfg.out_dir / "cache"


def cmd_precompute(cfg: RunConfig) -> FeatureCache:
    """Build the feature cache (a no-op when an identical cache already verifies)."""
    t0 = time.perf_counter()
    manifest = _start(cfg)
    ds = build_dataset(cfg)
    cache = precompute_cache(ds, cfg.augmentations, cache_dir(cfg), resolve_sigma_aug(cfg, ds),
                             cfg.cache_seed)
    manifest.data["cache"] = {"checksum": cache.checksum(), "fingerprint": cache.index["fingerprint"],
                              "files": {k: v["sha256"] for k, v in cache.index["files"].items()}}
    manifest.timing("precompute", time.perf_counter() - t0)
    manifest.save()
    return cache


def open_cache(cfg: RunConfig) -> FeatureCache:
    return FeatureCache.open(cache_dir(cfg)).verify()


# ---------------------------------------------------------------- training


def seed_dir(cfg: RunConfig, seed: int) -> Path:
    return cfg.out_dir / "checkpoints" / f"seed-{seed:03d}"


def write_log(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "classification_loss", "regression_loss", "learning_rate",
                    "validation_accuracy"])
        for r in rows:
            w.writerow([r["epoch"], repr(r["classification_loss"]), repr(r["regression_loss"]),
                        repr(r["learning_rate"]), repr(r["validation_accuracy"])])


def _variants(plan: Plan, seed: int):
    """(name, head, classifier seed, regressor count) for every model a seed needs."""
    out = []
    if plan.flat:
        out.append(("flat", "flat", seed, 0))
    if plan.grouped:
        out.append(("grouped", "grouped", seed, plan.n_regressors))
        for j in range(1, plan.mos_members):
            out.append((f"mos-{j:02d}", "grouped", member_seed(seed, j), 0))
    return out


def cmd_train(cfg: RunConfig) -> dict:
    """Train every model variant required by the method set, for every seed.

    A diverging seed is reported and skipped; the others still run. Raises
    NumericError at the end if any seed diverged.
    """
    t0 = time.perf_counter()
    manifest = _start(cfg)
    cache = open_cache(cfg)
    checksum_before = cache.checksum()
    train = cache.read("train")
    x, y = train.features, train.labels.astype(np.int64)
    val = None
    if "val" in cache.datasets:
        v = cache.read("val")
        val = (v.features, v.labels.astype(np.int64))
    plan = resolve_plan(cfg.parsed_methods)
    written, failures = defaultdict(dict), []
    (cfg.out_dir / "logs").mkdir(parents=True, exist_ok=True)
    for seed in cfg.seeds:
        sd = seed_dir(cfg, seed)
        sd.mkdir(parents=True, exist_ok=True)
        for name, head, cls_seed, n_reg in _variants(plan, seed):
            tc = cfg.train.replace(seed=cls_seed, head=head)
            log.info("seed %d: training %s (%d regressors)", seed, name, n_reg)
            try:
                result = train_pepr(x, y, tc, val=val, n_regressors=n_reg)
            except NumericError as exc:
                msg = f"seed {seed} / {name}: {exc}"
                log.error("training diverged: %s", msg)
                failures.append(msg)
                break
            path = sd / f"{name}.npz"
            save_model(path, result.model, tc, {"run_seed": seed, "variant_name": name})
            log_path = cfg.out_dir / "logs" / f"seed-{seed:03d}-{name}.csv"
            write_log(log_path, result.log)
            manifest.record(path, log_path)
            written[seed][name] = path
    if cache.checksum() != checksum_before:
        raise DataError("feature cache changed during training")
    manifest.data["errors"] = failures
    manifest.timing("train", time.perf_counter() - t0)
    manifest.save()
    if failures:
        raise NumericError("training diverged for " + "; ".join(failures))
    return dict(written)


# ---------------------------------------------------------------- evaluation


def _load(cfg, seed, name):
    path = seed_dir(cfg, seed) / f"{name}.npz"
    if not path.exists():
        raise DataError(f"missing checkpoint {path} (seed {seed}, model {name}); run train first")
    model, _, _ = load_model(path)
    return model


def _test_sets(cache: FeatureCache):
    in_id = "test-in" if "test-in" in cache.datasets else "val"
    if in_id not in cache.datasets:
        raise DataError("cache has no in-distribution test rows (test-in or val)")
    tables = {IN_CURVE: cache.read(in_id)}
    for name in cache.ood_names:
        tables[name] = cache.read(f"ood-{name}")
    if len(tables) == 1:
        raise DataError("cache has no OOD test sets")
    return tables


def _outputs(cfg, seed, plan, tables, train_table):
    """Eval-mode model outputs on every test table, keyed like score_method expects."""
    per_table = {name: {} for name in tables}
    if plan.flat:
        flat = _load(cfg, seed, "flat")
        templates = None
        if plan.klm:
            _, p_train, _ = embed_and_classify(train_table.features, flat)
            templates = fit_klm_templates(p_train, train_table.labels.astype(np.int64),
                                          flat.n_classes)
        for name, t in tables.items():
            _, p, logits = embed_and_classify(t.features, flat)
            per_table[name]["flat"] = {"probs": p, "logits": logits, "templates": templates}
    if plan.grouped:
        grouped = _load(cfg, seed, "grouped")
        members = [grouped] + [_load(cfg, seed, f"mos-{j:02d}") for j in range(1, plan.mos_members)]
        for name, t in tables.items():
            z, p, logits = embed_and_classify(t.features, grouped)
            per_table[name]["grouped"] = {"z": z, "probs": p, "logits": logits, "model": grouped}
            per_table[name]["mos_members"] = [p] + [embed_and_classify(t.features, m)[1]
                                                   for m in members[1:]]
    return per_table


def scores_dir(cfg: RunConfig, seed: int) -> Path:
    return cfg.out_dir / "scores" / f"seed-{seed:03d}"


def write_scores(path, method: str, in_table, in_scores, ood: dict):
    """One block per OOD dataset: the in-distribution rows followed by that dataset's rows."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["example_id", "dataset", "method", "score", "is_in_distribution"])
        for dname, (table, scores) in ood.items():
            for eid, s in zip(in_table.example_ids, in_scores):
                w.writerow([int(eid), dname, method, repr(float(s)), 1])
            for eid, s in zip(table.example_ids, scores):
                w.writerow([int(eid), dname, method, repr(float(s)), 0])


def read_scores(path) -> dict[str, dict[str, np.ndarray]]:
    """``{dataset: {"in": scores, "ood": scores}}`` from a score dump."""
    out = defaultdict(lambda: {"in": [], "ood": []})
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out[row["dataset"]]["in" if row["is_in_distribution"] == "1" else "ood"].append(
                float(row["score"]))
    return {d: {k: np.array(v) for k, v in parts.items()} for d, parts in out.items()}


def cmd_evaluate(cfg: RunConfig) -> list[EvalRecord]:
    """Score every method on every test set and write score dumps and records.csv."""
    t0 = time.perf_counter()
    manifest = _start(cfg)
    cache = open_cache(cfg)
    tables = _test_sets(cache)
    plan = resolve_plan(cfg.parsed_methods)
    train_table = cache.read("train") if plan.klm else None
    records = []
    klm_counter = KlmCounter()
    for seed in cfg.seeds:
        outs = _outputs(cfg, seed, plan, tables, train_table)
        sd = scores_dir(cfg, seed)
        sd.mkdir(parents=True, exist_ok=True)
        for method in cfg.parsed_methods:
            s_in = score_method(method, outs[IN_CURVE], cfg.psi, klm_counter)
            ood = {}
            for name in tables:
                if name == IN_CURVE:
                    continue
                s_ood = score_method(method, outs[name], cfg.psi, klm_counter)
                ood[name] = (tables[name], s_ood)
                m = evaluate_scores(s_in, s_ood)
                records.append(EvalRecord(method.name, name, seed, m["auroc"], m["aupr"], m["fpr95"]))
            path = sd / f"{method.name}.csv"
            write_scores(path, method.name, tables[IN_CURVE], s_in, ood)
            manifest.record(path)
    rec_path = cfg.out_dir / "records.csv"
    write_records(rec_path, records)
    manifest.record(rec_path)
    manifest.data["klm_template_comparisons"] = klm_counter.comparisons
    manifest.timing("evaluate", time.perf_counter() - t0)
    manifest.save()
    return records


# ---------------------------------------------------------------- report


def report_dir(cfg: RunConfig) -> Path:
    return cfg.out_dir / "report"


def cmd_report(cfg: RunConfig) -> list[Path]:
    """Write summary and per-dataset tables plus score histograms from records.csv."""
    t0 = time.perf_counter()
    manifest = _start(cfg)
    records = read_records(cfg.out_dir / "records.csv")
    out = report_dir(cfg)
    paths = write_summary(records, out) + write_per_dataset(records, out)

    # histograms from the first seed's score dumps
    seed = min(r.seed for r in records)
    curves = {}
    for method in sorted({r.method for r in records}):
        path = scores_dir(cfg, seed) / f"{method}.csv"
        if not path.exists():
            raise DataError(f"missing score dump {path}; run evaluate first")
        parts = read_scores(path)
        first = sorted(parts)[0]
        curves[method] = {IN_CURVE: parts[first]["in"],
                          **{d: parts[d]["ood"] for d in sorted(parts)}}
    paths.append(write_histograms(curves, out / "histograms.csv", cfg.hist_bins))
    manifest.record(*paths)
    manifest.timing("report", time.perf_counter() - t0)
    manifest.save()
    return paths


def cmd_run(cfg: RunConfig) -> list[Path]:
    """Precompute, train, evaluate and report in one go."""
    cmd_precompute(cfg)
    cmd_train(cfg)
    cmd_evaluate(cfg)
    return cmd_report(cfg)
