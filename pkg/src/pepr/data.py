"""Feature datasets: synthetic Gaussian benchmarks, CSV/binary feature files and
an on-disk cache of (augmented) feature vectors standing in for precomputed
backbone outputs."""

from __future__ import annotations

import csv
import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError

SPLITS = ("train", "val", "test-in", "test-ood")
OOD_MODES = ("held-out", "mean-shift", "noise")

FEATURE_MAGIC = b"PEPRFEAT"
CACHE_MAGIC = b"PEPRCACH"
BINARY_VERSION = 1
_HEADER = struct.Struct("<8sIII")  # magic, version, rows, dims


@dataclass
class FeatureDataset:
    features: np.ndarray          # (N, d) float32
    labels: np.ndarray            # (N,) int64, -1 marks OOD
    splits: np.ndarray            # (N,) split tag
    example_ids: np.ndarray       # (N,) int64, unique
    ood_names: np.ndarray         # (N,) OOD dataset name, "" for in-distribution rows
    provenance: str = ""

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.splits = np.asarray(self.splits, dtype=object)
        self.example_ids = np.asarray(self.example_ids, dtype=np.int64)
        self.ood_names = np.asarray(self.ood_names, dtype=object)
        n = len(self.features)
        if self.features.ndim != 2:
            raise DataError("features must be a 2-D array")
        for name in ("labels", "splits", "example_ids", "ood_names"):
            if len(getattr(self, name)) != n:
                raise DataError(f"{name} has {len(getattr(self, name))} rows, features have {n}")

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def n_classes(self) -> int:
        ids = self.labels[self.labels >= 0]
        return int(ids.max()) + 1 if ids.size else 0

    def split(self, name: str):
        mask = self.splits == name
        return self.features[mask], self.labels[mask]

    def test_in(self):
        """In-distribution evaluation rows: ``test-in`` if present, else ``val``."""
        x, y = self.split("test-in")
        return (x, y) if len(x) else self.split("val")

    def ood_sets(self) -> dict[str, np.ndarray]:
        mask = self.splits == "test-ood"
        names = list(dict.fromkeys(self.ood_names[mask]))
        return {n: self.features[mask & (self.ood_names == n)] for n in names}

    def validate(self):
        bad = np.isin(self.splits, ["train", "val", "test-in"]) & (self.labels < 0)
        if bad.any():
            raise DataError("OOD rows (label -1) found in a train/val/test-in split")
        if ((self.splits == "test-ood") & (self.labels >= 0)).any():
            raise DataError("test-ood rows must carry label -1")
        unknown = set(self.splits) - set(SPLITS)
        if unknown:
            raise DataError(f"unknown split tags {sorted(unknown)}")
        if len(np.unique(self.example_ids)) != len(self.example_ids):
            raise DataError("example ids must be unique")
        _, ytr = self.split("train")
        missing = set(np.unique(self.labels[self.labels >= 0])) - set(np.unique(ytr))
        if missing:
            raise DataError(f"classes {sorted(missing)} have no training examples")
        return self

    @classmethod
    def concatenate(cls, parts: list["FeatureDataset"]) -> "FeatureDataset":
        if len({p.dim for p in parts}) > 1:
            raise DataError("feature files disagree on dimensionality")
        offset, ids = 0, []
        for p in parts:
            ids.append(p.example_ids - p.example_ids.min() + offset if len(p.example_ids) else p.example_ids)
            offset = (ids[-1].max() + 1) if len(ids[-1]) else offset
        return cls(
            np.concatenate([p.features for p in parts]),
            np.concatenate([p.labels for p in parts]),
            np.concatenate([p.splits for p in parts]),
            np.concatenate(ids),
            np.concatenate([p.ood_names for p in parts]),
            "+".join(p.provenance for p in parts),
        )


# ---------------------------------------------------------------- synthetic benchmark


@dataclass
class SyntheticSpec:
    dim: int = 64
    n_classes: int = 100
    mean_scale: float = 1.0
    within_sigma: float = 1.0
    train_per_class: int = 200
    val_per_class: int = 50
    ood_modes: tuple[str, ...] = OOD_MODES
    ood_count: int = 2000
    held_out_clusters: int = 20
    mean_shift: float = 0.5   # shift norm, in units of the typical class-mean norm
    noise_scale: float = 1.0  # isotropic noise std, relative to the in-distribution marginal std
    seed: int = 0

    def __post_init__(self):
        self.ood_modes = tuple(self.ood_modes)
        if self.dim < 2 or self.n_classes < 2:
            raise ConfigError("synthetic data needs dim >= 2 and at least 2 classes")
        if self.train_per_class + self.val_per_class < 2 or self.train_per_class < 1:
            raise ConfigError("need at least 2 samples per class, with one for training")
        if self.within_sigma < 0 or self.mean_scale <= 0:
            raise ConfigError("mean_scale must be positive and within_sigma non-negative")
        unknown = set(self.ood_modes) - set(OOD_MODES)
        if unknown:
            raise ConfigError(f"unknown OOD modes {sorted(unknown)}; choose from {OOD_MODES}")


def _held_out_means(rng, spec: SyntheticSpec, class_means):
    """Fresh cluster centres, redrawn while closer to a class mean than half
    the typical distance between class means."""
    typical = spec.mean_scale * np.sqrt(2 * spec.dim)
    out = []
    while len(out) < spec.held_out_clusters:
        m = rng.normal(0.0, spec.mean_scale, spec.dim)
        if np.linalg.norm(class_means - m, axis=1).min() > 0.5 * typical:
            out.append(m)
    return np.array(out)


def gen_synthetic(spec: SyntheticSpec) -> FeatureDataset:
    """Gaussian class clusters plus one OOD test set per requested mode.

    The result is a pure function of ``spec``.
    """
    rng = np.random.default_rng([spec.seed, 101])
    d, C, s = spec.dim, spec.n_classes, spec.within_sigma
    means = rng.normal(0.0, spec.mean_scale, (C, d))

    feats, labels, splits, names = [], [], [], []
    for split, per_class in (("train", spec.train_per_class), ("val", spec.val_per_class)):
        if per_class == 0:
            continue
        y = np.repeat(np.arange(C), per_class)
        feats.append(means[y] + rng.normal(0.0, 1.0, (len(y), d)) * s)
        labels.append(y)
        splits += [split] * len(y)
        names += [""] * len(y)

    n = spec.ood_count
    for mode in spec.ood_modes:
        if mode == "held-out":
            centres = _held_out_means(rng, spec, means)
            x = centres[rng.integers(0, len(centres), n)] + rng.normal(0.0, 1.0, (n, d)) * s
        elif mode == "mean-shift":
            direction = rng.normal(size=d)
            direction /= np.linalg.norm(direction)
            shift = spec.mean_shift * spec.mean_scale * np.sqrt(d) * direction
            x = means[rng.integers(0, C, n)] + shift + rng.normal(0.0, 1.0, (n, d)) * s
        else:
            scale = spec.noise_scale * np.sqrt(spec.mean_scale ** 2 + s ** 2)
            x = rng.normal(0.0, scale, (n, d))
        feats.append(x)
        labels.append(np.full(n, -1))
        splits += ["test-ood"] * n
        names += [mode] * n

    x = np.concatenate(feats)
    return FeatureDataset(
        x, np.concatenate(labels), np.array(splits, dtype=object), np.arange(len(x)),
        np.array(names, dtype=object), provenance=f"synthetic:{json.dumps(asdict(spec), sort_keys=True)}",
    ).validate()


def class_means(spec: SyntheticSpec) -> np.ndarray:
    """The class centres ``gen_synthetic`` draws for ``spec``."""
    rng = np.random.default_rng([spec.seed, 101])
    return rng.normal(0.0, spec.mean_scale, (spec.n_classes, spec.dim))


# ---------------------------------------------------------------- feature files


def _infer_format(path: Path, fmt: str | None) -> str:
    if fmt:
        if fmt not in ("csv", "bin"):
            raise ConfigError(f"unknown feature file format {fmt!r}")
        return fmt
    return "csv" if path.suffix.lower() in (".csv", ".txt") else "bin"


def write_feature_file(path, features, labels, fmt: str | None = None):
    path = Path(path)
    fmt = _infer_format(path, fmt)
    x = np.asarray(features, dtype=np.float32)
    y = np.asarray(labels, dtype=np.int64)
    if fmt == "csv":
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["label"] + [f"f{i}" for i in range(x.shape[1])])
            for label, row in zip(y, x):
                w.writerow([int(label)] + [repr(float(v)) for v in row])
    else:
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(FEATURE_MAGIC, BINARY_VERSION, len(x), x.shape[1]))
            fh.write(y.astype("<i4").tobytes())
            fh.write(x.astype("<f4").tobytes())


def _read_csv(path: Path):
    labels, rows = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path}: empty file")
        width = len(header)
        if width < 2:
            raise DataError(f"{path}:1: header needs a label column and at least one feature")
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width:
                raise DataError(f"{path}:{line}: expected {width} columns, found {len(row)}")
            try:
                label = int(row[0])
            except ValueError:
                raise DataError(f"{path}:{line}: label {row[0]!r} is not an integer") from None
            if label < -1:
                raise DataError(f"{path}:{line}: label must be >= 0 or -1 for OOD")
            try:
                vals = [float(v) for v in row[1:]]
            except ValueError as exc:
                raise DataError(f"{path}:{line}: non-numeric feature ({exc})") from None
            labels.append(label)
            rows.append(vals)
    if not rows:
        raise DataError(f"{path}: no data rows")
    return np.array(rows, dtype=np.float32), np.array(labels, dtype=np.int64)


def _read_bin(path: Path, magic: bytes = FEATURE_MAGIC):
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise DataError(f"{path}: empty or truncated file")
    got, version, n, d = _HEADER.unpack_from(raw)
    if got != magic:
        raise DataError(f"{path}: bad magic {got!r}")
    if version != BINARY_VERSION:
        raise DataError(f"{path}: unsupported version {version}")
    expected = _HEADER.size + 4 * n + 4 * n * d
    if len(raw) != expected:
        raise DataError(f"{path}: expected {expected} bytes, found {len(raw)}")
    labels = np.frombuffer(raw, "<i4", n, _HEADER.size).astype(np.int64)
    x = np.frombuffer(raw, "<f4", n * d, _HEADER.size + 4 * n).reshape(n, d).astype(np.float32)
    if n == 0:
        raise DataError(f"{path}: no data rows")
    return x, labels


def load_feature_file(path, fmt: str | None = None, split: str = "train",
                      name: str | None = None) -> FeatureDataset:
    """Read labelled features; rows labelled -1 become an OOD test set named ``name``
    (default: the file stem), other rows are tagged ``split``."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"feature file {path} not found")
    if split not in ("train", "val", "test-in", "test-ood"):
        raise ConfigError(f"unknown split {split!r}")
    x, y = _read_csv(path) if _infer_format(path, fmt) == "csv" else _read_bin(path)
    if not np.isfinite(x).all():
        raise DataError(f"{path}: non-finite feature values")
    ood = y < 0
    if split == "test-ood" and not ood.all():
        raise DataError(f"{path}: OOD file contains in-distribution labels")
    splits = np.where(ood, "test-ood", split).astype(object)
    names = np.where(ood, name or path.stem, "").astype(object)
    return FeatureDataset(x, y, splits, np.arange(len(x)), names, provenance=str(path))


# ---------------------------------------------------------------- cache


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


@dataclass
class CacheTable:
    example_ids: np.ndarray
    aug_index: np.ndarray
    labels: np.ndarray
    features: np.ndarray


def _write_table(path: Path, t: CacheTable):
    n, d = t.features.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(CACHE_MAGIC, BINARY_VERSION, n, d))
        fh.write(np.asarray(t.example_ids, "<i8").tobytes())
        fh.write(np.asarray(t.aug_index, "<i4").tobytes())
        fh.write(np.asarray(t.labels, "<i4").tobytes())
        fh.write(np.asarray(t.features, "<f4").tobytes())


def _read_table(path: Path) -> CacheTable:
    raw = path.read_bytes()
    got, version, n, d = _HEADER.unpack_from(raw)
    if got != CACHE_MAGIC or version != BINARY_VERSION:
        raise DataError(f"{path}: not a version-{BINARY_VERSION} cache file")
    off = _HEADER.size
    ids = np.frombuffer(raw, "<i8", n, off)
    off += 8 * n
    aug = np.frombuffer(raw, "<i4", n, off)
    off += 4 * n
    labels = np.frombuffer(raw, "<i4", n, off)
    off += 4 * n
    x = np.frombuffer(raw, "<f4", n * d, off).reshape(n, d)
    # frombuffer over bytes is read-only already
    return CacheTable(ids, aug, labels, x)


def _dataset_file(dataset_id: str) -> str:
    safe = "".join(c if c.isalnum() or c in "-_." else "_" for c in dataset_id)
    return f"{safe}.bin"


@dataclass
class FeatureCache:
    """Read-only view of a cache directory: one binary table per dataset id plus
    an ``index.json`` holding checksums and the build parameters."""

    path: Path
    index: dict = field(default_factory=dict)

    @classmethod
    def open(cls, path) -> "FeatureCache":
        path = Path(path)
        idx = path / "index.json"
        if not idx.exists():
            raise DataError(f"no feature cache at {path}; run precompute first")
        return cls(path, json.loads(idx.read_text()))

    @property
    def datasets(self) -> list[str]:
        return list(self.index["files"])

    @property
    def ood_names(self) -> list[str]:
        return list(self.index["ood"])

    def read(self, dataset_id: str) -> CacheTable:
        if dataset_id not in self.index["files"]:
            raise DataError(f"cache has no dataset {dataset_id!r}")
        return _read_table(self.path / self.index["files"][dataset_id]["file"])

    def checksum(self) -> str:
        h = hashlib.sha256()
        for ds in sorted(self.index["files"]):
            h.update(sha256_file(self.path / self.index["files"][ds]["file"]).encode())
        return h.hexdigest()

    def verify(self) -> "FeatureCache":
        for ds, info in self.index["files"].items():
            f = self.path / info["file"]
            if not f.exists() or sha256_file(f) != info["sha256"]:
                raise DataError(
                    f"cache file {f} is missing or corrupted; re-run precompute to rebuild it")
        return self


def cache_fingerprint(dataset: FeatureDataset, augmentations: int, sigma_aug: float,
                      seed: int) -> str:
    h = hashlib.sha256()
    for arr in (dataset.features, dataset.labels, dataset.example_ids):
        h.update(np.ascontiguousarray(arr).tobytes())
    h.update("|".join(map(str, dataset.splits)).encode())
    h.update("|".join(map(str, dataset.ood_names)).encode())
    h.update(json.dumps([augmentations, float(sigma_aug), seed]).encode())
    return h.hexdigest()


def precompute_cache(dataset: FeatureDataset, augmentations: int, path, sigma_aug: float = 0.0,
                     seed: int = 0) -> FeatureCache:
    """Write ``augmentations`` jittered copies of every training row and
    un-augmented val/test rows.

    Re-running with identical inputs is a no-op when the existing cache verifies.
    """
    if augmentations < 1:
        raise ConfigError("need at least one augmentation per training example")
    if sigma_aug < 0:
        raise ConfigError("sigma_aug must be non-negative")
    dataset.validate()
    path = Path(path)
    fingerprint = cache_fingerprint(dataset, augmentations, sigma_aug, seed)
    try:
        existing = FeatureCache.open(path)
        if existing.index.get("fingerprint") == fingerprint:
            return existing.verify()
    except DataError:
        pass
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create cache directory {path}: {exc}") from None

    rng = np.random.default_rng([seed, 202])
    tables: dict[str, CacheTable] = {}
    mask = dataset.splits == "train"
    x, y, ids = dataset.features[mask], dataset.labels[mask], dataset.example_ids[mask]
    k = augmentations
    jitter = rng.normal(0.0, 1.0, (k,) + x.shape) * sigma_aug if sigma_aug > 0 else 0.0
    aug_x = (x[None] + jitter).astype(np.float32).reshape(-1, x.shape[1])
    tables["train"] = CacheTable(np.tile(ids, k), np.repeat(np.arange(k), len(ids)),
                                 np.tile(y, k), aug_x)
    for split in ("val", "test-in"):
        m = dataset.splits == split
        if m.any():
            tables[split] = CacheTable(dataset.example_ids[m], np.zeros(m.sum(), dtype=np.int64),
                                       dataset.labels[m], dataset.features[m])
    ood = dataset.ood_sets()
    for name in ood:
        m = (dataset.splits == "test-ood") & (dataset.ood_names == name)
        tables[f"ood-{name}"] = CacheTable(dataset.example_ids[m], np.zeros(m.sum(), dtype=np.int64),
                                           dataset.labels[m], dataset.features[m])

    files = {}
    try:
        for ds, table in tables.items():
            fname = _dataset_file(ds)
            _write_table(path / fname, table)
            files[ds] = {"file": fname, "rows": int(len(table.labels)),
                         "sha256": sha256_file(path / fname)}
        index = {
            "version": BINARY_VERSION,
            "fingerprint": fingerprint,
            "augmentations": k,
            "sigma_aug": float(sigma_aug),
            "seed": seed,
            "dim": dataset.dim,
            "n_classes": dataset.n_classes,
            "ood": list(ood),
            "provenance": dataset.provenance,
            "files": files,
        }
        (path / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise DataError(f"writing feature cache to {path} failed: {exc}") from None
    return FeatureCache(path, index)
