"""Feature-dataset bundles: validation, on-disk format, synthetic benchmark.

On-disk layout of a bundle directory::

    meta.json        {"format_version", "name", "feature_dim", "attr_dim",
                      "classes", "seen_classes", "unseen_classes",
                      "test_seen", "test_unseen"}   (test_* are row ids)
    features.csv     header ``row_id,label,f0,...,f{D-1}``; one row per example
    attributes.csv   header ``class_id,a0,...,a{d_a-1}``; one row per class

Reals are written with 9 significant digits.

Exporting a standard benchmark (e.g. the ResNet-101 ``res101.mat`` /
``att_splits.mat`` pair) means building the arrays (features, string labels,
per-class attributes, seen/unseen class lists and test row ids) and passing
them to :func:`bundle_from_arrays` followed by :func:`save_bundle`.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

FORMAT_VERSION = 1
META_FILE = "meta.json"
FEATURES_FILE = "features.csv"
ATTRIBUTES_FILE = "attributes.csv"
DIGITS = 9


class DatasetError(ValueError):
    pass


class MissingFileError(DatasetError):
    pass


class DimensionMismatchError(DatasetError):
    pass


class UnknownClassError(DatasetError):
    pass


class SplitOverlapError(DatasetError):
    pass


class SplitError(DatasetError):
    pass


def quantize(values: np.ndarray) -> np.ndarray:
    """Round to the precision of the text format so save/load is exact."""
    values = np.asarray(values, dtype=np.float64)
    flat = [float(f"{v:.{DIGITS}g}") for v in values.ravel()]
    return np.array(flat, dtype=np.float64).reshape(values.shape)


@dataclass
class DatasetBundle:
    name: str
    features: np.ndarray  # (N, D)
    labels: np.ndarray  # (N,) class ids as str
    class_ids: list[str]
    attributes: np.ndarray  # (len(class_ids), d_a)
    seen_classes: list[str]
    unseen_classes: list[str]
    test_seen: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    test_unseen: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=str)
        self.attributes = np.asarray(self.attributes, dtype=np.float64)
        self.class_ids = [str(c) for c in self.class_ids]
        self.seen_classes = [str(c) for c in self.seen_classes]
        self.unseen_classes = [str(c) for c in self.unseen_classes]
        self.test_seen = np.asarray(self.test_seen, dtype=np.int64)
        self.test_unseen = np.asarray(self.test_unseen, dtype=np.int64)
        self._index = {c: i for i, c in enumerate(self.class_ids)}

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def attr_dim(self) -> int:
        return self.attributes.shape[1]

    def attr(self, class_id: str) -> np.ndarray:
        try:
            return self.attributes[self._index[class_id]]
        except KeyError:
            raise UnknownClassError(f"no attribute vector for class {class_id!r}") from None

    def attr_map(self, classes: Sequence[str]) -> dict[str, np.ndarray]:
        return {c: self.attr(c) for c in classes}

    def train_rows(self) -> np.ndarray:
        """Rows of seen classes that are not held out for testing."""
        held = np.zeros(len(self.labels), dtype=bool)
        held[self.test_seen] = True
        held[self.test_unseen] = True
        seen = np.isin(self.labels, self.seen_classes)
        return np.flatnonzero(seen & ~held)

    def rows_by_class(self, rows: np.ndarray) -> dict[str, np.ndarray]:
        out: dict[str, list[int]] = {}
        for r in rows:
            out.setdefault(str(self.labels[r]), []).append(int(r))
        return {c: np.array(v, dtype=np.int64) for c, v in out.items()}

    def validate(self) -> "DatasetBundle":
        if self.features.ndim != 2 or self.attributes.ndim != 2:
            raise DimensionMismatchError("features and attributes must be 2-D")
        if len(self.labels) != self.features.shape[0]:
            raise DimensionMismatchError(f"{len(self.labels)} labels for {self.features.shape[0]} feature rows")
        if len(self.class_ids) != self.attributes.shape[0]:
            raise DimensionMismatchError(f"{len(self.class_ids)} classes but {self.attributes.shape[0]} attribute rows")
        if len(set(self.class_ids)) != len(self.class_ids):
            raise DatasetError("duplicate class ids")
        if not (np.all(np.isfinite(self.features)) and np.all(np.isfinite(self.attributes))):
            raise DatasetError("non-finite feature or attribute values")
        known = set(self.class_ids)
        unknown = sorted(set(self.labels.tolist()) - known)
        if unknown:
            raise UnknownClassError(f"labels reference classes without attributes: {', '.join(unknown)}")
        for lst, what in ((self.seen_classes, "seen"), (self.unseen_classes, "unseen")):
            bad = sorted(set(lst) - known)
            if bad:
                raise UnknownClassError(f"{what} list names unknown classes: {', '.join(bad)}")
        overlap = sorted(set(self.seen_classes) & set(self.unseen_classes))
        if overlap:
            raise SplitOverlapError(f"classes listed as both seen and unseen: {', '.join(overlap)}")
        n = len(self.labels)
        for idx, what, allowed in ((self.test_seen, "test_seen", self.seen_classes),
                                   (self.test_unseen, "test_unseen", self.unseen_classes)):
            if idx.size and (idx.min() < 0 or idx.max() >= n):
                raise SplitError(f"{what} contains out-of-range row ids")
            wrong = sorted(set(self.labels[idx].tolist()) - set(allowed))
            if wrong:
                raise SplitError(f"{what} rows belong to classes outside the split: {', '.join(wrong)}")
        unseen_rows = np.flatnonzero(np.isin(self.labels, self.unseen_classes))
        leaked = np.setdiff1d(unseen_rows, self.test_unseen)
        if leaked.size:
            raise SplitError(f"{leaked.size} unseen-class rows are not in the test split")
        return self


def bundle_from_arrays(name: str, features, labels, attributes: Mapping[str, np.ndarray],
                       seen: Sequence[str], unseen: Sequence[str], test_seen=(), test_unseen=None) -> DatasetBundle:
    """Build and validate a bundle; ``test_unseen`` defaults to every unseen row."""
    labels = np.asarray(labels, dtype=str)
    class_ids = list(attributes.keys())
    attr = np.vstack([np.asarray(attributes[c], dtype=np.float64) for c in class_ids])
    if test_unseen is None:
        test_unseen = np.flatnonzero(np.isin(labels, [str(c) for c in unseen]))
    return DatasetBundle(name, features, labels, class_ids, attr, list(seen), list(unseen),
                         np.asarray(test_seen, dtype=np.int64), np.asarray(test_unseen, dtype=np.int64)).validate()


# --------------------------------------------------------------------------
# disk format
# --------------------------------------------------------------------------

def _fmt(v: float) -> str:
    return f"{v:.{DIGITS}g}"


def save_bundle(bundle: DatasetBundle, dir_path) -> None:
    bundle.validate()
    d = Path(dir_path)
    try:
        d.mkdir(parents=True, exist_ok=True)
        meta = {
            "format_version": FORMAT_VERSION,
            "name": bundle.name,
            "feature_dim": bundle.feature_dim,
            "attr_dim": bundle.attr_dim,
            "classes": bundle.class_ids,
            "seen_classes": bundle.seen_classes,
            "unseen_classes": bundle.unseen_classes,
            "test_seen": bundle.test_seen.tolist(),
            "test_unseen": bundle.test_unseen.tolist(),
        }
        (d / META_FILE).write_text(json.dumps(meta, indent=1) + "\n")
        write_features_csv(d / FEATURES_FILE, bundle.labels, bundle.features)
        with open(d / ATTRIBUTES_FILE, "w", newline="") as fh:
            fh.write(",".join(["class_id"] + [f"a{j}" for j in range(bundle.attr_dim)]) + "\n")
            for c, row in zip(bundle.class_ids, bundle.attributes):
                fh.write(f"{c}," + ",".join(map(_fmt, row)) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write bundle to {d}: {exc}") from exc


def _read_table(path: Path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DatasetError(f"{path} is empty")
    return rows[0], rows[1:]


def write_features_csv(path, labels: Sequence[str], features: np.ndarray) -> None:
    """Write labeled rows in the ``features.csv`` schema."""
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    with open(path, "w", newline="") as fh:
        fh.write(",".join(["row_id", "label"] + [f"f{j}" for j in range(features.shape[1])]) + "\n")
        for i, (label, row) in enumerate(zip(labels, features)):
            fh.write(f"{i},{label}," + ",".join(map(_fmt, row)) + "\n")


def read_features_csv(path, feature_dim: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """(labels, features) from a ``features.csv`` file; checks width against ``feature_dim`` when given."""
    name = Path(path).name
    header, rows = _read_table(Path(path))
    D = len(header) - 2 if feature_dim is None else feature_dim
    if len(header) != D + 2:
        raise DimensionMismatchError(f"{name} has {len(header) - 2} feature columns, meta.json says {D}")
    labels = []
    feats = np.empty((len(rows), D))
    for i, row in enumerate(rows):
        if len(row) != D + 2:
            raise DimensionMismatchError(f"{name} row {i} has {len(row) - 2} values, expected {D}")
        if int(row[0]) != i:
            raise DatasetError(f"{name} row ids must be 0..N-1 in order (row {i} has id {row[0]})")
        labels.append(row[1])
        feats[i] = [float(v) for v in row[2:]]
    return np.array(labels, dtype=str), feats


def load_bundle(dir_path) -> DatasetBundle:
    d = Path(dir_path)
    for fname in (META_FILE, FEATURES_FILE, ATTRIBUTES_FILE):
        if not (d / fname).is_file():
            raise MissingFileError(f"bundle file missing: {d / fname}")
    meta = json.loads((d / META_FILE).read_text())
    D, d_a = int(meta["feature_dim"]), int(meta["attr_dim"])

    labels, feats = read_features_csv(d / FEATURES_FILE, D)

    header, rows = _read_table(d / ATTRIBUTES_FILE)
    if len(header) != d_a + 1:
        raise DimensionMismatchError(f"attributes.csv has {len(header) - 1} columns, meta.json says {d_a}")
    attrs = {}
    for row in rows:
        if len(row) != d_a + 1:
            raise DimensionMismatchError(f"attributes.csv row for {row[0]} has {len(row) - 1} values, expected {d_a}")
        attrs[row[0]] = np.array([float(v) for v in row[1:]])
    classes = [str(c) for c in meta["classes"]]
    missing = [c for c in classes if c not in attrs]
    if missing:
        raise UnknownClassError(f"classes without an attribute row: {', '.join(missing)}")
    attr_matrix = np.vstack([attrs[c] for c in classes]) if classes else np.zeros((0, d_a))
    return DatasetBundle(meta["name"], feats, labels, classes, attr_matrix,
                         meta["seen_classes"], meta["unseen_classes"],
                         np.array(meta["test_seen"], dtype=np.int64),
                         np.array(meta["test_unseen"], dtype=np.int64)).validate()


# --------------------------------------------------------------------------
# synthetic benchmark
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticBenchSpec:
    n_seen: int = 8
    n_unseen: int = 4
    feature_dim: int = 64
    attr_dim: int = 16
    cluster_std: float = 0.5
    examples_per_class: int = 30
    test_per_seen_class: int = 10
    seed: int = 0
    mean_rank: int = 4
    mean_scale: float = 1.0
    attr_noise: float = 0.05

    def validate(self) -> None:
        if self.n_seen < 1 or self.n_unseen < 0:
            raise ValueError("need at least one seen class and a non-negative unseen count")
        if self.feature_dim < 1 or self.attr_dim < 1:
            raise ValueError("feature_dim and attr_dim must be positive")
        if self.cluster_std < 0:
            raise ValueError("cluster_std must be non-negative")
        if not 0 <= self.test_per_seen_class < self.examples_per_class:
            raise ValueError("test_per_seen_class must leave at least one training example per class")
        if not 1 <= self.mean_rank <= min(self.feature_dim, self.attr_dim):
            raise ValueError("mean_rank must lie in [1, min(feature_dim, attr_dim)]")


def make_synthetic(spec: SyntheticBenchSpec = SyntheticBenchSpec()) -> tuple[DatasetBundle, dict[str, np.ndarray]]:
    """Gaussian clusters whose class means are linearly predictable from attributes.

    Class means live in a random ``mean_rank``-dimensional subspace, and each
    attribute vector is a fixed random projection of its class mean plus a
    little noise, so a map learned on seen classes transfers to unseen ones.
    Returns the bundle and the true class means.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    n_cls = spec.n_seen + spec.n_unseen
    basis = rng.standard_normal((spec.mean_rank, spec.feature_dim)) * spec.mean_scale
    codes = rng.standard_normal((n_cls, spec.mean_rank))
    means = quantize(codes @ basis)
    proj = rng.standard_normal((spec.feature_dim, spec.attr_dim)) / np.sqrt(spec.feature_dim)
    attrs = quantize(means @ proj + spec.attr_noise * rng.standard_normal((n_cls, spec.attr_dim)))

    class_ids = [f"c{i}" for i in range(n_cls)]
    feats, labels, test_seen, test_unseen = [], [], [], []
    row = 0
    for k, cid in enumerate(class_ids):
        n = spec.examples_per_class
        feats.append(means[k] + spec.cluster_std * rng.standard_normal((n, spec.feature_dim)))
        labels += [cid] * n
        if k < spec.n_seen:
            test_seen += list(range(row + n - spec.test_per_seen_class, row + n))
        else:
            test_unseen += list(range(row, row + n))
        row += n
    bundle = DatasetBundle(
        name=f"synthetic-s{spec.seed}",
        features=quantize(np.vstack(feats)),
        labels=np.array(labels),
        class_ids=class_ids,
        attributes=attrs,
        seen_classes=class_ids[:spec.n_seen],
        unseen_classes=class_ids[spec.n_seen:],
        test_seen=np.array(test_seen, dtype=np.int64),
        test_unseen=np.array(test_unseen, dtype=np.int64),
    ).validate()
    return bundle, {c: means[k] for k, c in enumerate(class_ids)}


def nearest_mean_predict(features: np.ndarray, means: Mapping[str, np.ndarray], classes: Sequence[str]) -> np.ndarray:
    M = np.vstack([means[c] for c in classes])
    d2 = ((features[:, None, :] - M[None, :, :]) ** 2).sum(axis=2)
    return np.asarray(classes)[np.argmin(d2, axis=1)]
