"""Few-shot class pools and episodic task sampling.

A task holds a support set and a query set, each N-way K-shot. In the
default ``disjoint`` mode the two class sets never intersect, so the query
set always asks the model about classes it did not adapt on. ``standard``
mode draws query classes from the support classes instead.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .datasets import DatasetBundle, DatasetError

DISJOINT = "disjoint"
STANDARD = "standard"


class ConfigError(ValueError):
    pass


@dataclass
class ClassPool:
    features: np.ndarray
    attributes: dict[str, np.ndarray]
    indices: dict[str, np.ndarray]
    full_indices: Optional[dict[str, np.ndarray]] = None

    def __post_init__(self):
        for c, idx in self.indices.items():
            if len(idx) < 1:
                raise DatasetError(f"class {c} has no examples in the pool")
            if c not in self.attributes:
                raise DatasetError(f"class {c} has no attribute vector")

    @property
    def class_ids(self) -> list[str]:
        return list(self.indices)

    @property
    def n_examples(self) -> int:
        return sum(len(v) for v in self.indices.values())

    def rows(self) -> np.ndarray:
        return np.concatenate([self.indices[c] for c in self.class_ids])


def _seen_rows(bundle: DatasetBundle) -> dict[str, np.ndarray]:
    by_class = bundle.rows_by_class(bundle.train_rows())
    return {c: by_class.get(c, np.zeros(0, dtype=np.int64)) for c in bundle.seen_classes}


def subsample_fewshot(bundle: DatasetBundle, shots: Optional[int], seed: int) -> ClassPool:
    """Keep ``shots`` random training rows per seen class (all rows if None)."""
    full = _seen_rows(bundle)
    rng = np.random.default_rng(seed)
    picked = {}
    for c, rows in full.items():
        if shots is None:
            picked[c] = rows.copy()
            continue
        if len(rows) < shots:
            raise DatasetError(f"class {c} has {len(rows)} training examples, fewer than shots={shots}")
        picked[c] = np.sort(rng.choice(rows, size=shots, replace=False))
    return ClassPool(bundle.features, bundle.attr_map(bundle.seen_classes), picked, full)


def save_selection(pool: ClassPool, path) -> None:
    """One ``class_id: row row row`` line per class."""
    lines = [f"{c}: " + " ".join(str(int(i)) for i in pool.indices[c]) for c in pool.class_ids]
    Path(path).write_text("\n".join(lines) + "\n")


def load_selection(bundle: DatasetBundle, path) -> ClassPool:
    picked = {}
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        cid, _, rest = line.partition(":")
        cid = cid.strip()
        if cid not in bundle.seen_classes:
            raise DatasetError(f"selection file names {cid!r}, which is not a seen class")
        picked[cid] = np.array([int(t) for t in rest.split()], dtype=np.int64)
    bad = [c for c, rows in picked.items() if np.any(bundle.labels[rows] != c)]
    if bad:
        raise DatasetError(f"selection rows do not belong to their class: {', '.join(bad)}")
    return ClassPool(bundle.features, bundle.attr_map(list(picked)), picked, _seen_rows(bundle))


@dataclass(frozen=True)
class EpisodeConfig:
    n_way_tr: int = 10
    k_shot_tr: int = 5
    n_way_v: int = 10
    k_shot_v: int = 3
    seed: int = 0
    val_from_full: bool = False

    def __post_init__(self):
        if min(self.n_way_tr, self.n_way_v, self.k_shot_tr, self.k_shot_v) < 1:
            raise ConfigError("ways and shots must be at least 1")


@dataclass
class Task:
    support_x: np.ndarray
    support_a: np.ndarray
    support_labels: np.ndarray
    query_x: np.ndarray
    query_a: np.ndarray
    query_labels: np.ndarray
    with_replacement: bool = False

    @property
    def support(self) -> tuple[np.ndarray, np.ndarray]:
        return self.support_x, self.support_a

    @property
    def query(self) -> tuple[np.ndarray, np.ndarray]:
        return self.query_x, self.query_a

    @property
    def support_classes(self) -> set[str]:
        return set(self.support_labels.tolist())

    @property
    def query_classes(self) -> set[str]:
        return set(self.query_labels.tolist())


def _take(rng: np.random.Generator, rows: np.ndarray, k: int) -> tuple[np.ndarray, bool]:
    if len(rows) >= k:
        return rng.choice(rows, size=k, replace=False), False
    return rng.choice(rows, size=k, replace=True), True


def _assemble(pool: ClassPool, classes, rows_per_class) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    rows = np.concatenate(rows_per_class)
    labels = np.concatenate([[c] * len(r) for c, r in zip(classes, rows_per_class)]).astype(str)
    attrs = np.vstack([np.repeat(pool.attributes[c][None, :], len(r), axis=0) for c, r in zip(classes, rows_per_class)])
    return pool.features[rows], attrs, labels


def sample_task(pool: ClassPool, cfg: EpisodeConfig, rng: np.random.Generator, mode: str = DISJOINT) -> Task:
    classes = pool.class_ids
    if mode == DISJOINT:
        if cfg.n_way_tr + cfg.n_way_v > len(classes):
            raise ConfigError(f"disjoint tasks need {cfg.n_way_tr + cfg.n_way_v} classes, pool has {len(classes)}")
    elif mode == STANDARD:
        if cfg.n_way_tr > len(classes):
            raise ConfigError(f"tasks need {cfg.n_way_tr} classes, pool has {len(classes)}")
        if cfg.n_way_v > cfg.n_way_tr:
            raise ConfigError("standard split draws query classes from the support classes: n_way_v <= n_way_tr")
    else:
        raise ConfigError(f"unknown split mode {mode!r}")

    perm = rng.permutation(len(classes))
    sup_cls = [classes[i] for i in perm[:cfg.n_way_tr]]
    replaced = False
    sup_rows = []
    if mode == DISJOINT:
        qry_cls = [classes[i] for i in perm[cfg.n_way_tr:cfg.n_way_tr + cfg.n_way_v]]
        for c in sup_cls:
            r, rep = _take(rng, pool.indices[c], cfg.k_shot_tr)
            sup_rows.append(r)
            replaced |= rep
        qry_rows = []
        source = pool.full_indices if (cfg.val_from_full and pool.full_indices) else pool.indices
        for c in qry_cls:
            r, rep = _take(rng, source[c], cfg.k_shot_v)
            qry_rows.append(r)
            replaced |= rep
    else:
        shuffled = {}
        for c in sup_cls:
            rows = rng.permutation(pool.indices[c])
            shuffled[c] = rows
            if len(rows) >= cfg.k_shot_tr:
                sup_rows.append(rows[:cfg.k_shot_tr])
            else:
                sup_rows.append(rng.choice(rows, size=cfg.k_shot_tr, replace=True))
                replaced = True
        qry_cls = [sup_cls[i] for i in rng.permutation(len(sup_cls))[:cfg.n_way_v]]
        qry_rows = []
        for c in qry_cls:
            rest = shuffled[c][cfg.k_shot_tr:]
            if len(rest) >= cfg.k_shot_v:
                qry_rows.append(rest[:cfg.k_shot_v])
            else:
                # not enough held-out rows: top up from the whole class
                extra = rng.choice(shuffled[c], size=cfg.k_shot_v - len(rest), replace=True)
                qry_rows.append(np.concatenate([rest, extra]))
                replaced = True

    sx, sa, sl = _assemble(pool, sup_cls, sup_rows)
    qx, qa, ql = _assemble(pool, qry_cls, qry_rows)
    return Task(sx, sa, sl, qx, qa, ql, replaced)


def sample_task_batch(pool: ClassPool, cfg: EpisodeConfig, rng: np.random.Generator, batch_size: int,
                      mode: str = DISJOINT) -> list[Task]:
    if batch_size < 1:
        raise ConfigError("batch_size must be at least 1")
    return [sample_task(pool, cfg, rng, mode) for _ in range(batch_size)]


def append_episode_log(path, step: int, tasks: list[Task]) -> None:
    """Audit trail: ``step  task  support-classes  query-classes`` per task."""
    with open(path, "a") as fh:
        for i, t in enumerate(tasks):
            fh.write(f"{step}\t{i}\t{','.join(sorted(t.support_classes))}\t{','.join(sorted(t.query_classes))}\n")
