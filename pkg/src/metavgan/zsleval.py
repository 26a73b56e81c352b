"""Zero-shot evaluation through synthesized features.

A trained generator turns class attribute vectors into labeled synthetic
features; a softmax classifier fit on those is then scored on real test
features with mean per-class accuracy (and, for the generalized setting, the
harmonic mean of seen and unseen accuracy).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from . import genmodel as gm
from .datasets import DatasetBundle, DatasetError
from .episodes import ConfigError
from .neural import OptimizerState, adam_step, make_rng

# (attribute vector, count, rng) -> (count, D) features
Generator = Callable[[np.ndarray, int, np.random.Generator], np.ndarray]


def model_generator(cfg: gm.ModelConfig, params: gm.ModelParams) -> Generator:
    def generate(a_c, n, rng):
        return gm.synthesize(cfg, params, rng, a_c, n)
    return generate


@dataclass
class SyntheticDataset:
    features: np.ndarray
    labels: np.ndarray
    class_ids: list[str]
    counts: dict[str, int] = field(default_factory=dict)


def synthesize_dataset(generator: Generator, attrs: Mapping[str, Optional[np.ndarray]], per_class: int,
                       rng: np.random.Generator) -> SyntheticDataset:
    if per_class < 1:
        raise ValueError("per_class must be at least 1")
    feats, labels = [], []
    for c, a_c in attrs.items():
        if a_c is None:
            raise DatasetError(f"missing attribute vector for class {c!r}")
        x = np.asarray(generator(np.asarray(a_c, dtype=np.float64), per_class, rng), dtype=np.float64)
        if x.shape[0] != per_class:
            raise ValueError(f"generator returned {x.shape[0]} rows for class {c!r}, expected {per_class}")
        feats.append(x)
        labels += [c] * per_class
    classes = list(attrs)
    return SyntheticDataset(np.vstack(feats), np.array(labels, dtype=str), classes, {c: per_class for c in classes})


# --------------------------------------------------------------------------
# softmax classifier
# --------------------------------------------------------------------------

@dataclass
class SoftmaxClassifier:
    W: np.ndarray  # (D, C)
    b: np.ndarray  # (C,)
    class_ids: list[str]

    def scores(self, X: np.ndarray) -> np.ndarray:
        return np.asarray(X, dtype=np.float64) @ self.W + self.b

    def predict(self, X: np.ndarray, classes: Optional[Sequence[str]] = None) -> np.ndarray:
        """Arg-max label, restricted to ``classes`` when given."""
        s = self.scores(X)
        ids = np.asarray(self.class_ids)
        if classes is not None:
            pos = {c: i for i, c in enumerate(self.class_ids)}
            missing = [c for c in classes if c not in pos]
            if missing:
                raise ConfigError(f"classifier has no output for classes: {', '.join(missing)}")
            cols = np.array([pos[c] for c in classes])
            s, ids = s[:, cols], ids[cols]
        return ids[np.argmax(s, axis=1)]


def softmax_xent(W: np.ndarray, b: np.ndarray, X: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean cross-entropy for integer targets ``y`` and its gradients."""
    logits = X @ W + b
    logits = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(logits).sum(axis=1))
    n = X.shape[0]
    loss = float(np.mean(log_norm - logits[np.arange(n), y]))
    p = np.exp(logits - log_norm[:, None])
    p[np.arange(n), y] -= 1.0
    p /= n
    return loss, X.T @ p, p.sum(axis=0)


def train_softmax(dataset: SyntheticDataset, epochs: int = 200, lr: float = 0.01, seed: int = 0,
                  init: Optional[tuple[np.ndarray, np.ndarray]] = None) -> SoftmaxClassifier:
    """Full-batch Adam on cross-entropy; weights start at N(0, 0.01^2) from ``seed``."""
    classes = list(dataset.class_ids)
    if len(classes) < 2:
        raise ConfigError("a softmax classifier needs at least two classes")
    pos = {c: i for i, c in enumerate(classes)}
    y = np.array([pos[c] for c in dataset.labels])
    X = dataset.features
    D, C = X.shape[1], len(classes)
    if init is None:
        rng = np.random.default_rng(seed)
        W = 0.01 * rng.standard_normal((D, C))
        b = np.zeros(C)
    else:
        W, b = (np.array(v, dtype=np.float64) for v in init)
    theta = np.concatenate([W.ravel(), b])
    opt = OptimizerState.adam(theta.size, lr)
    for _ in range(epochs):
        _, gW, gb = softmax_xent(theta[:D * C].reshape(D, C), theta[D * C:], X, y)
        theta, opt = adam_step(opt, theta, np.concatenate([gW.ravel(), gb]))
    return SoftmaxClassifier(theta[:D * C].reshape(D, C).copy(), theta[D * C:].copy(), classes)


# --------------------------------------------------------------------------
# metrics
# --------------------------------------------------------------------------

def per_class_accuracy(classifier, X: np.ndarray, labels: np.ndarray,
                       classes: Sequence[str]) -> tuple[float, dict[str, Optional[float]]]:
    """Unweighted mean over classes of per-class accuracy.

    ``classifier`` is a :class:`SoftmaxClassifier` or any callable mapping
    ``(X, classes)`` to predicted labels. Classes with no test rows get
    ``None`` in the table and are left out of the mean.
    """
    classes = list(classes)
    if not classes:
        raise ConfigError("empty evaluation class list")
    labels = np.asarray(labels, dtype=str)
    if labels.size == 0:
        raise ValueError("no test rows")
    outside = sorted(set(labels.tolist()) - set(classes))
    if outside:
        raise ConfigError(f"test labels outside the evaluation classes: {', '.join(outside)}")
    pred = classifier.predict(X, classes) if hasattr(classifier, "predict") else classifier(X, classes)
    pred = np.asarray(pred, dtype=str)
    table: dict[str, Optional[float]] = {}
    for c in classes:
        mask = labels == c
        table[c] = float(np.mean(pred[mask] == c)) if mask.any() else None
    scored = [v for v in table.values() if v is not None]
    return float(np.mean(scored)), table


def harmonic_mean(seen: float, unseen: float) -> float:
    return 0.0 if seen + unseen == 0 else 2.0 * seen * unseen / (seen + unseen)


@dataclass
class GzslMetrics:
    seen_acc: float
    unseen_acc: float
    harmonic: float
    table: dict[str, Optional[float]] = field(default_factory=dict)

    @classmethod
    def from_accuracies(cls, seen: float, unseen: float, table=None) -> "GzslMetrics":
        return cls(seen, unseen, harmonic_mean(seen, unseen), dict(table or {}))


def evaluate_zsl(generator: Generator, bundle: DatasetBundle, per_class: int = 300, seed: int = 0,
                 epochs: int = 200, lr: float = 0.01) -> tuple[float, dict[str, Optional[float]]]:
    """Mean per-class accuracy on unseen test rows, predicting among unseen classes only."""
    unseen = list(bundle.unseen_classes)
    if not unseen or bundle.test_unseen.size == 0:
        raise DatasetError("bundle has no unseen test rows")
    X = bundle.features[bundle.test_unseen]
    y = bundle.labels[bundle.test_unseen]
    if len(unseen) == 1:
        # the label space has one element, every prediction is right
        only = unseen[0]
        return per_class_accuracy(lambda X_, cls: np.full(len(X_), only), X, y, unseen)
    data = synthesize_dataset(generator, bundle.attr_map(unseen), per_class, make_rng(seed, 3))
    clf = train_softmax(data, epochs, lr, seed)
    return per_class_accuracy(clf, X, y, unseen)


def evaluate_gzsl(generator: Generator, bundle: DatasetBundle, per_class: int = 300, seed: int = 0,
                  epochs: int = 200, lr: float = 0.01) -> GzslMetrics:
    """Seen/unseen accuracy and their harmonic mean over the joint label space."""
    if bundle.test_seen.size == 0 or bundle.test_unseen.size == 0:
        raise DatasetError("generalized evaluation needs both seen and unseen test rows")
    joint = list(bundle.seen_classes) + list(bundle.unseen_classes)
    data = synthesize_dataset(generator, bundle.attr_map(joint), per_class, make_rng(seed, 3))
    clf = train_softmax(data, epochs, lr, seed)
    S, t_s = per_class_accuracy(clf, bundle.features[bundle.test_seen], bundle.labels[bundle.test_seen], joint)
    U, t_u = per_class_accuracy(clf, bundle.features[bundle.test_unseen], bundle.labels[bundle.test_unseen], joint)
    table = {c: t_s[c] for c in bundle.seen_classes}
    table.update({c: t_u[c] for c in bundle.unseen_classes})
    return GzslMetrics.from_accuracies(S, U, table)


# --------------------------------------------------------------------------
# reports
# --------------------------------------------------------------------------

def format_triple(unseen: float, seen: float, harmonic: float) -> str:
    """``U / S / H`` in percent with one decimal."""
    return f"{100 * unseen:.1f} / {100 * seen:.1f} / {100 * harmonic:.1f}"


def write_report(path, metrics: Mapping[str, float], table: Mapping[str, Optional[float]]) -> str:
    lines = [f"{k}\t{v!r}" for k, v in metrics.items()]
    lines.append("")
    lines.append("class\taccuracy")
    for c, v in table.items():
        lines.append(f"{c}\t{'excluded' if v is None else repr(v)}")
    text = "\n".join(lines) + "\n"
    with open(path, "w") as fh:
        fh.write(text)
    return text
