"""KL divergences, label marginals, group accuracy and noise-detection scores."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ContractError, DegenerateSplitError

log = logging.getLogger(__name__)


def kl_bernoulli(p: float, q: float) -> float:
    if not (0.0 < p < 1.0 and 0.0 < q < 1.0):
        raise ContractError(f"kl_bernoulli needs p, q in (0, 1), got {p}, {q}")
    kl = p * np.log(p / q) + (1.0 - p) * np.log((1.0 - p) / (1.0 - q))
    return float(max(kl, 0.0))  # rounding can dip below zero when p == q


def smooth(dist, eps: float) -> np.ndarray:
    d = np.asarray(dist, dtype=float) + eps
    return d / d.sum()


def kl_categorical(p, q, eps: float = 1e-8) -> float:
    """KL(p || q) after adding eps to every cell of both and renormalizing."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape or p.ndim != 1:
        raise ContractError(f"kl_categorical shape mismatch {p.shape} vs {q.shape}")
    if np.any(p < 0) or np.any(q < 0):
        raise ContractError("kl_categorical needs non-negative entries")
    if abs(p.sum() - 1.0) > 1e-6 or abs(q.sum() - 1.0) > 1e-6:
        raise ContractError("kl_categorical inputs must sum to 1")
    ps, qs = smooth(p, eps), smooth(q, eps)
    return float(max(np.sum(ps * np.log(ps / qs)), 0.0))


def label_frequencies(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    return np.bincount(labels, minlength=num_classes).astype(float) / len(labels)


def conditional_label_marginals(probs, labels, num_classes: int, eps: float = 1e-12):
    """P(y|z=1), P(y|z=0) by Bayes' rule from soft split probabilities, and P(y)."""
    probs = np.asarray(probs, dtype=float)
    labels = np.asarray(labels)
    if probs.shape != labels.shape:
        raise ContractError(f"{len(probs)} probs vs {len(labels)} labels")
    if len(labels) and (labels.min() < 0 or labels.max() >= num_classes):
        raise ContractError(f"labels must lie in [0, {num_classes})")
    s1 = probs.sum()
    s0 = (1.0 - probs).sum()
    if s1 < eps or s0 < eps:
        raise DegenerateSplitError("one side of the soft split has no mass")
    p1 = np.bincount(labels, weights=probs, minlength=num_classes) / s1
    p0 = np.bincount(labels, weights=1.0 - probs, minlength=num_classes) / s0
    return p1, p0, label_frequencies(labels, num_classes)


def total_variation(p, q) -> float:
    return float(0.5 * np.abs(np.asarray(p, float) - np.asarray(q, float)).sum())


@dataclass
class GroupStats:
    per_group: dict
    worst_group_key: object
    worst_group_accuracy: float
    average_accuracy: float

    def to_json(self) -> dict:
        return {
            "average_accuracy": self.average_accuracy,
            "worst_group_accuracy": self.worst_group_accuracy,
            "worst_group": _key_str(self.worst_group_key),
            "per_group": {_key_str(k): v for k, v in self.per_group.items()},
        }


def _key_str(key) -> str:
    if isinstance(key, tuple):
        return ",".join(str(int(k)) for k in key)
    return str(key)


def worst_group_accuracy(predictions, labels, group_keys, losses=None) -> GroupStats:
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ContractError("worst_group_accuracy on empty input")
    if not (len(predictions) == len(labels) == len(group_keys)):
        raise ContractError("predictions, labels and group keys differ in length")
    correct = predictions == labels
    keys = [tuple(int(v) for v in k) if isinstance(k, (tuple, list, np.ndarray)) else k
            for k in group_keys]
    per_group = {}
    for key in sorted(set(keys)):
        idx = np.array([k == key for k in keys])
        entry = {"count": int(idx.sum()), "accuracy": float(correct[idx].mean())}
        if losses is not None:
            entry["mean_loss"] = float(np.asarray(losses)[idx].mean())
        per_group[key] = entry
    worst = min(per_group, key=lambda k: (per_group[k]["accuracy"], k))
    return GroupStats(per_group, worst, per_group[worst]["accuracy"], float(correct.mean()))


@dataclass
class NoiseReport:
    n_polluted: int
    n_test_split: int
    precision: float
    recall: float
    oracle_precision: float
    oracle_recall: float
    recall_undefined: bool = False

    def to_json(self) -> dict:
        return asdict(self)


def noise_precision_recall(assignment, polluted_mask):
    """Precision and recall of the test side (z == 0) as a polluted-label detector.

    With no polluted labels at all recall is 0/0; it is reported as 1.0.
    """
    z = np.asarray(assignment)
    polluted = np.asarray(polluted_mask, dtype=bool)
    if z.shape != polluted.shape:
        raise ContractError("assignment and polluted mask differ in length")
    test = z == 0
    n_test = int(test.sum())
    if n_test == 0:
        raise DegenerateSplitError("test split is empty")
    hits = int((test & polluted).sum())
    n_polluted = int(polluted.sum())
    if n_polluted == 0:
        log.warning("no polluted labels present; recall reported as 1.0")
        return hits / n_test, 1.0
    return hits / n_test, hits / n_polluted


def oracle_precision_recall(n_polluted: int, n_test_split: int):
    if n_test_split < 1 or n_polluted < 0:
        raise ContractError(f"oracle needs n_test_split >= 1, n_polluted >= 0")
    if n_polluted <= n_test_split:
        return n_polluted / n_test_split, 1.0
    return 1.0, n_test_split / n_polluted


def noise_report(assignment, polluted_mask) -> NoiseReport:
    polluted = np.asarray(polluted_mask, dtype=bool)
    precision, recall = noise_precision_recall(assignment, polluted)
    n_test = int((np.asarray(assignment) == 0).sum())
    n_polluted = int(polluted.sum())
    oracle_p, oracle_r = oracle_precision_recall(n_polluted, n_test)
    return NoiseReport(n_polluted, n_test, precision, recall, oracle_p, oracle_r,
                       recall_undefined=n_polluted == 0)
