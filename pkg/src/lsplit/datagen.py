"""Datasets, synthetic generators, label-noise injection and CSV I/O."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, ParseError

AUDIT_COLUMNS = ("spurious", "polluted")


@dataclass
class Dataset:
    ids: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.features = np.asarray(self.features, dtype=float)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = len(self.ids)
        if self.features.ndim != 2 or self.features.shape[0] != n or len(self.labels) != n:
            raise ContractError("ids, features and labels disagree in length")
        if self.features.shape[1] < 1:
            raise ContractError("feature dimension must be >= 1")
        if len(np.unique(self.ids)) != n:
            raise ContractError("example ids are not unique")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ContractError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> Dataset:
        idx = np.asarray(idx)
        return Dataset(self.ids[idx], self.features[idx], self.labels[idx], self.num_classes)

    def equals(self, other: Dataset) -> bool:
        return (self.num_classes == other.num_classes
                and np.array_equal(self.ids, other.ids)
                and np.array_equal(self.features, other.features)
                and np.array_equal(self.labels, other.labels))


@dataclass
class GroundTruth:
    """Audit-only annotations. Never handed to the splitting algorithm."""

    spurious: np.ndarray | None = None
    polluted: np.ndarray | None = None
    minority: np.ndarray | None = field(default=None)

    def subset(self, idx) -> GroundTruth:
        pick = lambda a: None if a is None else a[np.asarray(idx)]  # noqa: E731
        return GroundTruth(pick(self.spurious), pick(self.polluted), pick(self.minority))


@dataclass
class SpuriousSpec:
    n: int = 2000
    d_core: int = 2
    d_spurious: int = 2
    d_noise: int = 6
    rho: float = 0.9
    core_noise_std: float = 2.0
    seed: int = 0

    def validate(self):
        if self.n < 4:
            raise ConfigError(f"n must be >= 4, got {self.n}")
        if min(self.d_core, self.d_spurious, self.d_noise) < 1:
            raise ConfigError("feature block sizes must be >= 1")
        if not 0.5 <= self.rho <= 1.0:
            raise ConfigError(f"rho must lie in [0.5, 1], got {self.rho}")
        if self.core_noise_std < 0:
            raise ConfigError("core_noise_std must be non-negative")


def gen_spurious(spec: SpuriousSpec):
    """Binary task with a noisy core block and a rho-predictive, nearly noiseless shortcut block.

    Column order: core features, spurious features, pure-noise features.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    n = spec.n
    y = rng.integers(0, 2, size=n)
    agree = rng.random(n) < spec.rho
    a = np.where(agree, y, 1 - y)
    core = (2 * y - 1)[:, None] + rng.normal(0.0, spec.core_noise_std, size=(n, spec.d_core))
    spur = (2 * a - 1)[:, None] + rng.normal(0.0, 0.1, size=(n, spec.d_spurious))
    noise = rng.normal(0.0, 1.0, size=(n, spec.d_noise))
    x = np.hstack([core, spur, noise])
    data = Dataset(np.arange(n), x, y, 2)
    return data, GroundTruth(spurious=a, minority=a != y)


def gen_blobs(n=5000, num_classes=10, dim=10, separation=6.0, seed=0) -> Dataset:
    """Isotropic unit-variance Gaussian blobs, class means spread on a scaled simplex-like frame."""
    if n < num_classes or num_classes < 2 or dim < 1:
        raise ConfigError("gen_blobs needs n >= num_classes >= 2 and dim >= 1")
    rng = np.random.default_rng(seed)
    means = np.zeros((num_classes, dim))
    if dim >= num_classes:
        means[np.arange(num_classes), np.arange(num_classes)] = separation / np.sqrt(2.0)
    else:
        means = rng.normal(0.0, separation / np.sqrt(2 * dim), size=(num_classes, dim))
    y = rng.integers(0, num_classes, size=n)
    x = means[y] + rng.normal(0.0, 1.0, size=(n, dim))
    return Dataset(np.arange(n), x, y, num_classes)


def inject_label_noise(dataset: Dataset, eta: float, num_classes: int | None = None, seed: int = 0):
    """Keep each label with prob 1 - eta, else move it to one of the other classes uniformly."""
    c = dataset.num_classes if num_classes is None else int(num_classes)
    if not 0.0 <= eta < 1.0:
        raise ConfigError(f"eta must lie in [0, 1), got {eta}")
    if c < 2:
        raise ConfigError("label noise needs at least 2 classes")
    if len(dataset) and dataset.labels.max() >= c:
        raise ConfigError(f"labels exceed num_classes={c}")
    rng = np.random.default_rng(seed)
    flip = rng.random(len(dataset)) < eta
    offset = rng.integers(1, c, size=len(dataset))
    noisy = np.where(flip, (dataset.labels + offset) % c, dataset.labels)
    out = Dataset(dataset.ids.copy(), dataset.features.copy(), noisy, c)
    return out, noisy != dataset.labels


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def save_dataset(dataset: Dataset, path, ground_truth: GroundTruth | None = None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    audit = {}
    if ground_truth is not None:
        if ground_truth.spurious is not None:
            audit["spurious"] = ground_truth.spurious
        if ground_truth.polluted is not None:
            audit["polluted"] = ground_truth.polluted
    header = ["id"] + [f"f{j}" for j in range(dataset.dim)] + ["label"] + list(audit)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for i in range(len(dataset)):
            row = [str(int(dataset.ids[i]))]
            row += [_fmt(v) for v in dataset.features[i]]
            row.append(str(int(dataset.labels[i])))
            row += [str(int(col[i])) for col in audit.values()]
            writer.writerow(row)


def read_csv(path, num_classes: int | None = None):
    """Parse a dataset CSV into (Dataset, GroundTruth)."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ParseError("file is empty", line=1)
    header = [h.strip() for h in rows[0]]
    if not header or header[0] != "id" or "label" not in header:
        raise ParseError("header must start with 'id' and contain 'label'", line=1)
    label_col = header.index("label")
    feat_cols = list(range(1, label_col))
    if not feat_cols or [header[j] for j in feat_cols] != [f"f{k}" for k in range(len(feat_cols))]:
        raise ParseError("feature columns must be f0..f{d-1} between id and label", line=1)
    audit_cols = {name: j for j, name in enumerate(header) if name in AUDIT_COLUMNS}
    body = rows[1:]
    if not body:
        raise ContractError(f"{path}: dataset has no examples")
    n, d = len(body), len(feat_cols)
    ids = np.empty(n, dtype=np.int64)
    x = np.empty((n, d))
    y = np.empty(n, dtype=np.int64)
    audit = {name: np.empty(n, dtype=np.int64) for name in audit_cols}
    for i, row in enumerate(body):
        line = i + 2
        if len(row) != len(header):
            raise ParseError(f"expected {len(header)} cells, found {len(row)}", line=line)
        try:
            ids[i] = int(row[0])
            x[i] = [float(row[j]) for j in feat_cols]
        except ValueError as exc:
            raise ParseError(f"non-numeric id or feature ({exc})", line=line) from None
        cell = row[label_col].strip()
        if not cell:
            raise ParseError("missing label", line=line)
        try:
            y[i] = int(cell)
            for name, j in audit_cols.items():
                audit[name][i] = int(row[j])
        except ValueError:
            raise ParseError("label and audit cells must be integers", line=line) from None
        if y[i] < 0 or (num_classes is not None and y[i] >= num_classes):
            raise ParseError(f"label {y[i]} outside [0, {num_classes})", line=line)
        if not np.isfinite(x[i]).all():
            raise ParseError("non-finite feature value", line=line)
    c = int(y.max()) + 1 if num_classes is None else int(num_classes)
    data = Dataset(ids, x, y, c)
    truth = GroundTruth()
    if "spurious" in audit:
        truth.spurious = audit["spurious"]
        truth.minority = audit["spurious"] != y
    if "polluted" in audit:
        truth.polluted = audit["polluted"].astype(bool)
    return data, truth


def load_dataset(path, num_classes: int | None = None) -> Dataset:
    return read_csv(path, num_classes)[0]
