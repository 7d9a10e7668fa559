"""Learning to split: adversarial Splitter / Predictor training.

The Splitter maps (features, one-hot label) to P(z=1), the probability of
sending an example to the training split. Each outer iteration samples a
split, trains a freshly initialized Predictor on the training side, and
uses the Predictor's correctness on the test side to supervise the
Splitter, regularized toward a delta-sized training split with matching
label marginals.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import nn
from .datagen import Dataset
from .errors import (ConfigError, ContractError, DegenerateSplitError, LsError, NumericError,
                     ParseError, ShapeError, TrainingInfeasibleError)
from .metrics import conditional_label_marginals, kl_bernoulli, smooth

log = logging.getLogger(__name__)

MAX_RESAMPLES = 10

# seed-stream tags, so independent random choices never share a generator
_SPLITTER_INIT, _SAMPLE, _PREDICTOR_INIT, _PREDICTOR_TRAIN, _INNER = range(5)


@dataclass
class LsConfig:
    delta: float = 0.75
    splitter_lr: float = 3e-4
    predictor_lr: float = 1e-3
    batch_size: int = 200
    predictor_patience: int = 5
    predictor_max_epochs: int = 100
    inner_stop_tol: float = 1e-3
    inner_window: int = 5
    inner_max_epochs: int = 50
    outer_patience: int = 5
    max_outer_iters: int = 50
    heldout_fraction: float = 1.0 / 3.0
    prob_epsilon: float = 1e-8
    seed: int = 0
    splitter_hidden: list = field(default_factory=lambda: [100])
    predictor_hidden: list = field(default_factory=lambda: [100])
    dropout: float = 0.1
    weight_decay: float = 0.0
    gap_weight: float = 1.0
    omega1_weight: float = 1.0
    omega2_weight: float = 1.0

    def validate(self) -> LsConfig:
        if not 0.0 < self.delta < 1.0:
            raise ConfigError(f"delta must lie in (0, 1), got {self.delta}")
        if not 0.0 < self.heldout_fraction < 1.0:
            raise ConfigError(f"heldout_fraction must lie in (0, 1), got {self.heldout_fraction}")
        if self.splitter_lr < 0 or self.predictor_lr <= 0:
            raise ConfigError("learning rates must be positive")
        if not 0.0 < self.prob_epsilon < 0.5:
            raise ConfigError("prob_epsilon must lie in (0, 0.5)")
        for name in ("batch_size", "predictor_patience", "predictor_max_epochs", "inner_window",
                     "inner_max_epochs", "outer_patience", "max_outer_iters"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if any(int(h) < 1 for h in list(self.splitter_hidden) + list(self.predictor_hidden)):
            raise ConfigError("hidden layer widths must be >= 1")
        if min(self.gap_weight, self.omega1_weight, self.omega2_weight, self.weight_decay) < 0:
            raise ConfigError("loss weights and weight decay must be non-negative")
        return self

    @classmethod
    def from_dict(cls, overrides: dict) -> LsConfig:
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(overrides) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**overrides).validate()

    def to_dict(self) -> dict:
        return asdict(self)


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1, np.uint64)[0])


# ---------------------------------------------------------------- splitter

def splitter_inputs(dataset: Dataset) -> np.ndarray:
    onehot = np.eye(dataset.num_classes)[dataset.labels]
    return np.hstack([dataset.features, onehot])


def init_splitter(dataset: Dataset, config: LsConfig) -> nn.MlpParams:
    """Network whose output layer starts at zero weights and a logit(delta) bias,
    so the first split is a uniform random split at ratio delta."""
    dims = [dataset.dim + dataset.num_classes, *config.splitter_hidden, 2]
    params = nn.init_params(dims, derive_seed(config.seed, _SPLITTER_INIT))
    w, b = params.layers[-1]
    b = np.array([0.0, math.log(config.delta / (1.0 - config.delta))])
    params.layers[-1] = (np.zeros_like(w), b)
    return params


def _probs_from_logits(logits, eps):
    raw = nn.softmax(logits)[:, 1]
    return np.clip(raw, eps, 1.0 - eps), raw


def splitter_probabilities(splitter: nn.MlpParams, dataset: Dataset, eps: float = 1e-8) -> np.ndarray:
    x = splitter_inputs(dataset)
    if splitter.dims[0] != x.shape[1] or splitter.dims[-1] != 2:
        raise ShapeError(f"splitter dims {splitter.dims} do not fit d + C = {x.shape[1]} -> 2")
    logits, _ = nn.forward(splitter, x)
    return _probs_from_logits(logits, eps)[0]


@dataclass
class SplitState:
    ids: np.ndarray
    probs: np.ndarray
    assignment: np.ndarray
    rng_seed: int
    splitter: nn.MlpParams | None = None
    outer_iter: int | None = None

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.probs = np.asarray(self.probs, dtype=float)
        self.assignment = np.asarray(self.assignment, dtype=np.int64)
        if not (len(self.ids) == len(self.probs) == len(self.assignment)):
            raise ContractError("split ids, probs and assignment differ in length")

    def thresholded(self) -> np.ndarray:
        return (self.probs >= 0.5).astype(np.int64)

    @property
    def split_ratio(self) -> float:
        return float(self.assignment.mean())

    def aligned_to(self, dataset: Dataset, allow_extra: bool = False) -> SplitState:
        """Reorder to the dataset's id order. Every dataset id must be present;
        ids the dataset lacks are an error unless ``allow_extra``."""
        pos = {int(i): k for k, i in enumerate(self.ids)}
        known = set(int(i) for i in dataset.ids)
        for i in self.ids:
            if not allow_extra and int(i) not in known:
                raise ContractError(f"split references unknown id {int(i)}")
        missing = [int(i) for i in dataset.ids if int(i) not in pos]
        if missing:
            raise ContractError(f"split has no entry for id {missing[0]}")
        order = np.array([pos[int(i)] for i in dataset.ids], dtype=np.int64)
        return SplitState(self.ids[order], self.probs[order], self.assignment[order],
                          self.rng_seed, self.splitter, self.outer_iter)


def sample_split(probs, rng_seed) -> np.ndarray:
    """Independent Bernoulli draws; resample when a side comes out empty."""
    probs = np.asarray(probs, dtype=float)
    if probs.ndim != 1 or len(probs) < 2:
        raise ContractError("need at least two probabilities to split")
    rng = np.random.default_rng(rng_seed)
    for _ in range(MAX_RESAMPLES + 1):
        z = (rng.random(len(probs)) < probs).astype(np.int64)
        if 0 < z.sum() < len(z):
            return z
    raise DegenerateSplitError(f"split still one-sided after {MAX_RESAMPLES} resamples "
                               f"(mean prob {probs.mean():.4f})")


def assignment_log_prob(probs, assignment) -> float:
    p = np.asarray(probs, dtype=float)
    z = np.asarray(assignment)
    return float(np.sum(np.where(z == 1, np.log(p), np.log1p(-p))))


# ---------------------------------------------------------------- predictor

def fit_classifier(x, y, num_classes, init, *, lr, batch_size, max_epochs, patience, dropout,
                   seed, validate, objective=None, weight_decay=0.0, on_batch=None):
    """Minibatch Adam with early stopping on a validation score (higher is better).

    ``objective(logits, y_batch, idx) -> (loss, dlogits)`` defaults to the
    batch-mean cross entropy. Returns (best params, best score, epochs run).
    """
    rng = np.random.default_rng(seed)
    params = init
    state = nn.init_adam(params)
    best, best_score, stale = params, -np.inf, 0
    n = len(y)
    epoch = 0
    for epoch in range(1, max_epochs + 1):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            logits, cache = nn.forward(params, x[idx], train=True, dropout=dropout, rng=rng)
            if objective is None:
                losses, dlogits = nn.softmax_cross_entropy(logits, y[idx])
                loss = losses.mean()
                dlogits = dlogits * (1.0 / len(idx))
            else:
                loss, dlogits = objective(logits, y[idx], idx)
            if not np.isfinite(loss):
                raise NumericError(f"non-finite training loss at epoch {epoch}")
            grads = nn.backward(params, cache, dlogits)
            params, state = nn.adam_step(params, grads, state, lr, weight_decay)
            if on_batch is not None:
                on_batch(params)
        score = validate(params)
        if score > best_score:
            best, best_score, stale = params, score, 0
        else:
            stale += 1
            if stale >= patience:
                break
    return best, float(best_score), epoch


def predictor_dims(dataset: Dataset, config: LsConfig) -> list[int]:
    return [dataset.dim, *config.predictor_hidden, dataset.num_classes]


def train_predictor(dataset: Dataset, assignment, config: LsConfig, seed, init=None):
    """Train a fresh Predictor on the z=1 side, early-stopped on a held-out fraction of it.

    Returns (best params, held-out accuracy of that snapshot).
    """
    z = np.asarray(assignment)
    train_idx = np.flatnonzero(z == 1)
    if len(train_idx) < 3:
        raise TrainingInfeasibleError(f"training split has {len(train_idx)} examples, need >= 3")
    if len(np.unique(dataset.labels[train_idx])) < 2:
        raise TrainingInfeasibleError("training split contains a single class")
    rng = np.random.default_rng(seed)
    train_idx = rng.permutation(train_idx)
    n_held = min(max(1, int(round(len(train_idx) * config.heldout_fraction))), len(train_idx) - 1)
    held, fit = train_idx[:n_held], train_idx[n_held:]
    if init is None:
        init = nn.init_params(predictor_dims(dataset, config), int(rng.integers(2**63)))
    x, y = dataset.features, dataset.labels
    x_held, y_held = x[held], y[held]

    def heldout_accuracy(params):
        return float(np.mean(nn.predict(params, x_held) == y_held))

    params, acc, _ = fit_classifier(
        x[fit], y[fit], dataset.num_classes, init,
        lr=config.predictor_lr, batch_size=config.batch_size,
        max_epochs=config.predictor_max_epochs, patience=config.predictor_patience,
        dropout=config.dropout, seed=int(rng.integers(2**63)), validate=heldout_accuracy,
        weight_decay=config.weight_decay)
    return params, acc


@dataclass
class GapStats:
    train_accuracy: float
    test_accuracy: float
    gap: float
    correct: np.ndarray  # 1 where the Predictor is right, one entry per test example
    test_index: np.ndarray


def evaluate_gap(predictor: nn.MlpParams, dataset: Dataset, assignment) -> GapStats:
    z = np.asarray(assignment)
    if len(z) != len(dataset):
        raise ShapeError("assignment length does not match dataset")
    hits = (nn.predict(predictor, dataset.features) == dataset.labels).astype(np.int64)
    test_idx = np.flatnonzero(z == 0)
    train_acc = float(hits[z == 1].mean())
    test_acc = float(hits[test_idx].mean())
    return GapStats(train_acc, test_acc, train_acc - test_acc, hits[test_idx], test_idx)


# ---------------------------------------------------------------- splitter objective

def gap_loss(probs_test, correctness) -> float:
    p = np.asarray(probs_test, dtype=float)
    c = np.asarray(correctness, dtype=float)
    if p.shape != c.shape:
        raise ContractError(f"{len(p)} probs vs {len(c)} correctness flags")
    return float(np.mean(-(c * np.log(p) + (1.0 - c) * np.log1p(-p))))


def omega1(probs, delta: float) -> float:
    return kl_bernoulli(float(np.mean(probs)), delta)


def omega2(probs, labels, num_classes: int, eps: float = 1e-8) -> float:
    p1, p0, py = conditional_label_marginals(probs, labels, num_classes)
    q = smooth(py, eps)
    total = 0.0
    for cond in (p1, p0):
        s = smooth(cond, eps)
        total += float(np.sum(s * np.log(s / q)))
    return max(total, 0.0)


def objective_terms(p_total, y_total, p_test, c_test, num_classes, config: LsConfig):
    """Loss terms and their gradients w.r.t. each (clamped) probability.

    Returns (terms dict, dL/dp on the total batch, dL/dp on the test batch).
    """
    eps = config.prob_epsilon
    n = len(p_total)
    q = float(p_total.mean())
    om1 = kl_bernoulli(q, config.delta)
    d_q = math.log(q / config.delta) - math.log((1.0 - q) / (1.0 - config.delta))
    g_total = np.full(n, config.omega1_weight * d_q / n)

    onehot = np.eye(num_classes)[y_total]
    py = smooth(onehot.mean(axis=0), eps)
    s1 = p_total.sum()
    s0 = n - s1
    p1 = (onehot * p_total[:, None]).sum(axis=0) / s1
    p0 = (onehot * (1.0 - p_total)[:, None]).sum(axis=0) / s0
    norm = 1.0 + num_classes * eps
    om2 = 0.0
    for cond, s, sign in ((p1, s1, 1.0), (p0, s0, -1.0)):
        sm = (cond + eps) / norm
        om2 += float(np.sum(sm * np.log(sm / py)))
        d_cond = (np.log(sm / py) + 1.0) / norm
        # d cond_y / d p_i = sign * (1[y_i = y] - cond_y) / s
        g_total += config.omega2_weight * sign * (onehot @ d_cond - cond @ d_cond) / s

    c = np.asarray(c_test, dtype=float)
    lg = gap_loss(p_test, c)
    g_test = config.gap_weight * (-(c / p_test) + (1.0 - c) / (1.0 - p_test)) / len(p_test)
    total = config.gap_weight * lg + config.omega1_weight * om1 + config.omega2_weight * om2
    return {"gap_loss": lg, "omega1": om1, "omega2": max(om2, 0.0), "total_loss": total}, \
        g_total, g_test


@dataclass
class InnerResult:
    splitter: nn.MlpParams
    adam: nn.AdamState
    epoch_losses: list


def splitter_inner_loop(splitter, dataset: Dataset, assignment, correctness, config: LsConfig,
                        seed, adam: nn.AdamState | None = None) -> InnerResult:
    """Adam on L_gap + Omega1 + Omega2 until the epoch-mean loss stops improving.

    ``correctness`` holds one flag per test-side example, in dataset order.
    Each step pairs a minibatch from the whole dataset (for the constraint
    terms) with a minibatch from the test side (for the gap loss).
    """
    z = np.asarray(assignment)
    test_idx = np.flatnonzero(z == 0)
    correctness = np.asarray(correctness)
    if len(correctness) != len(test_idx):
        raise ContractError(f"{len(correctness)} correctness flags for {len(test_idx)} test examples")
    if len(test_idx) == 0:
        raise DegenerateSplitError("inner loop needs a nonempty test split")
    rng = np.random.default_rng(seed)
    x_all = splitter_inputs(dataset)
    y_all = dataset.labels
    n = len(dataset)
    bs = config.batch_size
    eps = config.prob_epsilon
    adam = nn.init_adam(splitter) if adam is None else adam
    steps = math.ceil(n / bs)
    test_order, test_pos = rng.permutation(len(test_idx)), 0
    epoch_losses = []
    step_count = 0
    for epoch in range(config.inner_max_epochs):
        order = rng.permutation(n)
        batch_losses = []
        for s in range(steps):
            tot = order[s * bs:(s + 1) * bs]
            if test_pos + bs > len(test_order) and test_pos > 0:
                test_order, test_pos = rng.permutation(len(test_idx)), 0
            pick = test_order[test_pos:test_pos + bs]
            test_pos += len(pick)
            tst = test_idx[pick]
            x = np.vstack([x_all[tot], x_all[tst]])
            logits, cache = nn.forward(splitter, x, train=True, dropout=config.dropout, rng=rng)
            p, raw = _probs_from_logits(logits, eps)
            nt = len(tot)
            terms, g_tot, g_tst = objective_terms(p[:nt], y_all[tot], p[nt:], correctness[pick],
                                                  dataset.num_classes, config)
            if not np.isfinite(terms["total_loss"]):
                raise NumericError(f"non-finite splitter loss at epoch {epoch}, batch {s}")
            dp = np.concatenate([g_tot, g_tst]) * raw * (1.0 - raw)
            dlogits = np.stack([-dp, dp], axis=1)
            grads = nn.backward(splitter, cache, dlogits)
            splitter, adam = nn.adam_step(splitter, grads, adam, config.splitter_lr)
            batch_losses.append(terms["total_loss"])
            step_count += 1
        epoch_losses.append(float(np.mean(batch_losses)))
        if epoch >= config.inner_window:
            previous = np.mean(epoch_losses[epoch - config.inner_window:epoch])
            if previous - epoch_losses[-1] < config.inner_stop_tol:
                break
    return InnerResult(splitter, adam, epoch_losses)


# ---------------------------------------------------------------- outer loop

@dataclass
class IterationTrace:
    outer_iter: int
    train_accuracy: float
    test_accuracy: float
    gap: float
    n_train: int
    n_test: int
    heldout_accuracy: float
    omega1: float
    omega2: float
    gap_loss: float
    total_loss: float
    split_ratio: float
    label_marginals: dict
    inner_epochs: int = 0

    def to_json(self) -> dict:
        return {
            "outer_iter": self.outer_iter,
            "gap_stats": {"train_accuracy": self.train_accuracy,
                          "test_accuracy": self.test_accuracy, "gap": self.gap,
                          "n_train": self.n_train, "n_test": self.n_test},
            "heldout_accuracy": self.heldout_accuracy,
            "omega1": self.omega1, "omega2": self.omega2,
            "gap_loss": self.gap_loss, "total_loss": self.total_loss,
            "split_ratio": self.split_ratio,
            "label_marginals": self.label_marginals,
            "inner_epochs": self.inner_epochs,
        }


def run_ls(dataset: Dataset, config: LsConfig | None = None, on_iteration=None):
    """Alternate Predictor training and Splitter updates until the gap stops growing.

    Returns (SplitState of the best-gap iteration, list of IterationTrace).
    """
    config = (config or LsConfig()).validate()
    if len(dataset) < 20:
        raise ContractError(f"run_ls needs >= 20 examples, got {len(dataset)}")
    if len(np.unique(dataset.labels)) < 2:
        raise ContractError("run_ls needs at least two classes present")
    splitter = init_splitter(dataset, config)
    adam = None
    traces: list[IterationTrace] = []
    best = None
    stale = 0
    eps = config.prob_epsilon
    for k in range(config.max_outer_iters):
        try:
            probs = splitter_probabilities(splitter, dataset, eps)
            sample_seed = derive_seed(config.seed, _SAMPLE, k)
            z = sample_split(probs, sample_seed)
            init = nn.init_params(predictor_dims(dataset, config),
                                  derive_seed(config.seed, _PREDICTOR_INIT, k))
            predictor, held_acc = train_predictor(
                dataset, z, config, derive_seed(config.seed, _PREDICTOR_TRAIN, k), init=init)
        except LsError as exc:
            raise type(exc)(f"outer iteration {k}: {exc}") from exc
        stats = evaluate_gap(predictor, dataset, z)
        p1, p0, py = conditional_label_marginals(probs, dataset.labels, dataset.num_classes)
        om1 = omega1(probs, config.delta)
        om2 = omega2(probs, dataset.labels, dataset.num_classes, eps)
        lg = gap_loss(probs[stats.test_index], stats.correct)
        trace = IterationTrace(
            outer_iter=k, train_accuracy=stats.train_accuracy,
            test_accuracy=stats.test_accuracy, gap=stats.gap,
            n_train=int(z.sum()), n_test=int(len(z) - z.sum()), heldout_accuracy=held_acc,
            omega1=om1, omega2=om2, gap_loss=lg,
            total_loss=config.gap_weight * lg + config.omega1_weight * om1
            + config.omega2_weight * om2,
            split_ratio=float(z.mean()),
            label_marginals={"train": p1.tolist(), "test": p0.tolist(), "total": py.tolist()})
        traces.append(trace)
        log.info("outer %d: gap %.4f (train %.4f, test %.4f), ratio %.3f", k, stats.gap,
                 stats.train_accuracy, stats.test_accuracy, trace.split_ratio)
        if best is None or stats.gap > best.gap:
            best = trace
            best_state = SplitState(dataset.ids, probs, z, sample_seed, splitter.copy(), k)
            stale = 0
        else:
            stale += 1
        if on_iteration is not None:
            on_iteration(trace, predictor)
        if stale >= config.outer_patience or k == config.max_outer_iters - 1:
            break
        inner = splitter_inner_loop(splitter, dataset, z, stats.correct, config,
                                    derive_seed(config.seed, _INNER, k), adam)
        splitter, adam = inner.splitter, inner.adam
        trace.inner_epochs = len(inner.epoch_losses)
    return best_state, traces


# ---------------------------------------------------------------- serialization

def write_split(state: SplitState, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "prob", "z"])
        for i, p, z in zip(state.ids, state.probs, state.assignment):
            writer.writerow([int(i), format(float(p), ".17g"), int(z)])


def read_split(path) -> SplitState:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or [h.strip() for h in rows[0]] != ["id", "prob", "z"]:
        raise ParseError("split file header must be id,prob,z", line=1)
    ids, probs, zs = [], [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != 3:
            raise ParseError(f"expected 3 cells, found {len(row)}", line=lineno)
        try:
            ids.append(int(row[0]))
            probs.append(float(row[1]))
            zs.append(int(row[2]))
        except ValueError:
            raise ParseError("non-numeric cell", line=lineno) from None
        if zs[-1] not in (0, 1) or not 0.0 <= probs[-1] <= 1.0:
            raise ParseError("prob must lie in [0, 1] and z in {0, 1}", line=lineno)
    if not ids:
        raise ContractError(f"{path}: split file has no rows")
    return SplitState(ids, probs, zs, rng_seed=-1)


def write_trace(traces, path):
    with open(path, "w", encoding="utf-8") as fh:
        for t in traces:
            fh.write(json.dumps(t.to_json(), sort_keys=True) + "\n")


def read_trace(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def save_splitter(params: nn.MlpParams, path):
    np.savez(path, **params.to_arrays())


def load_splitter(path) -> nn.MlpParams:
    with np.load(path) as arrays:
        return nn.MlpParams.from_arrays(arrays)
