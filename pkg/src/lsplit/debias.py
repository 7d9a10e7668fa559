"""Group DRO over (label, split-assignment) groups, with an ERM baseline.

Groups come from a learned split: an example's key is (y, z). Group weights
follow the online exponentiated-gradient rule and persist across epochs.
Model selection uses worst-group accuracy on a validation set whose groups
are produced by the same Splitter.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from .datagen import Dataset
from .engine import SplitState, derive_seed, fit_classifier, sample_split, splitter_probabilities
from .errors import ConfigError, ContractError, NumericError
from .metrics import GroupStats, worst_group_accuracy

log = logging.getLogger(__name__)

WEIGHT_DECAY_GRID = (1.0, 0.1, 0.01, 0.001, 0.0)

_INIT, _FIT, _VAL_SPLIT, _VAL_SAMPLE = range(10, 14)


@dataclass
class DroConfig:
    group_step_size: float = 0.01
    lr: float = 1e-3
    batch_size: int = 200
    max_epochs: int = 200
    patience: int = 10
    weight_decay: float = 0.0
    hidden: list = field(default_factory=lambda: [100])
    dropout: float = 0.1
    seed: int = 0

    def validate(self) -> DroConfig:
        if self.group_step_size < 0:
            raise ConfigError("group_step_size must be non-negative")
        if self.lr <= 0 or self.weight_decay < 0:
            raise ConfigError("lr must be positive and weight_decay non-negative")
        if min(self.batch_size, self.max_epochs, self.patience) < 1:
            raise ConfigError("batch_size, max_epochs and patience must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


def assign_groups(dataset: Dataset, split: SplitState, thresholded: bool = False) -> list:
    """(label, z) key per example, in dataset order."""
    aligned = split.aligned_to(dataset)
    z = aligned.thresholded() if thresholded else aligned.assignment
    return [(int(y), int(zi)) for y, zi in zip(dataset.labels, z)]


def apply_splitter(splitter: nn.MlpParams, dataset: Dataset, seed: int,
                   thresholded: bool = False, eps: float = 1e-8) -> SplitState:
    """Split new data with a trained Splitter (sampled, or thresholded at 0.5)."""
    probs = splitter_probabilities(splitter, dataset, eps)
    z = (probs >= 0.5).astype(np.int64) if thresholded else sample_split(probs, seed)
    return SplitState(dataset.ids, probs, z, seed, splitter)


def dro_weight_update(group_weights, group_losses, step: float) -> np.ndarray:
    """w'_g proportional to w_g * exp(step * loss_g)."""
    w = np.asarray(group_weights, dtype=float)
    losses = np.asarray(group_losses, dtype=float)
    if w.shape != losses.shape:
        raise ContractError("group weights and losses differ in length")
    if not np.isfinite(losses).all():
        raise NumericError("non-finite group loss")
    with np.errstate(divide="ignore"):
        logits = np.log(w) + step * losses
    logits = logits - logits.max()
    out = np.exp(logits)
    return out / out.sum()


def _key(k):
    # lists and arrays (e.g. from JSON) become hashable tuples; scalars pass through
    return tuple(k) if isinstance(k, (list, np.ndarray)) else k


def _index_groups(keys, known=None):
    known = sorted(set(keys)) if known is None else known
    lookup = {k: g for g, k in enumerate(known)}
    return known, lookup


def _init(dataset: Dataset, config: DroConfig):
    dims = [dataset.dim, *config.hidden, dataset.num_classes]
    return nn.init_params(dims, derive_seed(config.seed, _INIT))


def group_dro_train(dataset: Dataset, group_keys, config: DroConfig, validation, on_step=None):
    """Minimize the adaptively weighted group loss; select by validation worst-group accuracy.

    ``validation`` is a (Dataset, group keys) pair. Returns (predictor,
    GroupStats on the validation set). ``on_step(weights)`` sees the group
    weights after every update.
    """
    config.validate()
    if len(dataset) == 0:
        raise ContractError("group_dro_train on an empty dataset")
    keys = [_key(k) for k in group_keys]
    if len(keys) != len(dataset):
        raise ContractError("one group key per training example required")
    val_data, val_keys = validation
    val_keys = [_key(k) for k in val_keys]
    groups, lookup = _index_groups(keys)
    for k in sorted(set(val_keys) - set(groups)):
        log.warning("validation group %s has no training examples; still scored", k)
    gidx = np.array([lookup[k] for k in keys])
    n_groups = len(groups)
    weights = np.full(n_groups, 1.0 / n_groups)

    def objective(logits, y, idx):
        nonlocal weights
        losses, dlogits = nn.softmax_cross_entropy(logits, y)
        g = gidx[idx]
        counts = np.bincount(g, minlength=n_groups)
        sums = np.bincount(g, weights=losses, minlength=n_groups)
        group_loss = np.divide(sums, counts, out=np.zeros(n_groups), where=counts > 0)
        weights = dro_weight_update(weights, group_loss, config.group_step_size)
        if on_step is not None:
            on_step(weights.copy())
        coef = weights[g] / counts[g]
        return float(weights @ group_loss), dlogits * coef[:, None]

    def score(params):
        return worst_group_accuracy(nn.predict(params, val_data.features), val_data.labels,
                                    val_keys).worst_group_accuracy

    params, _, _ = fit_classifier(
        dataset.features, dataset.labels, dataset.num_classes, _init(dataset, config),
        lr=config.lr, batch_size=config.batch_size, max_epochs=config.max_epochs,
        patience=config.patience, dropout=config.dropout,
        seed=derive_seed(config.seed, _FIT), validate=score, objective=objective,
        weight_decay=config.weight_decay)
    stats = worst_group_accuracy(nn.predict(params, val_data.features), val_data.labels, val_keys)
    return params, stats


def erm_train(dataset: Dataset, config: DroConfig, validation: Dataset | None = None):
    """Plain minibatch Adam, early-stopped on average validation accuracy.

    Without a validation set, a seeded 80/20 partition of the data is used.
    """
    config.validate()
    if len(dataset) == 0:
        raise ContractError("erm_train on an empty dataset")
    if validation is None:
        dataset, validation = holdout_partition(dataset, 0.2, config.seed)

    def score(params):
        return float(np.mean(nn.predict(params, validation.features) == validation.labels))

    params, _, _ = fit_classifier(
        dataset.features, dataset.labels, dataset.num_classes, _init(dataset, config),
        lr=config.lr, batch_size=config.batch_size, max_epochs=config.max_epochs,
        patience=config.patience, dropout=config.dropout,
        seed=derive_seed(config.seed, _FIT), validate=score, weight_decay=config.weight_decay)
    return params


def holdout_partition(dataset: Dataset, fraction: float, seed: int):
    if not 0.0 < fraction < 1.0:
        raise ConfigError(f"validation fraction must lie in (0, 1), got {fraction}")
    order = np.random.default_rng(derive_seed(seed, _VAL_SPLIT)).permutation(len(dataset))
    n_val = max(1, int(round(len(dataset) * fraction)))
    if n_val >= len(dataset):
        raise ContractError("dataset too small to hold out a validation set")
    return dataset.subset(np.sort(order[n_val:])), dataset.subset(np.sort(order[:n_val]))


def evaluate_groups(params, dataset: Dataset, group_keys) -> GroupStats:
    return worst_group_accuracy(nn.predict(params, dataset.features), dataset.labels, group_keys)


def grid_search(train_fn, config: DroConfig, grid=WEIGHT_DECAY_GRID):
    """Run ``train_fn(config) -> (params, selection score)`` per weight decay; keep the best.

    Ties go to the earlier (stronger) grid entry.
    """
    best = None
    for wd in grid:
        cfg = DroConfig(**{**config.to_dict(), "weight_decay": wd})
        params, score = train_fn(cfg)
        log.info("weight_decay %g: selection score %.4f", wd, score)
        if best is None or score > best[2]:
            best = (cfg, params, score)
    return best
