"""Desk-scale experiment pipelines shared by scripts/ and the acceptance tests."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import debias
from .datagen import Dataset, SpuriousSpec, gen_blobs, gen_spurious, inject_label_noise
from .engine import (LsConfig, derive_seed, evaluate_gap, run_ls, sample_split,
                     train_predictor)
from .metrics import label_frequencies, noise_report, total_variation


def random_split_gap(dataset: Dataset, config: LsConfig, seed: int) -> float:
    """Gap of a freshly trained Predictor on a uniform random split at ratio delta."""
    probs = np.full(len(dataset), config.delta)
    z = sample_split(probs, derive_seed(seed, 101))
    predictor, _ = train_predictor(dataset, z, config, derive_seed(seed, 102))
    return evaluate_gap(predictor, dataset, z).gap


def side_label_tv(dataset: Dataset, assignment) -> float:
    z = np.asarray(assignment)
    c = dataset.num_classes
    return total_variation(label_frequencies(dataset.labels[z == 1], c),
                           label_frequencies(dataset.labels[z == 0], c))


@dataclass
class SplitRun:
    seed: int
    gap: float
    final_trace_gap: float
    random_gap: float
    split_ratio: float
    label_tv: float
    minority_in_test: float
    outer_iters: int


def spurious_split_run(seed: int, n: int = 2000, rho: float = 0.9, config: LsConfig | None = None,
                       n_random: int = 1) -> SplitRun:
    data, truth = gen_spurious(SpuriousSpec(n=n, rho=rho, seed=seed))
    cfg = config or LsConfig(seed=seed)
    state, traces = run_ls(data, cfg)
    z = state.assignment
    randoms = [random_split_gap(data, cfg, derive_seed(seed, r)) for r in range(n_random)]
    return SplitRun(
        seed=seed, gap=traces[state.outer_iter].gap, final_trace_gap=traces[-1].gap,
        random_gap=float(np.mean(randoms)), split_ratio=state.split_ratio,
        label_tv=side_label_tv(data, z),
        minority_in_test=float(np.mean(z[truth.minority] == 0)), outer_iters=len(traces))


def noise_detection_run(eta: float, seed: int = 0, n: int = 5000, num_classes: int = 10,
                        config: LsConfig | None = None):
    clean = gen_blobs(n=n, num_classes=num_classes, seed=seed)
    noisy, polluted = inject_label_noise(clean, eta, seed=derive_seed(seed, 7))
    state, traces = run_ls(noisy, config or LsConfig(seed=seed))
    return noise_report(state.assignment, polluted), state, traces


@dataclass
class DebiasRun:
    seed: int
    erm_worst: float
    dro_worst: float
    erm_average: float
    dro_average: float


def debias_run(seed: int, n: int = 2000, rho: float = 0.9, n_val: int = 1000,
               n_eval: int = 4000, dro_config: debias.DroConfig | None = None) -> DebiasRun:
    """ls on biased data, group DRO over (y, z) groups vs ERM, scored on balanced groups."""
    train, _ = gen_spurious(SpuriousSpec(n=n, rho=rho, seed=seed))
    val, _ = gen_spurious(SpuriousSpec(n=n_val, rho=rho, seed=derive_seed(seed, 1)))
    evaluation, truth = gen_spurious(SpuriousSpec(n=n_eval, rho=0.5, seed=derive_seed(seed, 2)))
    state, _ = run_ls(train, LsConfig(seed=seed))
    keys = debias.assign_groups(train, state)
    val_keys = debias.assign_groups(val, debias.apply_splitter(state.splitter, val, seed))
    cfg = dro_config or debias.DroConfig(seed=seed)
    dro, _ = debias.group_dro_train(train, keys, cfg, (val, val_keys))
    erm = debias.erm_train(train, cfg, val)
    eval_keys = list(zip(evaluation.labels.tolist(), truth.spurious.tolist()))
    e = debias.evaluate_groups(erm, evaluation, eval_keys)
    d = debias.evaluate_groups(dro, evaluation, eval_keys)
    return DebiasRun(seed, e.worst_group_accuracy, d.worst_group_accuracy,
                     e.average_accuracy, d.average_accuracy)
