"""Command-line entry point: ``lsplit gen|split|debias|noise-eval``.

Machine outputs go to files under --out; logs go to stderr. Exit codes:
0 success, 2 usage/configuration, 3 data or contract, 4 numeric,
5 degenerate split.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__, debias
from .datagen import SpuriousSpec, gen_blobs, gen_spurious, inject_label_noise, read_csv, save_dataset
from .engine import (LsConfig, derive_seed, load_splitter, read_split, run_ls, save_splitter,
                     write_split, write_trace)
from .errors import ConfigError, ContractError, LsError
from .metrics import noise_report
from .nn import predict

log = logging.getLogger("lsplit")

OUT_ENV = "LSPLIT_OUT_DIR"
LOG_ENV = "LSPLIT_LOG_LEVEL"
MANIFEST = "manifest.json"


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _dump_json(obj, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


class Run:
    """Collects what a command read and wrote, then emits its manifest."""

    def __init__(self, argv, out: Path, config: dict, seed):
        self.argv = list(argv)
        self.out = out
        self.config = config
        self.seed = seed
        self.inputs: dict[str, str] = {}
        self.started = datetime.now(timezone.utc).isoformat()
        out.mkdir(parents=True, exist_ok=True)

    def read(self, path):
        self.inputs[str(path)] = sha256(path)
        return path

    def finish(self):
        outputs = {}
        for p in sorted(self.out.rglob("*")):
            if p.is_file() and p.name != MANIFEST:
                outputs[str(p.relative_to(self.out))] = sha256(p)
        _dump_json({
            "command": self.argv,
            "config": self.config,
            "seed": self.seed,
            "inputs": self.inputs,
            "outputs": outputs,
            "tool_version": __version__,
            "started": self.started,
            "finished": datetime.now(timezone.utc).isoformat(),
        }, self.out / MANIFEST)


def verify_manifest(directory) -> dict:
    """Load a manifest and check every recorded output still matches its digest."""
    directory = Path(directory)
    with open(directory / MANIFEST, encoding="utf-8") as fh:
        manifest = json.load(fh)
    for name, digest in manifest["outputs"].items():
        if sha256(directory / name) != digest:
            raise ContractError(f"{directory / name} does not match its manifest digest")
    return manifest


def _check_split_provenance(split_path: Path, data_path: Path):
    """If the split came with a manifest, it must match the data file being used now."""
    if not (split_path.parent / MANIFEST).exists():
        return
    manifest = verify_manifest(split_path.parent)
    data_digest = sha256(data_path)
    recorded = set(manifest["inputs"].values())
    if recorded and data_digest not in recorded:
        raise ContractError(f"{data_path} is not the dataset {split_path} was computed on")


# ---------------------------------------------------------------- commands

def cmd_gen(args, argv):
    out = Path(args.out)
    if args.kind == "spurious":
        spec = SpuriousSpec(n=args.n, d_core=args.d_core, d_spurious=args.d_spurious,
                            d_noise=args.d_noise, rho=args.rho,
                            core_noise_std=args.core_noise_std, seed=args.seed)
        run = Run(argv, out, vars(spec), args.seed)
        data, truth = gen_spurious(spec)
    elif args.kind == "blobs":
        config = {"n": args.n, "num_classes": args.classes, "dim": args.dim,
                  "separation": args.separation, "seed": args.seed}
        run = Run(argv, out, config, args.seed)
        data, truth = gen_blobs(**config), None
    else:
        if args.data is None:
            raise ConfigError("gen noise requires --data")
        config = {"eta": args.eta, "num_classes": args.classes, "seed": args.seed}
        run = Run(argv, out, config, args.seed)
        clean, truth = read_csv(run.read(args.data), args.classes)
        data, polluted = inject_label_noise(clean, args.eta, args.classes, args.seed)
        truth.polluted = polluted
    save_dataset(data, out / "dataset.csv", truth)
    run.finish()


def _ls_config(args) -> LsConfig:
    overrides = {}
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            overrides = json.load(fh)
        if not isinstance(overrides, dict):
            raise ConfigError("--config must hold a JSON object")
    if args.seed is not None:
        overrides["seed"] = args.seed
    return LsConfig.from_dict(overrides)


def _split_one(data, config: LsConfig, out: Path, argv, data_path, config_path):
    run = Run(argv, out, config.to_dict(), config.seed)
    run.read(data_path)
    if config_path:
        run.read(config_path)
    state, traces = run_ls(data, config)
    write_split(state, out / "split.csv")
    write_trace(traces, out / "trace.jsonl")
    save_splitter(state.splitter, out / "splitter.npz")
    run.finish()
    return state, traces


def cmd_split(args, argv):
    config = _ls_config(args)
    out = Path(args.out)
    data, _ = read_csv(args.data)
    if not args.seeds:
        _split_one(data, config, out, argv, args.data, args.config)
        return
    try:
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"--seeds must be comma-separated integers, got {args.seeds!r}") from None
    run = Run(argv, out, config.to_dict(), seeds)
    run.read(args.data)
    gaps_by_iter: dict[int, list[float]] = {}
    best = []
    for s in seeds:
        cfg = LsConfig.from_dict({**config.to_dict(), "seed": s})
        state, traces = _split_one(data, cfg, out / f"seed_{s}", argv, args.data, args.config)
        best.append(traces[state.outer_iter].gap)
        for t in traces:
            gaps_by_iter.setdefault(t.outer_iter, []).append(t.gap)
    summary = {
        "seeds": seeds,
        "best_gap_mean": float(np.mean(best)),
        "best_gap_std": float(np.std(best)),
        "per_iteration": [
            {"outer_iter": k, "n_seeds": len(v), "gap_mean": float(np.mean(v)),
             "gap_std": float(np.std(v))}
            for k, v in sorted(gaps_by_iter.items())
        ],
    }
    _dump_json(summary, out / "summary.json")
    run.finish()


def _dro_config(args) -> debias.DroConfig:
    overrides = {}
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            overrides = json.load(fh)
    if args.seed is not None:
        overrides["seed"] = args.seed
    try:
        return debias.DroConfig(**overrides).validate()
    except TypeError as exc:
        raise ConfigError(f"bad debias config: {exc}") from None


def cmd_debias(args, argv):
    cfg = _dro_config(args)
    grid = ([float(v) for v in args.weight_decays.split(",")] if args.weight_decays
            else list(debias.WEIGHT_DECAY_GRID))
    out = Path(args.out)
    run = Run(argv, out, {**cfg.to_dict(), "weight_decay_grid": grid,
                          "val_fraction": args.val_fraction, "thresholded": args.thresholded},
              cfg.seed)
    data, _ = read_csv(run.read(args.data))
    split_path = Path(run.read(args.split))
    _check_split_provenance(split_path, Path(args.data))
    split = read_split(split_path).aligned_to(data)
    splitter_path = split_path.parent / "splitter.npz"

    if args.val_data:
        val, _ = read_csv(run.read(args.val_data), data.num_classes)
        if not splitter_path.exists():
            raise ContractError(f"--val-data needs the trained splitter at {splitter_path}")
        splitter = load_splitter(run.read(splitter_path))
        val_split = debias.apply_splitter(splitter, val, derive_seed(cfg.seed, 21), args.thresholded)
        train, train_split = data, split
    else:
        train, val = debias.holdout_partition(data, args.val_fraction, cfg.seed)
        train_split = split.aligned_to(train, allow_extra=True)
        val_split = split.aligned_to(val, allow_extra=True)
    keys = debias.assign_groups(train, train_split, args.thresholded)
    val_keys = debias.assign_groups(val, val_split, args.thresholded)

    def fit_dro(c):
        params, stats = debias.group_dro_train(train, keys, c, (val, val_keys))
        return params, stats.worst_group_accuracy

    def fit_erm(c):
        params = debias.erm_train(train, c, val)
        return params, float(np.mean(predict(params, val.features) == val.labels))

    erm_cfg, erm, _ = debias.grid_search(fit_erm, cfg, grid)
    dro_cfg, dro, _ = debias.grid_search(fit_dro, cfg, grid)
    metrics = {
        "erm": {**debias.evaluate_groups(erm, val, val_keys).to_json(),
                "weight_decay": erm_cfg.weight_decay},
        "group_dro": {**debias.evaluate_groups(dro, val, val_keys).to_json(),
                      "weight_decay": dro_cfg.weight_decay},
    }
    if args.eval_data:
        evaluation, truth = read_csv(run.read(args.eval_data), data.num_classes)
        if truth.spurious is not None:
            eval_keys = list(zip(evaluation.labels.tolist(), truth.spurious.tolist()))
            group_source = "label,spurious"
        else:
            splitter = load_splitter(splitter_path)
            eval_split = debias.apply_splitter(splitter, evaluation, derive_seed(cfg.seed, 22),
                                               args.thresholded)
            eval_keys = debias.assign_groups(evaluation, eval_split, args.thresholded)
            group_source = "label,z"
        metrics["evaluation"] = {
            "groups": group_source,
            "erm": debias.evaluate_groups(erm, evaluation, eval_keys).to_json(),
            "group_dro": debias.evaluate_groups(dro, evaluation, eval_keys).to_json(),
        }
    _dump_json(metrics, out / "metrics.json")
    run.finish()


def cmd_noise_eval(args, argv):
    out = Path(args.out)
    run = Run(argv, out, {}, None)
    data, truth = read_csv(run.read(args.data))
    if truth.polluted is None:
        raise ContractError(f"{args.data} has no 'polluted' column")
    split_path = Path(run.read(args.split))
    _check_split_provenance(split_path, Path(args.data))
    split = read_split(split_path).aligned_to(data)
    report = noise_report(split.assignment, truth.polluted)
    _dump_json(report.to_json(), out / "noise_report.json")
    run.finish()


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    env_out = os.environ.get(OUT_ENV)

    def add_out(p):
        p.add_argument("--out", required=env_out is None, default=env_out,
                       help=f"output directory (default ${OUT_ENV})")

    parser = argparse.ArgumentParser(prog="lsplit", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate synthetic datasets")
    gen.add_argument("kind", choices=["spurious", "noise", "blobs"])
    gen.add_argument("--n", type=int, default=2000)
    gen.add_argument("--rho", type=float, default=0.9)
    gen.add_argument("--d-core", type=int, default=SpuriousSpec.d_core)
    gen.add_argument("--d-spurious", type=int, default=SpuriousSpec.d_spurious)
    gen.add_argument("--d-noise", type=int, default=SpuriousSpec.d_noise)
    gen.add_argument("--core-noise-std", type=float, default=SpuriousSpec.core_noise_std)
    gen.add_argument("--eta", type=float, default=0.1)
    gen.add_argument("--classes", type=int, default=None)
    gen.add_argument("--dim", type=int, default=10)
    gen.add_argument("--separation", type=float, default=6.0)
    gen.add_argument("--data", help="input dataset CSV (gen noise)")
    gen.add_argument("--seed", type=int, default=0)
    add_out(gen)
    gen.set_defaults(func=cmd_gen)

    split = sub.add_parser("split", help="learn a non-generalizable train/test split")
    split.add_argument("--data", required=True)
    split.add_argument("--config", help="JSON object overriding LsConfig defaults")
    split.add_argument("--seed", type=int, default=None)
    split.add_argument("--seeds", help="comma-separated seed sweep, one subdirectory per seed")
    add_out(split)
    split.set_defaults(func=cmd_split)

    deb = sub.add_parser("debias", help="group DRO over learned (label, z) groups vs ERM")
    deb.add_argument("--data", required=True)
    deb.add_argument("--split", required=True)
    val = deb.add_mutually_exclusive_group()
    val.add_argument("--val-data")
    val.add_argument("--val-fraction", type=float, default=0.2)
    deb.add_argument("--eval-data", help="extra evaluation CSV; uses its spurious column if present")
    deb.add_argument("--config", help="JSON object overriding DroConfig defaults")
    deb.add_argument("--weight-decays", help="comma-separated weight decay grid (default 1,0.1,0.01,0.001,0)")
    deb.add_argument("--thresholded", action="store_true", help="groups from prob >= 0.5, not sampled z")
    deb.add_argument("--seed", type=int, default=None)
    add_out(deb)
    deb.set_defaults(func=cmd_debias)

    ne = sub.add_parser("noise-eval", help="score a split as a label-noise detector")
    ne.add_argument("--data", required=True)
    ne.add_argument("--split", required=True)
    add_out(ne)
    ne.set_defaults(func=cmd_noise_eval)
    return parser


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    logging.basicConfig(level=os.environ.get(LOG_ENV, "INFO").upper(), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        args.func(args, ["lsplit", *argv])
    except LsError as exc:
        log.error("%s", exc)
        return exc.exit_code
    except (OSError, json.JSONDecodeError) as exc:
        log.error("%s", exc)
        return ContractError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
