"""Command-line entry point: ``mssvae <subcommand> [options]``.

Exit codes: 0 success, 1 usage error, 2 invalid input, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np
import torch
import yaml

from . import datagen, identify, metrics
from .io import ValidationError, atomic_write_text, load_checkpoint, load_dataset, save_checkpoint, save_dataset
from .objective import NonFiniteLoss, TrainConfig, em_train, init_params
from .preprocess import PreprocessConfig, preprocess_counts

EXIT_OK, EXIT_USAGE, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2, 3


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageError(f"{self.prog}: error: {message}")


def load_config_file(path) -> dict:
    """Flat key-value YAML whose keys are ``TrainConfig`` field names."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    doc = yaml.safe_load(path.read_text()) or {}
    if not isinstance(doc, dict):
        raise ValidationError(f"{path}: expected a flat mapping of settings")
    known = {f.name for f in dataclasses.fields(TrainConfig)}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ValidationError(f"{path}: unknown setting(s) {', '.join(unknown)}")
    nested = [k for k, v in doc.items() if isinstance(v, dict)]
    if nested:
        raise ValidationError(f"{path}: settings must be flat; {', '.join(nested)} is a mapping")
    return doc


def make_config(args) -> TrainConfig:
    settings: dict = {}
    if getattr(args, "preset", None):
        from .objective import PRESETS

        if args.preset not in PRESETS:
            raise ValidationError(f"unknown training preset {args.preset!r}; choose from {sorted(PRESETS)}")
        settings.update(PRESETS[args.preset])
    if args.config:
        settings.update(load_config_file(args.config))
    if args.seed is not None:
        settings["seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        settings["epochs"] = args.epochs
    try:
        return TrainConfig(**settings)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"invalid training config: {exc}") from exc


def _parse_params(pairs) -> dict:
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise ValidationError(f"--param expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip().replace("-", "_")] = yaml.safe_load(v)
    return out


def cmd_simulate(args) -> int:
    seed = 0 if args.seed is None else args.seed
    params = _parse_params(args.param)
    if args.config:
        doc = yaml.safe_load(Path(args.config).read_text()) or {}
        params = {**doc, **params}
    try:
        ds, truth = datagen.simulate_preset(args.preset, seed, **params)
    except TypeError as exc:
        raise ValidationError(f"invalid generator setting: {exc}") from exc
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data_path = out / ("data.csv" if args.format == "csv" else "data")
    save_dataset(ds, data_path)
    datagen.save_ground_truth(truth, out / "truth", seed=seed)
    print(f"wrote {data_path} and {out / 'truth'}")
    return EXIT_OK


def cmd_train(args) -> int:
    config = make_config(args)
    data = load_dataset(args.data, counts=config.likelihood == "nb")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "train_log.tsv"
    torch.manual_seed(config.seed)
    if args.resume:
        state, _ = load_checkpoint(args.resume)
        if state.model.n_features != data.n_features:
            raise ValidationError("checkpoint and dataset have different feature counts")
        extra = args.epochs if args.epochs is not None else None
        state, _ = em_train(data, state.config, state=state, epochs=extra, verbose=not args.quiet,
                            log_path=log_path)
    else:
        if log_path.exists():
            log_path.unlink()
        state = init_params(data, config)
        state, _ = em_train(data, config, state=state, verbose=not args.quiet, log_path=log_path)
    save_checkpoint(state, out / "checkpoint")
    print(f"wrote {out / 'checkpoint'} after {state.epoch} epochs")
    return EXIT_OK


def _estimated_latents(state, data):
    X = torch.as_tensor(np.asarray(data.values), dtype=state.config.torch_dtype)
    labels = torch.as_tensor(data.labels, dtype=torch.long)
    return state.model.posterior_means(X, labels).double().numpy()


def cmd_evaluate(args) -> int:
    state, _ = load_checkpoint(args.checkpoint)
    truth = datagen.load_ground_truth(args.truth)
    Z_est = Z_true = None
    if args.data:
        data = load_dataset(args.data, counts=state.config.likelihood == "nb")
        if not np.array_equal(data.labels, truth.labels):
            raise ValidationError("dataset labels do not match the ground truth")
        Z_est, Z_true = _estimated_latents(state, data), truth.padded_latents()
    seed = 0 if args.seed is None else args.seed
    report = metrics.evaluate_masks(
        state.model.masks(), truth.masks, Z_est, Z_true, args.tau, args.max_density, seed=seed
    )
    _write(args.out, report.to_json())
    return EXIT_OK


def cmd_identify(args) -> int:
    data = load_dataset(args.data)
    report = identify.identify_anchors(data.values, tol=args.tol)
    _write(args.out, report.to_json())
    return EXIT_OK


def cmd_preprocess(args) -> int:
    ds = load_dataset(args.data, counts=True)
    cfg = PreprocessConfig(
        min_library=args.min_library, min_gene_total=args.min_gene_total, n_top_genes=args.n_top_genes,
        theta=args.theta,
    )
    filtered, _, _, report = preprocess_counts(ds, config=cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_dataset(filtered, out / "data.csv")
    atomic_write_text(out / "report.json", report.to_json())
    print(report.to_json())
    return EXIT_OK


def cmd_extract_clusters(args) -> int:
    state, _ = load_checkpoint(args.checkpoint)
    names = None
    if args.data:
        names = load_dataset(args.data).feature_names
    masks = state.model.masks()

    def describe(W, prefix):
        cs = metrics.extract_clusters(W, args.tau, args.max_density)
        return [
            {"matrix": prefix, "column": c, "features": [names[i] if names else int(i) for i in sorted(s)]}
            for c, s in zip(cs.columns, cs.sets)
        ]

    out = describe(masks.shared, "shared")
    for m, w in enumerate(masks.study):
        out += describe(w, f"study{m}")
    doc = {"tau": args.tau, "max_density": args.max_density, "clusters": out}
    _write(args.out, json.dumps(doc, indent=2))
    return EXIT_OK


def _write(out, text):
    if out in (None, "-"):
        print(text)
    else:
        atomic_write_text(out, text + "\n")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="random seed")
    common.add_argument("--config", default=None, help="flat YAML settings file")
    common.add_argument("--out", default=None, help="output path")

    p = _Parser(prog="mssvae", description="Multi-study sparse VAE tools")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("simulate", parents=[common], help="generate a synthetic benchmark")
    s.add_argument("--preset", required=True, choices=["gaussian-s5.1", "rnaseq-s5.2"])
    s.add_argument("--param", action="append", metavar="KEY=VALUE", help="override a generator setting")
    s.add_argument("--format", choices=["csv", "bin"], default="csv")
    s.set_defaults(func=cmd_simulate, out_default="sim")

    t = sub.add_parser("train", parents=[common], help="fit a model")
    t.add_argument("--data", required=True)
    t.add_argument("--preset", default=None, help="gaussian, rnaseq or platelet hyperparameters")
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--resume", default=None, help="checkpoint to continue from")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train, out_default="run")

    e = sub.add_parser("evaluate", parents=[common], help="score a checkpoint against ground truth")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--truth", required=True)
    e.add_argument("--data", default=None, help="dataset for the disentanglement score")
    e.add_argument("--tau", type=float, default=metrics.DEFAULT_TAU)
    e.add_argument("--max-density", type=float, default=metrics.DEFAULT_MAX_DENSITY)
    e.set_defaults(func=cmd_evaluate, out_default="-")

    i = sub.add_parser("identify", parents=[common], help="detect anchor features")
    i.add_argument("--data", required=True)
    i.add_argument("--tol", type=float, default=0.01)
    i.set_defaults(func=cmd_identify, out_default="-")

    pp = sub.add_parser("preprocess", parents=[common], help="filter counts and select variable genes")
    pp.add_argument("--data", required=True)
    pp.add_argument("--min-library", type=float, default=PreprocessConfig.min_library)
    pp.add_argument("--min-gene-total", type=float, default=PreprocessConfig.min_gene_total)
    pp.add_argument("--n-top-genes", type=int, default=PreprocessConfig.n_top_genes)
    pp.add_argument("--theta", type=float, default=PreprocessConfig.theta)
    pp.set_defaults(func=cmd_preprocess, out_default="preprocessed")

    x = sub.add_parser("extract-clusters", parents=[common], help="list features per mask column")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--data", default=None, help="dataset supplying feature names")
    x.add_argument("--tau", type=float, default=metrics.DEFAULT_TAU)
    x.add_argument("--max-density", type=float, default=metrics.DEFAULT_MAX_DENSITY)
    x.set_defaults(func=cmd_extract_clusters, out_default="-")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    if args.out is None:
        args.out = args.out_default
    try:
        return args.func(args)
    except (ValidationError, FileNotFoundError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (NonFiniteLoss, RuntimeError, OSError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
