"""Command-line entry point: ``nfloc <subcommand> [options]``.

Exit codes: 0 success, 2 configuration error, 3 format error, 4 training divergence.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys

import numpy as np

from . import bench
from .config import RunConfig, load_config
from .dataset import derive_seed, generate_dataset, read_dataset, simulate_scene, write_dataset
from .errors import ConfigError, FormatError, TrainingDivergence
from .music import estimate_locations_music, compute_spectrum, spectrum_to_bytes
from .neural import Architecture, TrainingConfig, load_model, predict, predict_batch, save_model, train
from .subspace import split_subspaces

log = logging.getLogger("nfloc")

EXIT_CONFIG, EXIT_FORMAT, EXIT_DIVERGED = 2, 3, 4


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _ints(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def _global_flags(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    p.add_argument("--config", default=d(None), help="scenario/experiment file (.toml or .json)")
    p.add_argument("--seed", type=int, default=d(None), help="master seed (overrides the config)")
    p.add_argument("--out-dir", default=d(None), help="directory for outputs (default: config or '.')")
    p.add_argument("-v", "--verbose", action="store_true", default=d(False), help="log progress to stderr")


def _grid_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("search grid")
    g.add_argument("--grid-az", type=int, help="azimuth points")
    g.add_argument("--grid-el", type=int, help="elevation points")
    g.add_argument("--grid-range", type=int, help="range points")
    g.add_argument("--range-min", type=float, help="lowest searched range (m)")
    g.add_argument("--range-max", type=float, help="highest searched range (m)")
    g.add_argument("--cache", action=argparse.BooleanOptionalAction, default=None,
                   help="precompute steering vectors (default: when they fit in memory)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nfloc", description="Near-field source localization: MUSIC and CNN.")
    _global_flags(parser, suppress=False)
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", parents=[common], help="simulate a labeled dataset")
    p.add_argument("--count", type=int, help="number of records (default: [training] count or 2000)")
    p.add_argument("--input-mode", choices=("signal", "full"), help="eigenvector columns kept in each tensor")
    p.add_argument("--out", help="dataset path (default: <out-dir>/dataset.bin)")

    p = sub.add_parser("train", parents=[common], help="train the CNN on a dataset file")
    p.add_argument("--dataset", required=True)
    p.add_argument("--preset", choices=("paper", "desk"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--dropout", type=float)
    p.add_argument("--dtype", choices=("float32", "float64"))
    p.add_argument("--paper-literal", action="store_true", help="softmax output layer instead of the default linear one")
    p.add_argument("--out", help="model path (default: <out-dir>/model.bin)")
    p.add_argument("--log", help="run log path (default: <out-dir>/train.log)")

    p = sub.add_parser("music", parents=[common], help="MUSIC estimate for one simulated scene")
    p.add_argument("--index", type=int, default=0, help="scene index; its seed derives from --seed")
    p.add_argument("--dump-spectrum", help="write the pseudospectrum (f64 binary with text header)")
    _grid_flags(p)

    p = sub.add_parser("predict", parents=[common], help="CNN estimates for dataset records or simulated scenes")
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", help="predict every record of this dataset")
    p.add_argument("--count", type=int, default=10, help="scenes to simulate when no dataset is given")

    p = sub.add_parser("rmse-sweep", parents=[common], help="RMSE vs snapshots and Rician factor (CSV)")
    p.add_argument("--model")
    p.add_argument("--methods", default="music,cnn")
    p.add_argument("--test-size", type=int)
    p.add_argument("--snapshots", type=_ints, help="comma-separated T values")
    p.add_argument("--kappas", type=_floats, help="comma-separated Rician factors")
    _grid_flags(p)

    p = sub.add_parser("runtime-bench", parents=[common], help="per-sample runtime of MUSIC vs CNN (CSV)")
    p.add_argument("--model", required=True)
    p.add_argument("--samples", type=int, default=3)
    p.add_argument("--repeats", type=int, default=10)
    p.add_argument("--snapshots", type=_ints)
    _grid_flags(p)

    p = sub.add_parser("scatter", parents=[common], help="truth vs estimates per source (CSV)")
    p.add_argument("--model", required=True)
    p.add_argument("--realizations", type=int, default=12)
    p.add_argument("--kappa", type=float, default=4.0)
    p.add_argument("--snapshots", type=int, default=25)
    _grid_flags(p)
    return parser


def _out(args, cfg: RunConfig, name: str, explicit: str | None = None) -> str:
    path = explicit or os.path.join(cfg.experiment.out_dir, name)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    return path


def _apply_grid(args, cfg: RunConfig):
    changes = {}
    for flag, key in (("grid_az", "n_azimuth"), ("grid_el", "n_elevation"), ("grid_range", "n_range")):
        if getattr(args, flag, None) is not None:
            changes[key] = getattr(args, flag)
    if getattr(args, "range_min", None) is not None or getattr(args, "range_max", None) is not None:
        lo, hi = cfg.experiment.grid.range_bounds or cfg.scenario.range_bounds
        changes["range_bounds"] = (args.range_min if args.range_min is not None else lo,
                                   args.range_max if args.range_max is not None else hi)
    if getattr(args, "cache", None) is not None:
        changes["cache"] = args.cache
    return bench.with_grid(cfg.experiment, **changes) if changes else cfg.experiment


def _load_model(path):
    if path is None:
        raise ConfigError("a trained model is required (--model)")
    try:
        return load_model(path)
    except OSError as exc:
        raise ConfigError(f"cannot read model {path}: {exc}") from exc


def cmd_generate(args, cfg: RunConfig) -> int:
    count = args.count if args.count is not None else int(cfg.training.get("count", 2000))
    mode = args.input_mode or cfg.training.get("input_mode", "signal")
    try:
        ds = generate_dataset(cfg.scenario, count, cfg.seed, input_mode=mode)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    path = _out(args, cfg, "dataset.bin", args.out)
    write_dataset(ds, path)
    print(path)
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    try:
        ds = read_dataset(args.dataset)
    except OSError as exc:
        raise ConfigError(f"cannot read dataset {args.dataset}: {exc}") from exc
    t = cfg.training
    overrides = {"input_mode": ds.input_mode}
    if args.dropout is not None or "dropout_rate" in t:
        overrides["dropout_rate"] = args.dropout if args.dropout is not None else float(t["dropout_rate"])
    if args.paper_literal or t.get("output_activation") == "softmax":
        overrides["output_activation"] = "softmax"
    try:
        arch = Architecture.preset(args.preset or t.get("preset", "desk"), ds.prior.geom.num_elements,
                                   3 * ds.prior.num_sources, **overrides)
        config = TrainingConfig(
            learning_rate=args.lr if args.lr is not None else float(t.get("learning_rate", 1e-4)),
            weight_decay=args.weight_decay if args.weight_decay is not None else float(t.get("weight_decay", 0.01)),
            batch_size=args.batch if args.batch is not None else int(t.get("batch_size", 32)),
            epochs=args.epochs if args.epochs is not None else int(t.get("epochs", 1200)),
            seed=cfg.seed if args.seed is not None else int(t.get("seed", cfg.seed)),
            dtype=args.dtype or t.get("dtype", "float64"),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    log_path = _out(args, cfg, "train.log", args.log)
    result = train(ds.inputs, ds.labels, ds.prior.label_bounds(), arch, config, log_path=log_path)
    result.model.meta = {"training": dataclasses.asdict(config), "dataset_seed": ds.master_seed,
                         "records": len(ds), "prior": ds.prior.to_dict()}
    path = _out(args, cfg, "model.bin", args.out)
    save_model(result.model, path)
    print(f"{path} final_loss={result.loss_history[-1]!r}")
    return 0


def cmd_music(args, cfg: RunConfig) -> int:
    exp = _apply_grid(args, cfg)
    prior = cfg.scenario
    grid = exp.grid.build(prior)
    scene = simulate_scene(prior, derive_seed(cfg.seed, args.index))
    k = prior.num_sources
    _, un = split_subspaces(scene.split, k)
    est = estimate_locations_music(None, k, grid, prior.geom, noise_subspace=un)
    if args.dump_spectrum:
        spectrum = compute_spectrum(un, grid, prior.geom)
        with open(_out(args, cfg, "", args.dump_spectrum), "wb") as fh:
            fh.write(spectrum_to_bytes(spectrum))
    truth = scene.labels.reshape(-1, 3)
    perm, _ = bench.match_sources(est.as_array(), truth)
    rows = []
    for s in range(k):
        p = est.positions[perm[s]]
        rows.append((s, p.x, p.y, p.z, p.azimuth, p.elevation, p.range, *map(float, truth[s])))
    text = bench.format_csv(("source", "x", "y", "z", "azimuth", "elevation", "range",
                             "truth_x", "truth_y", "truth_z"), rows)
    bench.write_csv(_out(args, cfg, "music.csv"), text)
    sys.stdout.write(text)
    log.info("music elapsed=%.4fs degenerate=%s", est.elapsed_seconds, est.degenerate)
    return 0


def cmd_predict(args, cfg: RunConfig) -> int:
    model = _load_model(args.model)
    if args.dataset:
        try:
            ds = read_dataset(args.dataset)
        except OSError as exc:
            raise ConfigError(f"cannot read dataset {args.dataset}: {exc}") from exc
        if ds.input_mode != model.arch.input_mode:
            raise ConfigError(f"dataset input mode {ds.input_mode!r} differs from the model's "
                              f"{model.arch.input_mode!r}")
        preds, truths = predict_batch(model, ds.inputs), ds.labels
    else:
        scenes = [simulate_scene(cfg.scenario, derive_seed(cfg.seed, i)) for i in range(args.count)]
        preds = np.array([predict(model, s.split).as_array().ravel() for s in scenes])
        truths = np.array([s.labels for s in scenes])
    rows = []
    for i, (p, t) in enumerate(zip(preds, truths)):
        for s, (ps, ts) in enumerate(zip(p.reshape(-1, 3), t.reshape(-1, 3))):
            rows.append((i, s, *map(float, ps), *map(float, ts)))
    text = bench.format_csv(("record", "source", "x", "y", "z", "truth_x", "truth_y", "truth_z"), rows)
    path = _out(args, cfg, "predictions.csv")
    bench.write_csv(path, text)
    print(path)
    return 0


def cmd_rmse_sweep(args, cfg: RunConfig) -> int:
    exp = _apply_grid(args, cfg)
    changes = {}
    if args.test_size is not None:
        changes["test_size"] = args.test_size
    if args.snapshots:
        changes["snapshot_counts"] = tuple(args.snapshots)
    if args.kappas:
        changes["kappas"] = tuple(args.kappas)
    if changes:
        exp = dataclasses.replace(exp, **changes)
    methods = tuple(m.strip() for m in args.methods.split(",") if m.strip())
    if not methods or set(methods) - {"music", "cnn"}:
        raise ConfigError(f"--methods must list music and/or cnn, got {args.methods!r}")
    model = _load_model(args.model or exp.model_path) if "cnn" in methods else None
    report = bench.run_rmse_experiment(exp, model, methods)
    path = _out(args, cfg, "rmse.csv")
    bench.write_csv(path, report.to_csv())
    print(path)
    return 0


def cmd_runtime_bench(args, cfg: RunConfig) -> int:
    exp = _apply_grid(args, cfg)
    if args.snapshots:
        exp = dataclasses.replace(exp, snapshot_counts=tuple(args.snapshots))
    report = bench.run_runtime_benchmark(exp, _load_model(args.model), args.samples, args.repeats)
    path = _out(args, cfg, "runtime.csv")
    bench.write_csv(path, report.to_csv())
    print(path)
    return 0


def cmd_scatter(args, cfg: RunConfig) -> int:
    exp = _apply_grid(args, cfg)
    text = bench.scatter_report(exp, _load_model(args.model), args.realizations, args.kappa, args.snapshots)
    path = _out(args, cfg, "scatter.csv")
    bench.write_csv(path, text)
    print(path)
    return 0


COMMANDS = {
    "generate": cmd_generate, "train": cmd_train, "music": cmd_music, "predict": cmd_predict,
    "rmse-sweep": cmd_rmse_sweep, "runtime-bench": cmd_runtime_bench, "scatter": cmd_scatter,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.seed, args.out_dir)
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"nfloc: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FormatError as exc:
        print(f"nfloc: format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except TrainingDivergence as exc:
        print(f"nfloc: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
