"""Command-line interface.

Each subcommand reads and writes the CSV/JSON artifacts produced by the
library functions, so a run can be split into steps or done in one go with
``pipeline``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import datagen, knockoff, metrics, pipeline, trainer
from .ensemble import STRATEGIES, EnsembleSpec, build_ensemble, read_ensemble, write_ensemble
from .errors import ConfigError, KnockoffEnsembleError
from .selection import knockoff_select


def _base_config(args) -> pipeline.ExperimentConfig:
    cfg = pipeline.profile(args.profile)
    if args.config:
        cfg = pipeline.load_config_file(args.config, base=cfg)
    if args.seed is not None:
        cfg.seed = args.seed
    if getattr(args, "workers", None) is not None:
        cfg.workers = args.workers
    if args.out_dir is not None:
        cfg.out_dir = args.out_dir
    return cfg


def _out_dir(args) -> Path:
    out = Path(args.out_dir or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_dataset(args):
    return datagen.load_csv(args.data, args.response, args.covariates, standardize=not args.raw)


def cmd_simulate(args):
    cfg = _base_config(args)
    if cfg.sim is None:
        raise ConfigError("simulate needs a simulated data source")
    sim = cfg.sim if args.seed is None else replace(cfg.sim, seed=args.seed)
    if args.amplitude is not None:
        sim = replace(sim, amplitude=args.amplitude)
    dataset = datagen.simulate(sim)
    out = _out_dir(args)
    datagen.write_dataset_csv(dataset, out / "data.csv")
    datagen.write_sidecar(dataset, out / "data.json")
    print(out / "data.csv")


def cmd_knockoffs(args):
    dataset = _load_dataset(args)
    aug = knockoff.make_knockoffs(dataset.X, args.M, seed=args.seed if args.seed is not None else 0)
    out = _out_dir(args)
    knockoff.write_augmented(aug, out / "augmented.csv", out / "knockoff_model.json")
    print(out / "augmented.csv")


def cmd_train(args):
    cfg = _base_config(args)
    dataset = _load_dataset(args)
    aug = knockoff.read_augmented(args.augmented, args.knockoff_model)
    grid = cfg.grid if args.seed is None else replace(cfg.grid, seed=args.seed)
    out = _out_dir(args) / "trajectory"
    store = trainer.run_grid(dataset, aug, grid, out_dir=out)
    print(f"{len(store.setting_ids)} settings x {store.epochs} epochs -> {out}")


def cmd_ensemble(args):
    store = trainer.load_store(args.trajectory)
    spec = EnsembleSpec(
        args.strategy,
        m=args.m,
        percentile_filter=args.percentile_filter,
        seed=args.seed if args.seed is not None else 0,
    )
    result = build_ensemble(store, spec)
    out = _out_dir(args)
    write_ensemble(result, spec, out / "ensemble.csv", out / "ensemble.json")
    print(out / "ensemble.csv")


def cmd_select(args):
    z = read_ensemble(args.importance)
    report = knockoff_select(z, args.M, args.q, metadata={"importance": str(args.importance)})
    out = _out_dir(args)
    (out / "selection.json").write_text(json.dumps(report.to_json()) + "\n", encoding="utf-8")
    print(" ".join(str(j + 1) for j in report.selected))


def cmd_evaluate(args):
    selection = json.loads(Path(args.selection).read_text(encoding="utf-8"))
    truth = datagen.read_sidecar(args.truth)["support"]
    selected = [j - 1 for j in selection["selected"]]
    power, fdp = metrics.power_fdp(selected, truth)
    row = {"power": power, "fdp": fdp, "n_selected": len(selected)}
    out = _out_dir(args)
    metrics.write_results_csv([row], out / "evaluation.csv", ("power", "fdp", "n_selected"))
    print(f"power={power:.4f} fdp={fdp:.4f} n_selected={len(selected)}")


def cmd_pipeline(args):
    cfg = _base_config(args)
    if args.replicates is not None:
        cfg.replicates = args.replicates
    if args.no_artifacts:
        cfg.save_artifacts = False
    if cfg.out_dir is None:
        cfg.out_dir = "."
    result = pipeline.run_experiment(cfg)
    for row in result["summary"]:
        print(
            f"A={row['amplitude']} {row['strategy']:<20} power={_f(row['mean_power'])} "
            f"fdp={_f(row['mean_fdp'])} n_selected={_f(row['mean_n_selected'])}"
        )


def cmd_stability(args):
    cfg = _base_config(args)
    report = pipeline.stability_experiment(cfg, n_repeats=args.repeats, replicate=args.replicate)
    for label, info in report["strategies"].items():
        print(f"{label:<20} median_jaccard={info['median_jaccard']:.4f}")


def _f(v):
    return "NA" if v is None else f"{v:.4f}"


def _add_common(sp, config=True):
    sp.add_argument("--seed", type=int, default=None, help="master seed")
    sp.add_argument("--out-dir", default=None, help="output directory (default: current)")
    if config:
        sp.add_argument("--config", default=None, help="JSON or YAML config overlaid on the profile")
        sp.add_argument("--profile", choices=("desk", "paper", "real"), default="desk")


def _add_data(sp):
    sp.add_argument("--data", required=True, help="numeric CSV with a header row")
    sp.add_argument("--response", default="y", help="response column name")
    sp.add_argument("--covariates", nargs="*", default=[], help="covariate column names")
    sp.add_argument("--raw", action="store_true", help="do not standardize feature columns")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="knockoff-ensemble",
        description="Knockoff feature selection with importance ensembles over a training path.",
    )
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("simulate", help="write a simulated dataset and its ground truth")
    _add_common(sp)
    sp.add_argument("--amplitude", type=float, default=None)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("knockoffs", help="fit a Gaussian model and sample knockoff copies")
    _add_common(sp, config=False)
    _add_data(sp)
    sp.add_argument("--M", type=int, default=1, help="number of knockoff copies")
    sp.set_defaults(func=cmd_knockoffs)

    sp = sub.add_parser("train", help="train the hyperparameter grid and store the trajectory")
    _add_common(sp)
    _add_data(sp)
    sp.add_argument("--augmented", required=True)
    sp.add_argument("--knockoff-model", required=True)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("ensemble", help="combine stored importance vectors")
    _add_common(sp, config=False)
    sp.add_argument("--trajectory", required=True, help="directory written by train")
    sp.add_argument("--strategy", choices=STRATEGIES, default="best")
    sp.add_argument("--m", type=int, default=1)
    sp.add_argument("--percentile-filter", type=float, default=None)
    sp.set_defaults(func=cmd_ensemble)

    sp = sub.add_parser("select", help="apply the knockoff filter to an importance vector")
    _add_common(sp, config=False)
    sp.add_argument("--importance", required=True, help="CSV written by ensemble")
    sp.add_argument("--M", type=int, default=1)
    sp.add_argument("--q", type=float, default=0.2)
    sp.set_defaults(func=cmd_select)

    sp = sub.add_parser("evaluate", help="power and FDP of a selection against ground truth")
    _add_common(sp, config=False)
    sp.add_argument("--selection", required=True)
    sp.add_argument("--truth", required=True, help="sidecar JSON written by simulate")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("pipeline", help="full experiment over replicates")
    _add_common(sp)
    sp.add_argument("--workers", type=int, default=None)
    sp.add_argument("--replicates", type=int, default=None)
    sp.add_argument("--no-artifacts", action="store_true", help="write only results and summary CSVs")
    sp.set_defaults(func=cmd_pipeline)

    sp = sub.add_parser("stability", help="retrain with different model seeds and compare selections")
    _add_common(sp)
    sp.add_argument("--repeats", type=int, default=5)
    sp.add_argument("--replicate", type=int, default=0)
    sp.set_defaults(func=cmd_stability)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except KnockoffEnsembleError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
