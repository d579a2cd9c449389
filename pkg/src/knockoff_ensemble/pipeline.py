"""End-to-end experiments: data, knockoffs, grid training, ensembles, filter, metrics."""

from __future__ import annotations

import copy
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from statistics import median
from typing import Optional

import numpy as np

from . import datagen, knockoff, metrics, trainer
from .datagen import SimConfig
from .ensemble import EnsembleSpec, build_ensemble, write_ensemble
from .errors import ConfigError, KnockoffEnsembleError
from .selection import knockoff_select
from .trainer import GridSpec

log = logging.getLogger(__name__)

RESULT_COLUMNS = ("amplitude", "replicate", "strategy", "power", "fdp", "n_selected")
SUMMARY_COLUMNS = ("amplitude", "strategy", "replicates", "mean_power", "mean_fdp", "mean_n_selected")


def derive_seed(*keys) -> int:
    """Deterministic 64-bit seed from a tuple of nonnegative integers."""
    state = np.random.SeedSequence([int(k) for k in keys]).generate_state(2, dtype=np.uint32)
    return int(state[0]) << 32 | int(state[1])


@dataclass
class CSVSource:
    path: str
    response: str
    covariates: list = field(default_factory=list)
    standardize: bool = True


@dataclass
class ExperimentConfig:
    sim: Optional[SimConfig] = None
    csv: Optional[CSVSource] = None
    amplitudes: Optional[list] = None
    M: int = 1
    grid: GridSpec = field(default_factory=lambda: GridSpec(lambdas=[1e-3]))
    strategies: list = field(default_factory=lambda: [EnsembleSpec("best")])
    q: float = 0.2
    replicates: int = 1
    seed: int = 0
    out_dir: Optional[str] = None
    save_artifacts: bool = True
    workers: int = 1

    def validate(self) -> None:
        if (self.sim is None) == (self.csv is None):
            raise ConfigError("exactly one data source (sim or csv) is required")
        if not 0 < self.q < 1:
            raise ConfigError(f"q must lie in (0, 1), got {self.q}")
        if self.replicates < 1:
            raise ConfigError("need at least one replicate")
        if self.M < 1:
            raise ConfigError("knockoff copy count M must be >= 1")
        if self.seed < 0:
            raise ConfigError("seed must be nonnegative")
        if not self.strategies:
            raise ConfigError("at least one ensemble strategy is required")
        if self.amplitudes is not None and self.sim is None:
            raise ConfigError("amplitude sweeps need a simulated data source")
        if self.sim is not None:
            self.sim.validate()
        self.grid.validate()
        for spec in self.strategies:
            spec.validate()

    def amplitude_list(self) -> list:
        if self.sim is None:
            return [None]
        return list(self.amplitudes) if self.amplitudes else [self.sim.amplitude]


def lambda_grid(low: float, high: float, count: int) -> list:
    """``count`` L1 coefficients log-spaced over ``[low, high]``."""
    if not 0 < low <= high or count < 1:
        raise ConfigError(f"bad lambda range [{low}, {high}] x {count}")
    return [float(v) for v in np.logspace(np.log10(low), np.log10(high), count)]


def profile(name: str) -> ExperimentConfig:
    """Preset experiment sizes: ``desk`` runs in minutes, ``paper`` at full scale."""
    if name == "desk":
        return ExperimentConfig(
            sim=SimConfig(n=500, p=100, r=3, s=10, amplitude=20.0),
            M=1,
            grid=GridSpec(lambdas=lambda_grid(1e-4, 1e-1, 20), depths=[1], epochs=100, batch_size=32),
            strategies=[
                EnsembleSpec("best"),
                EnsembleSpec("avg"),
                EnsembleSpec("top_m", m=100),
                EnsembleSpec("m_influential", m=100),
            ],
            q=0.2,
            replicates=10,
        )
    if name == "paper":
        return ExperimentConfig(
            sim=SimConfig(n=1000, p=500, r=3, s=25, amplitude=20.0),
            amplitudes=[10.0, 15.0, 20.0, 25.0, 30.0],
            M=1,
            grid=GridSpec(lambdas=lambda_grid(1e-5, 1e-1, 100), depths=[1, 2, 3], epochs=300, batch_size=32),
            strategies=[
                EnsembleSpec("best"),
                EnsembleSpec("avg"),
                EnsembleSpec("top_m", m=500),
                EnsembleSpec("m_influential", m=500),
            ],
            q=0.2,
            replicates=100,
        )
    if name == "real":
        return ExperimentConfig(
            M=5,
            grid=GridSpec(
                lambdas=lambda_grid(1e-4, 1e-1, 20),
                depths=[3],
                epochs=100,
                batch_size=128,
                hidden=50,
                task="binary",
            ),
            strategies=[
                EnsembleSpec("best"),
                EnsembleSpec("avg"),
                EnsembleSpec("top_m", m=100),
                EnsembleSpec("m_influential", m=100, percentile_filter=25.0),
            ],
            q=0.2,
            replicates=1,
        )
    raise ConfigError(f"unknown profile {name!r}; choose desk, paper or real")


def _update_dataclass(obj, values: dict, what: str):
    known = {f.name for f in fields(obj)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown {what} key(s): {', '.join(sorted(unknown))}")
    return replace(obj, **values)


def config_from_mapping(raw: dict, base: Optional[ExperimentConfig] = None) -> ExperimentConfig:
    """Overlay a parsed config file on a profile (or the defaults).

    Recognized sections: ``profile``, ``data`` (SimConfig keys, or ``csv`` with
    path/response/covariates/standardize), ``grid`` (GridSpec keys, plus
    ``lambda_range: [low, high, count]``), ``ensembles`` (list of
    EnsembleSpec mappings) and the scalars ``M``, ``q``, ``replicates``,
    ``seed``, ``amplitudes``, ``save_artifacts``, ``workers``.
    """
    raw = dict(raw)
    cfg = copy.deepcopy(base) if base is not None else None
    name = raw.pop("profile", None)
    if name is not None:
        cfg = profile(name)
    if cfg is None:
        cfg = ExperimentConfig()

    data = raw.pop("data", None)
    if data is not None:
        data = dict(data)
        if "csv" in data:
            src = data.pop("csv")
            if data:
                raise ConfigError(f"unexpected keys next to csv: {sorted(data)}")
            cfg.csv = CSVSource(**src) if isinstance(src, dict) else CSVSource(path=src, response="y")
            cfg.sim = None
            cfg.amplitudes = None
        else:
            cfg.sim = _update_dataclass(cfg.sim or SimConfig(), data, "data")
            cfg.csv = None

    grid = raw.pop("grid", None)
    if grid is not None:
        grid = dict(grid)
        if "lambda_range" in grid:
            low, high, count = grid.pop("lambda_range")
            grid["lambdas"] = lambda_grid(float(low), float(high), int(count))
        cfg.grid = _update_dataclass(cfg.grid, grid, "grid")

    ens = raw.pop("ensembles", None)
    if ens is not None:
        cfg.strategies = [EnsembleSpec(**e) for e in ens]

    for key in ("M", "q", "replicates", "seed", "amplitudes", "save_artifacts", "workers", "out_dir"):
        if key in raw:
            setattr(cfg, key, raw.pop(key))
    if raw:
        raise ConfigError(f"unknown config key(s): {', '.join(sorted(raw))}")
    return cfg


def load_config_file(path, base: Optional[ExperimentConfig] = None) -> ExperimentConfig:
    """Read a JSON or YAML config file."""
    text = Path(path).read_text(encoding="utf-8")
    if str(path).endswith((".yaml", ".yml")):
        import yaml

        raw = yaml.safe_load(text) or {}
    else:
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return config_from_mapping(raw, base)


def _rep_dir(cfg, a_idx, amplitude, rep) -> Optional[Path]:
    if cfg.out_dir is None or not cfg.save_artifacts:
        return None
    root = Path(cfg.out_dir)
    if amplitude is not None and len(cfg.amplitude_list()) > 1:
        root = root / f"amplitude_{a_idx}"
    path = root / f"replicate_{rep:03d}"
    path.mkdir(parents=True, exist_ok=True)
    return path


def replicate_inputs(cfg: ExperimentConfig, a_idx: int, amplitude, rep: int):
    """Dataset and knockoffs for one replicate, from seeds derived off ``cfg.seed``."""
    if cfg.sim is not None:
        sim = replace(cfg.sim, amplitude=amplitude, seed=derive_seed(cfg.seed, 1, a_idx, rep))
        dataset = datagen.simulate(sim)
    else:
        src = cfg.csv
        dataset = datagen.load_csv(src.path, src.response, src.covariates, src.standardize)
    task = cfg.grid.task
    if task == "binary" and cfg.sim is not None and cfg.sim.task != "binary":
        raise ConfigError("grid task is binary but the simulation is a regression")
    aug = knockoff.make_knockoffs(dataset.X, cfg.M, seed=derive_seed(cfg.seed, 2, a_idx, rep))
    return dataset, aug


def _select_all(cfg, store, dataset, a_idx, rep, rep_dir):
    rows, reports = [], {}
    for s_idx, spec in enumerate(cfg.strategies):
        spec = replace(spec, seed=derive_seed(cfg.seed, 4, a_idx, rep, s_idx))
        try:
            result = build_ensemble(store, spec)
            report = knockoff_select(result.z, cfg.M, cfg.q, metadata=asdict(spec))
        except KnockoffEnsembleError as exc:
            raise type(exc)(f"strategy {spec.label}: {exc}") from exc
        reports[spec.label] = (result, report)
        power = fdp = None
        if dataset.true_support is not None and dataset.true_support.size:
            power, fdp = metrics.power_fdp(report.selected, dataset.true_support)
        rows.append(
            {
                "strategy": spec.label,
                "power": power,
                "fdp": fdp,
                "n_selected": int(report.selected.size),
            }
        )
        if rep_dir is not None:
            stem = spec.label.replace("(", "_").replace(")", "")
            write_ensemble(result, spec, rep_dir / f"ensemble_{stem}.csv", rep_dir / f"ensemble_{stem}.json")
            (rep_dir / f"selection_{stem}.json").write_text(
                json.dumps(report.to_json()) + "\n", encoding="utf-8"
            )
    return rows, reports


def run_replicate(cfg: ExperimentConfig, a_idx: int, amplitude, rep: int) -> list:
    """One replicate: fresh data and knockoffs, one grid, every strategy."""
    try:
        dataset, aug = replicate_inputs(cfg, a_idx, amplitude, rep)
        rep_dir = _rep_dir(cfg, a_idx, amplitude, rep)
        if rep_dir is not None:
            datagen.write_dataset_csv(dataset, rep_dir / "data.csv")
            datagen.write_sidecar(dataset, rep_dir / "data.json")
            knockoff.write_augmented(aug, rep_dir / "augmented.csv", rep_dir / "knockoff_model.json")
        grid = replace(cfg.grid, seed=derive_seed(cfg.seed, 3, a_idx, rep))
        store = trainer.run_grid(dataset, aug, grid, out_dir=None if rep_dir is None else rep_dir / "trajectory")
        rows, _ = _select_all(cfg, store, dataset, a_idx, rep, rep_dir)
    except KnockoffEnsembleError as exc:
        raise type(exc)(f"replicate {rep} (amplitude {amplitude}): {exc}") from exc
    for row in rows:
        row.update(amplitude=amplitude, replicate=rep)
    log.info("amplitude %s replicate %d done", amplitude, rep)
    return rows


def _mean(values):
    values = [v for v in values if v is not None]
    return math.fsum(values) / len(values) if values else None


def aggregate(rows: list, strategies: list) -> list:
    """Mean power, FDP and selection count per (amplitude, strategy)."""
    out = []
    amplitudes = []
    for r in rows:
        if r["amplitude"] not in amplitudes:
            amplitudes.append(r["amplitude"])
    for a in amplitudes:
        for label in strategies:
            sub = [r for r in rows if r["amplitude"] == a and r["strategy"] == label]
            if not sub:
                continue
            out.append(
                {
                    "amplitude": a,
                    "strategy": label,
                    "replicates": len(sub),
                    "mean_power": _mean([r["power"] for r in sub]),
                    "mean_fdp": _mean([r["fdp"] for r in sub]),
                    "mean_n_selected": _mean([float(r["n_selected"]) for r in sub]),
                }
            )
    return out


def run_experiment(cfg: ExperimentConfig) -> dict:
    """Run every (amplitude, replicate) job and aggregate per strategy.

    Returns ``{"rows": [...], "summary": [...]}``. With ``out_dir`` set,
    ``results.csv`` and ``summary.csv`` are written there, plus per-replicate
    artifacts when ``save_artifacts`` is on.
    """
    cfg.validate()
    jobs = [
        (a_idx, amplitude, rep)
        for a_idx, amplitude in enumerate(cfg.amplitude_list())
        for rep in range(cfg.replicates)
    ]
    if cfg.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            futures = [pool.submit(run_replicate, cfg, *job) for job in jobs]
            per_job = [f.result() for f in futures]
    else:
        per_job = [run_replicate(cfg, *job) for job in jobs]
    rows = [row for job_rows in per_job for row in job_rows]
    labels = [s.label for s in cfg.strategies]
    summary = aggregate(rows, labels)
    if cfg.out_dir is not None:
        out = Path(cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        metrics.write_results_csv(rows, out / "results.csv", RESULT_COLUMNS)
        metrics.write_results_csv(summary, out / "summary.csv", SUMMARY_COLUMNS)
    return {"rows": rows, "summary": summary}


def stability_experiment(
    cfg: ExperimentConfig,
    n_repeats: int = 5,
    replicate: int = 0,
    vary_seed: bool = True,
) -> dict:
    """Retrain the grid ``n_repeats`` times on one replicate's data and knockoffs.

    Only the model seeds (initialization, shuffling, dropout) change between
    repeats; fold assignment, data and knockoffs are held fixed. With
    ``vary_seed=False`` every repeat uses the same model seed. Reports the
    pairwise Jaccard similarity of selections per strategy and the
    instability profile of each strategy's original-feature importances.
    """
    cfg.validate()
    if n_repeats < 2:
        raise ConfigError("stability needs at least two repeats")
    a_idx, amplitude = 0, cfg.amplitude_list()[0]
    dataset, aug = replicate_inputs(cfg, a_idx, amplitude, replicate)
    base_grid = replace(cfg.grid, seed=derive_seed(cfg.seed, 3, a_idx, replicate))
    p = dataset.p
    selections = {s.label: [] for s in cfg.strategies}
    zs = {s.label: [] for s in cfg.strategies}
    powers = {s.label: [] for s in cfg.strategies}
    for r in range(n_repeats):
        model_seed = derive_seed(cfg.seed, 5, replicate, r if vary_seed else 0)
        store = trainer.run_grid(dataset, aug, replace(base_grid, model_seed=model_seed))
        rows, reports = _select_all(cfg, store, dataset, a_idx, replicate, None)
        for row in rows:
            label = row["strategy"]
            result, report = reports[label]
            selections[label].append(sorted(int(j) for j in report.selected))
            zs[label].append(result.z[:p])
            powers[label].append(row["power"])
        log.info("stability repeat %d done", r)

    report = {"n_repeats": n_repeats, "replicate": replicate, "strategies": {}}
    for label in selections:
        pairs = metrics.pairwise_jaccard([set(s) for s in selections[label]])
        inst, strength, zero = metrics.instability_profile(np.vstack(zs[label]))
        report["strategies"][label] = {
            "jaccard": pairs,
            "median_jaccard": median(pairs),
            "selections": [[j + 1 for j in s] for s in selections[label]],
            "power": powers[label],
            "mean_instability": float(inst[~zero].mean()) if np.any(~zero) else 0.0,
            "instability": inst.tolist(),
            "signal_strength": strength.tolist(),
        }
    if cfg.out_dir is not None:
        out = Path(cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "stability.json").write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
        rows = [
            {"strategy": label, "pair": i, "jaccard": v}
            for label, info in report["strategies"].items()
            for i, v in enumerate(info["jaccard"])
        ]
        metrics.write_results_csv(rows, out / "stability_jaccard.csv", ("strategy", "pair", "jaccard"))
    return report
