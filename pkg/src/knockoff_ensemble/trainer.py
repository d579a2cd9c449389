"""Hyperparameter grid training with per-epoch CV loss and importance capture.

For every setting k (a depth and an L1 coefficient) the trainer fits one
model per CV fold plus one model on all rows, for the same number of epochs.
After each epoch it records the mean held-out data-fit loss of the fold
models and the importance vector of the full-data model.

Models that share a depth and a training-set size are advanced together as
one stacked network; each keeps its own seed-derived stream, so the result
for a setting does not depend on which other settings are in the grid.
"""

from __future__ import annotations

import csv
import json
import logging
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional, Sequence

import numpy as np
from sklearn.model_selection import KFold, StratifiedKFold

from .errors import ConfigError, DataError, TrainingError
from .model import Network, NetworkConfig, data_loss, forward, input_gradient_importance, train_step

log = logging.getLogger(__name__)

_FOLD_STREAM = 1
_MODEL_STREAM = 2
# Upper bound on elements of the (models x rows x inputs) importance tensor.
_EVAL_BUDGET = 20_000_000


@dataclass
class GridSpec:
    lambdas: Sequence[float]
    depths: Sequence[int] = (1,)
    epochs: int = 100
    folds: int = 5
    batch_size: int = 32
    learning_rate: float = 1e-3
    hidden: int = 25
    dropout: float = 0.5
    task: str = "regression"
    importance: str = "gradient"
    standardize_response: bool = True
    seed: int = 0
    # Seeds model initialization, shuffling and dropout; falls back to ``seed``.
    model_seed: Optional[int] = None

    def __post_init__(self):
        self.lambdas = [float(v) for v in self.lambdas]
        self.depths = [int(d) for d in self.depths]

    def validate(self) -> None:
        if not self.lambdas or not self.depths:
            raise ConfigError("grid needs at least one lambda and one depth")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.folds < 2:
            raise ConfigError(f"folds must be >= 2, got {self.folds}")
        if self.batch_size < 1 or self.learning_rate <= 0:
            raise ConfigError("batch size and learning rate must be positive")
        if self.seed < 0 or (self.model_seed is not None and self.model_seed < 0):
            raise ConfigError("grid seeds must be nonnegative")

    def settings(self) -> list:
        """Settings in index order: depth-major, then lambda."""
        return [{"depth": d, "lam": lam} for d in self.depths for lam in self.lambdas]

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class TrajectoryStore:
    """CV loss and importance per (setting, epoch) for completed settings.

    ``setting_ids`` lists the grid indices of the rows of ``cv_loss`` (K x E)
    and ``Z`` (K x E x d), in increasing order.
    """

    grid: GridSpec
    setting_ids: np.ndarray
    cv_loss: np.ndarray
    Z: np.ndarray
    failed: list = field(default_factory=list)

    @property
    def n_records(self) -> int:
        return self.cv_loss.size

    @property
    def epochs(self) -> int:
        return self.cv_loss.shape[1]

    def flat(self):
        """``(record_ids, losses, Z)`` with record ids as (setting, epoch) rows."""
        K, E = self.cv_loss.shape
        ids = np.column_stack([np.repeat(self.setting_ids, E), np.tile(np.arange(E), K)])
        return ids, self.cv_loss.reshape(-1), self.Z.reshape(K * E, -1)


class BestRecord(NamedTuple):
    setting: int
    epoch: int
    z: np.ndarray
    cv_loss: float


def best_cv_model(store: TrajectoryStore) -> BestRecord:
    """Record with the lowest CV loss; ties go to the lower setting, then epoch."""
    if store.n_records == 0:
        raise TrainingError("empty trajectory store")
    ids, losses, Z = store.flat()
    i = int(np.argmin(losses))
    return BestRecord(int(ids[i, 0]), int(ids[i, 1]), Z[i], float(losses[i]))


def fold_partition(y, folds: int, task: str, seed: int):
    """List of ``(train_idx, val_idx)``; stratified on the label for binary tasks."""
    y = np.asarray(y)
    state = int(np.random.SeedSequence([seed, _FOLD_STREAM]).generate_state(1)[0])
    if task == "binary":
        splitter = StratifiedKFold(n_splits=folds, shuffle=True, random_state=state)
        return [(tr, va) for tr, va in splitter.split(np.zeros(len(y)), y)]
    splitter = KFold(n_splits=folds, shuffle=True, random_state=state)
    return [(tr, va) for tr, va in splitter.split(np.zeros(len(y)))]


def model_rng(seed: int, setting: int, role: int) -> np.random.Generator:
    """Stream for one model; ``role`` is the fold index, or ``folds`` for the full-data model."""
    return np.random.default_rng([seed, _MODEL_STREAM, setting, role])


def _prepare_response(y, grid: GridSpec):
    y = np.asarray(y, dtype=float)
    if grid.task == "binary":
        if not np.all(np.isin(y, (0.0, 1.0))):
            raise DataError("binary task needs a 0/1 response")
        return y
    if grid.standardize_response:
        sd = y.std(ddof=1)
        if not sd > 0:
            raise DataError("response is constant")
        return (y - y.mean()) / sd
    return y


@dataclass
class _Job:
    setting: int
    role: int
    train_idx: np.ndarray
    val_idx: Optional[np.ndarray]


def _train_group(jobs, depth, Xaug, y, cov, grid, p, M, cv_loss, Z, bad):
    """Train one stack of same-shape jobs for all epochs, filling cv_loss/Z."""
    settings = grid.settings()
    nets = []
    for job in jobs:
        cfg = NetworkConfig(
            p=p,
            M=M,
            depth=depth,
            hidden=grid.hidden,
            lam=settings[job.setting]["lam"],
            dropout=grid.dropout,
            covariate_dim=0 if cov is None else cov.shape[1],
            task=grid.task,
        )
        seed = grid.seed if grid.model_seed is None else grid.model_seed
        nets.append(Network(cfg, rng=model_rng(seed, job.setting, job.role)))
    net = Network.stack(nets)
    G = len(jobs)
    n_train = len(jobs[0].train_idx)
    train_idx = np.stack([j.train_idx for j in jobs])
    is_fold = np.array([j.val_idx is not None for j in jobs])
    fold_members = np.flatnonzero(is_fold)
    full_members = np.flatnonzero(~is_fold)
    val_idx = np.stack([jobs[g].val_idx for g in fold_members]) if fold_members.size else None
    job_setting = np.array([j.setting for j in jobs])
    bs = grid.batch_size
    n_folds = grid.folds

    keep = 1.0 - grid.dropout
    for epoch in range(grid.epochs):
        # Per member and epoch: a row permutation, then one dropout draw
        # covering every batch of the epoch.
        perms, masks = [], []
        for rng in net.rngs:
            perms.append(rng.permutation(n_train))
            if grid.dropout > 0:
                masks.append(rng.random((n_train, p)) < keep)
        order = np.take_along_axis(train_idx, np.stack(perms), axis=1)
        if masks:
            masks = np.stack(masks) * (1.0 / keep)
        diverged = np.zeros(G, dtype=bool)
        for start in range(0, n_train, bs):
            idx = order[:, start : start + bs]
            losses = train_step(
                net,
                Xaug[idx],
                y[idx],
                grid.learning_rate,
                covariates=None if cov is None else cov[idx],
                check_finite=False,
                mask=masks[:, start : start + bs] if grid.dropout > 0 else None,
            )
            diverged |= ~np.isfinite(losses)

        with np.errstate(all="ignore"):
            if fold_members.size:
                vals = _fold_val_loss(net, fold_members, val_idx, Xaug, y, cov, grid.task)
                diverged[fold_members] |= ~np.isfinite(vals)
                np.add.at(cv_loss[:, epoch], job_setting[fold_members], vals / n_folds)
            if full_members.size:
                z = _importance(net, full_members, Xaug, cov, grid.importance)
                diverged[full_members] |= ~np.all(np.isfinite(z), axis=1)
                Z[job_setting[full_members], epoch] = z
        if diverged.any():
            for g in np.flatnonzero(diverged):
                if job_setting[g] not in bad:
                    bad[job_setting[g]] = epoch


def _contiguous_runs(members):
    """Split sorted member indices into (start, stop) runs."""
    runs = []
    start = prev = members[0]
    for g in members[1:]:
        if g != prev + 1:
            runs.append((start, prev + 1))
            start = g
        prev = g
    runs.append((start, prev + 1))
    return runs


def _fold_val_loss(net, members, val_idx, Xaug, y, cov, task):
    out = np.empty(len(members))
    pos = 0
    for start, stop in _contiguous_runs(members):
        sub = net.view(start, stop)
        idx = val_idx[pos : pos + stop - start]
        pred, _ = forward(sub, Xaug[idx], None if cov is None else cov[idx], train_mode=False)
        out[pos : pos + stop - start], _ = data_loss(pred, y[idx], task)
        pos += stop - start
    return out


def _importance(net, members, Xaug, cov, method):
    n, d = Xaug.shape
    chunk = max(1, _EVAL_BUDGET // max(1, n * d))
    rows = []
    for start, stop in _contiguous_runs(members):
        for a in range(start, stop, chunk):
            b = min(stop, a + chunk)
            rows.append(input_gradient_importance(net.view(a, b), Xaug, cov, method=method))
    return np.concatenate(rows, axis=0)


def run_grid(
    dataset,
    augmented,
    grid: GridSpec,
    out_dir=None,
    settings: Optional[Sequence[int]] = None,
) -> TrajectoryStore:
    """Train every grid setting and return the trajectory store.

    A setting whose training loss, held-out loss or importance ever becomes
    non-finite is dropped with a warning. With ``out_dir`` the store is
    persisted, and settings already present there are loaded, not retrained.
    """
    grid.validate()
    Xaug = np.asarray(augmented.Xaug, dtype=float)
    if Xaug.shape[0] != dataset.n:
        raise DataError(f"augmented data has {Xaug.shape[0]} rows, dataset has {dataset.n}")
    p, M = augmented.p, augmented.M
    if p != dataset.p:
        raise DataError(f"augmented data is for p={p}, dataset has p={dataset.p}")
    y = _prepare_response(dataset.y, grid)
    cov = dataset.covariates
    all_settings = grid.settings()
    wanted = list(range(len(all_settings))) if settings is None else sorted(set(settings))
    K, E, d = len(all_settings), grid.epochs, Xaug.shape[1]

    cv_loss = np.zeros((K, E))
    Z = np.zeros((K, E, d))
    bad = {}
    done = set()
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        prior_failed = set(_read_manifest(out_dir).get("failed", []))
        for k in wanted:
            path = _setting_path(out_dir, k)
            if path.exists():
                cv_loss[k], Z[k] = _read_setting(path, E, d)
                done.add(k)
            elif k in prior_failed:
                bad[k] = None
                done.add(k)
        if done:
            log.info("resuming: %d of %d settings already present", len(done), len(wanted))

    folds = fold_partition(dataset.y, grid.folds, grid.task, grid.seed)
    groups = {}
    for k in wanted:
        if k in done:
            continue
        depth = all_settings[k]["depth"]
        for role, (tr, va) in enumerate(folds):
            groups.setdefault((depth, len(tr)), []).append(_Job(k, role, tr, va))
        groups.setdefault((depth, dataset.n), []).append(
            _Job(k, grid.folds, np.arange(dataset.n), None)
        )
    for (depth, _), jobs in sorted(groups.items()):
        log.debug("training %d models at depth %d", len(jobs), depth)
        _train_group(jobs, depth, Xaug, y, cov, grid, p, M, cv_loss, Z, bad)

    for k, epoch in sorted(bad.items()):
        if k not in done:
            warnings.warn(f"setting {k} ({all_settings[k]}) diverged at epoch {epoch}; excluded")
    ok = np.array([k for k in wanted if k not in bad], dtype=int)
    if ok.size == 0:
        raise TrainingError("every grid setting diverged")
    store = TrajectoryStore(
        grid=grid, setting_ids=ok, cv_loss=cv_loss[ok], Z=Z[ok], failed=sorted(int(k) for k in bad)
    )
    if out_dir is not None:
        for k in ok:
            if k not in done:
                _write_setting(_setting_path(out_dir, k), cv_loss[k], Z[k])
        _write_manifest(out_dir, store, d)
    return store


def _setting_path(out_dir: Path, k: int) -> Path:
    return out_dir / f"setting_{k:04d}.csv"


def _write_setting(path: Path, losses, Z) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "cv_loss", *[f"z_{i + 1}" for i in range(Z.shape[1])]])
        for e, (loss, z) in enumerate(zip(losses, Z)):
            writer.writerow([e + 1, repr(float(loss)), *[repr(float(v)) for v in z]])


def _read_setting(path: Path, epochs: int, d: int):
    table = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if table.shape != (epochs, d + 2):
        raise DataError(f"{path}: shape {table.shape}, expected {(epochs, d + 2)}")
    return table[:, 1], table[:, 2:]


def _read_manifest(out_dir: Path) -> dict:
    path = out_dir / "manifest.json"
    if not path.exists():
        return {}
    return json.loads(path.read_text(encoding="utf-8"))


def _write_manifest(out_dir: Path, store: TrajectoryStore, d: int) -> None:
    payload = {
        "grid": store.grid.to_json(),
        "settings": store.grid.settings(),
        "completed": [int(k) for k in store.setting_ids],
        "failed": store.failed,
        "dimension": d,
    }
    (out_dir / "manifest.json").write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


def save_store(store: TrajectoryStore, out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for row, k in enumerate(store.setting_ids):
        _write_setting(_setting_path(out_dir, int(k)), store.cv_loss[row], store.Z[row])
    _write_manifest(out_dir, store, store.Z.shape[2])


def load_store(out_dir) -> TrajectoryStore:
    out_dir = Path(out_dir)
    manifest = _read_manifest(out_dir)
    if not manifest:
        raise DataError(f"{out_dir}: no manifest.json")
    grid = GridSpec(**manifest["grid"])
    d = manifest["dimension"]
    ids = np.asarray(manifest["completed"], dtype=int)
    losses = np.zeros((ids.size, grid.epochs))
    Z = np.zeros((ids.size, grid.epochs, d))
    for row, k in enumerate(ids):
        losses[row], Z[row] = _read_setting(_setting_path(out_dir, int(k)), grid.epochs, d)
    return TrajectoryStore(grid=grid, setting_ids=ids, cv_loss=losses, Z=Z, failed=manifest["failed"])
