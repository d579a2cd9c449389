"""Importance ensembles over a trajectory store."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np

from .errors import ConfigError, EnsembleError
from .trainer import TrajectoryStore, best_cv_model

STRATEGIES = ("best", "avg", "top_m", "m_influential")
RANK_TOL = 1e-10


@dataclass(frozen=True)
class EnsembleSpec:
    strategy: str
    m: int = 1
    percentile_filter: Optional[float] = None
    seed: int = 0

    def validate(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}; choose from {STRATEGIES}")
        if self.m < 1:
            raise ConfigError(f"m must be >= 1, got {self.m}")
        if self.percentile_filter is not None and not 0 < self.percentile_filter <= 100:
            raise ConfigError(f"percentile_filter must be in (0, 100], got {self.percentile_filter}")

    @property
    def label(self) -> str:
        if self.strategy in ("best", "avg"):
            return self.strategy
        return f"{self.strategy}({self.m})"


class EnsembleResult(NamedTuple):
    z: np.ndarray
    record_ids: np.ndarray  # (n_used, 2) rows of (setting, epoch)


def average_all(store: TrajectoryStore) -> np.ndarray:
    if store.n_records == 0:
        raise EnsembleError("empty trajectory store")
    return store.Z.reshape(store.n_records, -1).mean(axis=0)


def _loss_order(store: TrajectoryStore):
    ids, losses, Z = store.flat()
    # Stable sort over (setting, epoch)-ordered records keeps the tie rule.
    order = np.argsort(losses, kind="stable")
    return ids, losses, Z, order


def top_m_average(store: TrajectoryStore, m: int) -> np.ndarray:
    return _top_m(store, m).z


def _top_m(store, m):
    if m < 1:
        raise EnsembleError(f"m must be >= 1, got {m}")
    if m > store.n_records:
        raise EnsembleError(f"m={m} exceeds the {store.n_records} available records")
    ids, _, Z, order = _loss_order(store)
    chosen = order[:m]
    return EnsembleResult(Z[chosen].mean(axis=0), ids[chosen])


def leverage_scores(Zmatrix) -> np.ndarray:
    """Diagonal of the hat matrix via a thin SVD.

    Rank is the number of singular values above ``1e-10 * sigma_max``; the
    leverages are the squared row norms of the matching left singular vectors.
    """
    Zmatrix = np.asarray(Zmatrix, dtype=float)
    if Zmatrix.ndim != 2 or min(Zmatrix.shape) < 1:
        raise EnsembleError(f"need a nonempty 2-d matrix, got shape {Zmatrix.shape}")
    if not np.any(Zmatrix):
        raise EnsembleError("leverage undefined for an all-zero matrix")
    U, sv, _ = np.linalg.svd(Zmatrix, full_matrices=False)
    rank = int(np.sum(sv > RANK_TOL * sv[0]))
    return (U[:, :rank] ** 2).sum(axis=1)


def percentile_eligible(losses, percentile: Optional[float]) -> np.ndarray:
    """Indices of records whose loss is at or below the given percentile."""
    losses = np.asarray(losses, dtype=float)
    if percentile is None:
        return np.arange(losses.size)
    cut = np.percentile(losses, percentile)
    return np.flatnonzero(losses <= cut)


def _m_influential(store, m, percentile_filter=None, seed=0):
    if m < 1:
        raise EnsembleError(f"m must be >= 1, got {m}")
    ids, losses, Z = store.flat()
    eligible = percentile_eligible(losses, percentile_filter)
    if eligible.size < m:
        raise EnsembleError(f"only {eligible.size} records eligible, need m={m}")
    h = leverage_scores(Z[eligible])
    weights = h / h.sum()
    if np.count_nonzero(weights) < m:
        raise EnsembleError(f"only {np.count_nonzero(weights)} records have nonzero leverage, need m={m}")
    rng = np.random.default_rng(seed)
    picked = eligible[rng.choice(eligible.size, size=m, replace=False, p=weights)]
    picked = np.sort(picked)
    return EnsembleResult(Z[picked].mean(axis=0), ids[picked])


def m_influential_average(store: TrajectoryStore, m: int, percentile_filter=None, seed=0) -> np.ndarray:
    """Mean of ``m`` distinct records drawn with probability proportional to leverage."""
    return _m_influential(store, m, percentile_filter, seed).z


def build_ensemble(store: TrajectoryStore, spec: EnsembleSpec) -> EnsembleResult:
    spec.validate()
    if spec.strategy == "best":
        best = best_cv_model(store)
        return EnsembleResult(best.z, np.array([[best.setting, best.epoch]]))
    if spec.strategy == "avg":
        ids, _, _ = store.flat()
        return EnsembleResult(average_all(store), ids)
    if spec.strategy == "top_m":
        return _top_m(store, spec.m)
    return _m_influential(store, spec.m, spec.percentile_filter, spec.seed)


def write_ensemble(result: EnsembleResult, spec: EnsembleSpec, csv_path, meta_path) -> None:
    with Path(csv_path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["index", "z"])
        for i, v in enumerate(result.z):
            writer.writerow([i + 1, repr(float(v))])
    payload = {
        **asdict(spec),
        "records": [[int(k), int(e) + 1] for k, e in result.record_ids],
    }
    Path(meta_path).write_text(json.dumps(payload) + "\n", encoding="utf-8")


def read_ensemble(csv_path) -> np.ndarray:
    table = np.loadtxt(csv_path, delimiter=",", skiprows=1, ndmin=2)
    return table[:, 1]
