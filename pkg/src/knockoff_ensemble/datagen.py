"""Synthetic linear-factor datasets and CSV ingestion."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, ConstantColumnError, DataError, MissingColumnError, NonNumericError

TASKS = ("regression", "binary")


@dataclass(frozen=True)
class SimConfig:
    """Parameters of the latent-factor simulation.

    ``null=True`` forces the coefficient vector to zero so the response is
    pure noise; the support is then empty.
    """

    n: int = 1000
    p: int = 500
    r: int = 3
    s: int = 25
    amplitude: float = 20.0
    noise_scale: float = 1.0
    task: str = "regression"
    seed: int = 0
    null: bool = False

    def validate(self) -> None:
        if self.n <= 0 or self.p <= 0:
            raise ConfigError(f"n and p must be positive, got n={self.n}, p={self.p}")
        if not 0 < self.s <= self.p:
            raise ConfigError(f"need 0 < s <= p, got s={self.s}, p={self.p}")
        if self.r < 1:
            raise ConfigError(f"need r >= 1, got r={self.r}")
        if not self.amplitude > 0:
            raise ConfigError(f"amplitude must be positive, got {self.amplitude}")
        if self.noise_scale < 0:
            raise ConfigError(f"noise_scale must be nonnegative, got {self.noise_scale}")
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    covariates: Optional[np.ndarray] = None
    true_support: Optional[np.ndarray] = None
    beta: Optional[np.ndarray] = None
    feature_names: Optional[list] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        if self.X.ndim != 2:
            raise DataError(f"X must be 2-dimensional, got shape {self.X.shape}")
        if self.y.shape != (self.X.shape[0],):
            raise DataError(f"y has shape {self.y.shape}, expected ({self.X.shape[0]},)")
        if self.covariates is not None:
            self.covariates = np.asarray(self.covariates, dtype=float)
            if self.covariates.ndim != 2 or self.covariates.shape[0] != self.X.shape[0]:
                raise DataError("covariates must be an n x c matrix aligned with X")
        for name, arr in (("X", self.X), ("y", self.y), ("covariates", self.covariates)):
            if arr is not None and not np.all(np.isfinite(arr)):
                raise DataError(f"{name} contains NaN or Inf entries")
        if self.true_support is not None:
            self.true_support = np.asarray(self.true_support, dtype=int)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def covariate_dim(self) -> int:
        return 0 if self.covariates is None else self.covariates.shape[1]


def simulate(cfg: SimConfig) -> Dataset:
    """Draw ``X = F @ Lambda + E`` and a sparse linear (or logistic) response.

    F (n x r), Lambda (r x p) and E (n x p) are i.i.d. N(0, 1). ``s`` signal
    positions are chosen uniformly without replacement and given coefficients
    +A or -A with equal probability.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    F = rng.standard_normal((cfg.n, cfg.r))
    loadings = rng.standard_normal((cfg.r, cfg.p))
    X = F @ loadings + rng.standard_normal((cfg.n, cfg.p))

    beta = np.zeros(cfg.p)
    if cfg.null:
        support = np.array([], dtype=int)
    else:
        support = np.sort(rng.choice(cfg.p, size=cfg.s, replace=False))
        beta[support] = rng.choice([cfg.amplitude, -cfg.amplitude], size=cfg.s)

    eta = X @ beta
    if cfg.task == "regression":
        y = eta + cfg.noise_scale * rng.standard_normal(cfg.n)
    else:
        prob = 0.5 * (1.0 + np.tanh(0.5 * eta))
        y = (rng.random(cfg.n) < prob).astype(float)

    return Dataset(
        X=X,
        y=y,
        true_support=support,
        beta=beta,
        meta={"seed": cfg.seed, "task": cfg.task, "amplitude": cfg.amplitude, "loadings": loadings},
    )


def standardize_columns(X: np.ndarray, names: Optional[Sequence[str]] = None) -> np.ndarray:
    """Center each column and scale to unit sample variance (ddof=1)."""
    X = np.asarray(X, dtype=float)
    sd = X.std(axis=0, ddof=1)
    constant = np.flatnonzero(~(sd > 0))
    if constant.size:
        labels = [names[j] if names is not None else str(j) for j in constant]
        raise ConstantColumnError(f"cannot standardize constant column(s): {', '.join(labels)}")
    return (X - X.mean(axis=0)) / sd


def load_csv(
    path,
    response_column: str,
    covariate_columns: Sequence[str] = (),
    standardize: bool = False,
) -> Dataset:
    """Read a fully numeric CSV with a header row.

    Every column other than the response and covariates becomes a feature,
    in header order.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        rows = [row for row in reader if row]

    wanted = [response_column, *covariate_columns]
    for col in wanted:
        if col not in header:
            raise MissingColumnError(f"{path}: column {col!r} not found in header")

    values = np.empty((len(rows), len(header)))
    for i, row in enumerate(rows):
        if len(row) != len(header):
            raise DataError(f"{path}: row {i + 2} has {len(row)} cells, header has {len(header)}")
        for j, cell in enumerate(row):
            try:
                values[i, j] = float(cell)
            except ValueError:
                raise NonNumericError(
                    f"{path}: non-numeric cell {cell!r} at row {i + 2}, column {header[j]!r}"
                ) from None
            if not math.isfinite(values[i, j]):
                raise NonNumericError(f"{path}: non-finite cell at row {i + 2}, column {header[j]!r}")

    feature_cols = [j for j, h in enumerate(header) if h not in wanted]
    names = [header[j] for j in feature_cols]
    X = values[:, feature_cols]
    if standardize:
        X = standardize_columns(X, names)
    covariates = None
    if covariate_columns:
        covariates = values[:, [header.index(c) for c in covariate_columns]]
    y = values[:, header.index(response_column)]
    return Dataset(X=X, y=y, covariates=covariates, feature_names=names, meta={"source": str(path)})


def feature_correlation_profile(X: np.ndarray) -> np.ndarray:
    """For each column, the largest Pearson correlation with any other column.

    Correlations involving a zero-variance column are treated as 0. Works on
    any (rows x columns) matrix, e.g. a stack of importance vectors.
    """
    X = np.asarray(X, dtype=float)
    n, p = X.shape
    if n < 3:
        raise DataError(f"need at least 3 rows, got {n}")
    if p < 2:
        raise DataError("need at least 2 columns")
    centered = X - X.mean(axis=0)
    norms = np.sqrt((centered**2).sum(axis=0))
    ok = norms > 0
    unit = np.zeros_like(centered)
    unit[:, ok] = centered[:, ok] / norms[ok]
    corr = np.clip(unit.T @ unit, -1.0, 1.0)
    np.fill_diagonal(corr, -np.inf)
    return corr.max(axis=1)


def write_dataset_csv(dataset: Dataset, path, response_name: str = "y") -> None:
    """Write features, covariates and response in the ingestion schema."""
    names = dataset.feature_names or [f"X_{j + 1}" for j in range(dataset.p)]
    cov_names = [f"C_{j + 1}" for j in range(dataset.covariate_dim)]
    cols = [dataset.X]
    if dataset.covariates is not None:
        cols.append(dataset.covariates)
    cols.append(dataset.y[:, None])
    table = np.hstack(cols)
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([*names, *cov_names, response_name])
        for row in table:
            writer.writerow([repr(float(v)) for v in row])


def write_sidecar(dataset: Dataset, path) -> None:
    payload = {
        "seed": dataset.meta.get("seed"),
        "support": None if dataset.true_support is None else [int(j) + 1 for j in dataset.true_support],
        "beta": None if dataset.beta is None else [float(b) for b in dataset.beta],
    }
    Path(path).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


def read_sidecar(path) -> dict:
    """Load a sidecar; support indices come back 0-based."""
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    if payload.get("support") is not None:
        payload["support"] = np.asarray(payload["support"], dtype=int) - 1
    return payload
