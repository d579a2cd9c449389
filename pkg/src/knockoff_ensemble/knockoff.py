"""Second-order Gaussian knockoffs: single copies and SCIT multiple copies.

Augmented matrices use the block layout ``[X | K1 | ... | KM]``; column ``j``
of block ``m`` is the m-th knockoff of feature ``j``.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, KnockoffError

MIN_EIGENVALUE = 1e-6
JITTER = 1e-8


@dataclass
class KnockoffModel:
    mu: np.ndarray
    Sigma: np.ndarray
    s: np.ndarray
    M: int = 1

    @property
    def p(self) -> int:
        return self.mu.shape[0]

    def to_json(self) -> dict:
        return {
            "mu": self.mu.tolist(),
            "Sigma": self.Sigma.tolist(),
            "s": self.s.tolist(),
            "M": int(self.M),
        }

    @classmethod
    def from_json(cls, payload: dict) -> "KnockoffModel":
        return cls(
            mu=np.asarray(payload["mu"], dtype=float),
            Sigma=np.asarray(payload["Sigma"], dtype=float),
            s=np.asarray(payload["s"], dtype=float),
            M=int(payload["M"]),
        )


@dataclass
class KnockoffAugmentedData:
    Xaug: np.ndarray
    model: KnockoffModel

    @property
    def p(self) -> int:
        return self.model.p

    @property
    def M(self) -> int:
        return self.model.M

    def original(self) -> np.ndarray:
        return self.Xaug[:, : self.p]

    def copy(self, m: int) -> np.ndarray:
        """The m-th knockoff block, 1-based."""
        p = self.p
        return self.Xaug[:, m * p : (m + 1) * p]


def shrink_covariance(S: np.ndarray, min_eigenvalue: float = MIN_EIGENVALUE, tol: float = 1e-10):
    """Shrink ``S`` toward its diagonal just enough to clear ``min_eigenvalue``.

    Returns the regularized matrix and the shrinkage weight. The smallest
    eigenvalue of ``(1 - w) S + w diag(S)`` is concave in ``w``, so bisection
    finds the smallest admissible weight.
    """
    D = np.diag(np.diag(S))

    def lam_min(w):
        return np.linalg.eigvalsh((1 - w) * S + w * D)[0]

    if lam_min(0.0) >= min_eigenvalue:
        return S.copy(), 0.0
    if lam_min(1.0) < min_eigenvalue:
        raise KnockoffError("covariance diagonal too small to regularize (constant feature?)")
    lo, hi = 0.0, 1.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if lam_min(mid) >= min_eigenvalue:
            hi = mid
        else:
            lo = mid
    return (1 - hi) * S + hi * D, hi


def equicorrelated_s(Sigma: np.ndarray) -> np.ndarray:
    """``s_j = Sigma_jj * min(1, 2 * lambda_min(corr(Sigma)))``."""
    sd = np.sqrt(np.diag(Sigma))
    corr = Sigma / np.outer(sd, sd)
    lam = np.linalg.eigvalsh(corr)[0]
    return np.diag(Sigma) * min(1.0, 2.0 * lam)


def fit_gaussian_model(X: np.ndarray, M: int = 1) -> KnockoffModel:
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise DataError(f"X must be 2-dimensional, got shape {X.shape}")
    n, p = X.shape
    if p == 0:
        raise DataError("X has no columns")
    if n < 3:
        raise DataError(f"need at least 3 rows to fit a knockoff model, got {n}")
    if M < 1:
        raise KnockoffError(f"knockoff copy count must be >= 1, got {M}")
    mu = X.mean(axis=0)
    S = np.atleast_2d(np.cov(X, rowvar=False, ddof=1))
    if np.any(np.diag(S) <= 0):
        raise KnockoffError("constant feature column; cannot fit a Gaussian model")
    Sigma, _ = shrink_covariance(S)
    Sigma = 0.5 * (Sigma + Sigma.T)
    return KnockoffModel(mu=mu, Sigma=Sigma, s=equicorrelated_s(Sigma), M=M)


def _psd_factor(V: np.ndarray, what: str) -> np.ndarray:
    """Return ``L`` with ``L @ L.T == V`` for a PSD ``V`` (possibly singular)."""
    V = 0.5 * (V + V.T)
    vals, vecs = np.linalg.eigh(V)
    scale = max(1.0, float(np.abs(vals).max()))
    if vals[0] < -1e-8 * scale:
        raise KnockoffError(f"{what} is not positive semidefinite (min eigenvalue {vals[0]:.3g})")
    return vecs * np.sqrt(np.clip(vals, 0.0, None))


def sample_single_knockoffs(X: np.ndarray, model: KnockoffModel, seed=None) -> KnockoffAugmentedData:
    """Draw ``Xk | X ~ N(X - (X - mu) Sigma^-1 D, 2D - D Sigma^-1 D)`` row-wise."""
    X = np.asarray(X, dtype=float)
    if X.shape[1] != model.p:
        raise DataError(f"X has {X.shape[1]} columns, model expects {model.p}")
    if model.M != 1:
        raise KnockoffError(f"single knockoffs need a model with M=1, got M={model.M}")
    rng = np.random.default_rng(seed)
    D = np.diag(model.s)
    Sinv_D = np.linalg.solve(model.Sigma, D)
    cond_mean = X - (X - model.mu) @ Sinv_D
    cond_cov = 2 * D - D @ Sinv_D
    L = _psd_factor(cond_cov, "knockoff conditional covariance")
    Xk = cond_mean + rng.standard_normal(X.shape) @ L.T
    return KnockoffAugmentedData(Xaug=np.hstack([X, Xk]), model=model)


def sample_scit_knockoffs(X: np.ndarray, model: KnockoffModel, seed=None) -> KnockoffAugmentedData:
    """Sequential conditional independent tuples under a joint Gaussian law.

    For feature j, M independent copies are drawn from the law of X_j given
    every other original column and all knockoff columns already generated.
    The joint covariance of realized columns is tracked so each conditional
    is an exact Schur complement. The returned model's ``s`` holds the
    realized conditional variances, i.e. ``Cov(X_j, Xk_j) = Sigma_jj - s_j``.
    """
    X = np.asarray(X, dtype=float)
    n, p = X.shape
    if p != model.p:
        raise DataError(f"X has {p} columns, model expects {model.p}")
    M = model.M
    if M < 1:
        raise KnockoffError(f"knockoff copy count must be >= 1, got {M}")
    rng = np.random.default_rng(seed)

    # Joint covariance over [X, K1, ..., KM]; knockoff slots filled as generated.
    total = (1 + M) * p
    G = np.zeros((total, total))
    G[:p, :p] = model.Sigma
    mean = np.tile(model.mu, 1 + M)
    values = np.zeros((n, total))
    values[:, :p] = X
    s_realized = np.empty(p)

    for j in range(p):
        known = [c for c in range(p) if c != j]
        known += [m * p + k for m in range(1, M + 1) for k in range(j)]
        known = np.asarray(known, dtype=int)
        g_jO = G[j, known]
        if known.size:
            G_OO = G[np.ix_(known, known)]
            coef = _solve_psd(G_OO, g_jO)
            cond_mean = model.mu[j] + (values[:, known] - mean[known]) @ coef
            cond_var = G[j, j] - g_jO @ coef
        else:
            cond_mean = np.full(n, model.mu[j])
            cond_var = G[j, j]
        if cond_var < -JITTER * max(1.0, G[j, j]):
            raise KnockoffError(f"negative conditional variance {cond_var:.3g} at feature {j}")
        cond_var = max(cond_var, 0.0)
        s_realized[j] = cond_var

        slots = np.array([m * p + j for m in range(1, M + 1)])
        draws = cond_mean[:, None] + np.sqrt(cond_var) * rng.standard_normal((n, M))
        values[:, slots] = draws
        # Each copy shares X_j's covariance with the conditioning set and with
        # X_j itself up to the conditional variance; copies are exchangeable.
        for slot in slots:
            G[slot, known] = g_jO
            G[known, slot] = g_jO
            G[slot, j] = G[j, slot] = G[j, j] - cond_var
        G[np.ix_(slots, slots)] = G[j, j] - cond_var
        G[slots, slots] = G[j, j]

    fitted = KnockoffModel(mu=model.mu, Sigma=model.Sigma, s=s_realized, M=M)
    return KnockoffAugmentedData(Xaug=values, model=fitted)


def _solve_psd(A: np.ndarray, b: np.ndarray) -> np.ndarray:
    try:
        c = np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        try:
            c = np.linalg.cholesky(A + JITTER * np.eye(A.shape[0]))
        except np.linalg.LinAlgError:
            raise KnockoffError("singular conditioning block in SCIT sampling") from None
    z = np.linalg.solve(c, b)
    return np.linalg.solve(c.T, z)


def make_knockoffs(X: np.ndarray, M: int = 1, seed=None) -> KnockoffAugmentedData:
    """Fit the Gaussian model and sample: single construction for M=1, SCIT otherwise."""
    model = fit_gaussian_model(X, M)
    if M == 1:
        return sample_single_knockoffs(X, model, seed)
    return sample_scit_knockoffs(X, model, seed)


def augmented_header(p: int, M: int) -> list:
    names = [f"X_{j + 1}" for j in range(p)]
    for m in range(1, M + 1):
        names += [f"K{m}_{j + 1}" for j in range(p)]
    return names


def write_augmented(aug: KnockoffAugmentedData, csv_path, model_path=None) -> None:
    with Path(csv_path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(augmented_header(aug.p, aug.M))
        for row in aug.Xaug:
            writer.writerow([repr(float(v)) for v in row])
    if model_path is not None:
        Path(model_path).write_text(json.dumps(aug.model.to_json()) + "\n", encoding="utf-8")


def read_augmented(csv_path, model_path) -> KnockoffAugmentedData:
    model = KnockoffModel.from_json(json.loads(Path(model_path).read_text(encoding="utf-8")))
    Xaug = np.loadtxt(csv_path, delimiter=",", skiprows=1, ndmin=2)
    if Xaug.shape[1] != (1 + model.M) * model.p:
        raise DataError(
            f"{csv_path}: {Xaug.shape[1]} columns, expected {(1 + model.M) * model.p}"
        )
    return KnockoffAugmentedData(Xaug=Xaug, model=model)
