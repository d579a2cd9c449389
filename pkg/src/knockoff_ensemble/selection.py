"""Knockoff feature statistics and data-dependent thresholds."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import SelectionError


@dataclass
class FeatureStats:
    W: np.ndarray
    M: int = 1
    kappa: Optional[np.ndarray] = None
    tau: Optional[np.ndarray] = None


@dataclass
class SelectionReport:
    q: float
    M: int
    T: float
    selected: np.ndarray  # 0-based
    stats: FeatureStats
    metadata: Optional[dict] = None

    def to_json(self) -> dict:
        st = self.stats
        return {
            "q": self.q,
            "M": self.M,
            "T": None if not np.isfinite(self.T) else float(self.T),
            "selected": [int(j) + 1 for j in self.selected],
            "W": st.W.tolist(),
            "kappa": None if st.kappa is None else st.kappa.tolist(),
            "tau": None if st.tau is None else st.tau.tolist(),
            "strategy": self.metadata or {},
        }


def _check_q(q):
    if not 0 < q < 1:
        raise SelectionError(f"target FDR q must lie in (0, 1), got {q}")


def single_knockoff_stats(Z) -> FeatureStats:
    """``W_j = Z_j - Z_{j+p}`` for a length-2p importance vector."""
    Z = np.asarray(Z, dtype=float)
    if Z.ndim != 1 or Z.size % 2:
        raise SelectionError(f"need an even-length importance vector, got shape {Z.shape}")
    if np.any(Z < 0):
        raise SelectionError("importance scores must be nonnegative")
    p = Z.size // 2
    return FeatureStats(W=Z[:p] - Z[p:], M=1)


def multiple_knockoff_stats(Z, M: int) -> FeatureStats:
    """Statistics for ``M`` knockoff copies.

    Per feature, with scores ``(Z_j, Z_{j+p}, ..., Z_{j+Mp})``:
    ``kappa`` is the argmax position (0 = original, ties to the lowest),
    ``tau`` is the max minus the median of the other M scores, and
    ``W = (Z_j - median(knockoffs)) * [Z_j >= max(knockoffs)]``.
    """
    Z = np.asarray(Z, dtype=float)
    if M < 2:
        raise SelectionError(f"multiple-knockoff statistics need M >= 2, got {M}")
    if Z.ndim != 1 or Z.size % (1 + M):
        raise SelectionError(f"importance length {Z.size} is not a multiple of {1 + M}")
    p = Z.size // (1 + M)
    scores = Z.reshape(1 + M, p).T  # (p, 1+M)
    kappa = np.argmax(scores, axis=1)
    top = scores[np.arange(p), kappa]
    others = np.ones_like(scores, dtype=bool)
    others[np.arange(p), kappa] = False
    rest = scores[others].reshape(p, M)
    tau = top - np.median(rest, axis=1)
    knock = scores[:, 1:]
    W = (scores[:, 0] - np.median(knock, axis=1)) * (scores[:, 0] >= knock.max(axis=1))
    return FeatureStats(W=W, M=M, kappa=kappa, tau=tau)


def single_knockoff_threshold(W, q: float):
    """Knockoff+ threshold: smallest ``t`` in ``{|W_j| : W_j != 0}`` with
    ``(#{W <= -t} + 1) / #{W >= t} <= q``. Returns ``(T, selected)``;
    ``T = inf`` and nothing selected when no candidate qualifies.
    """
    _check_q(q)
    W = np.asarray(W, dtype=float)
    cand = np.unique(np.abs(W[W != 0]))
    if cand.size == 0:
        return np.inf, np.array([], dtype=int)
    pos = np.sort(W[W > 0])
    neg = np.sort(-W[W < 0])
    n_pos = pos.size - np.searchsorted(pos, cand, side="left")
    n_neg = neg.size - np.searchsorted(neg, cand, side="left")
    with np.errstate(divide="ignore"):
        ratio = np.where(n_pos > 0, (n_neg + 1) / np.maximum(n_pos, 1), np.inf)
    ok = np.flatnonzero(ratio <= q)
    if ok.size == 0:
        return np.inf, np.array([], dtype=int)
    T = float(cand[ok[0]])
    return T, np.flatnonzero(W >= T)


def multiple_knockoff_threshold(kappa, tau, M: int, q: float):
    """Smallest ``t`` in ``{tau_j > 0}`` with
    ``(1/M + #{kappa >= 1, tau >= t} / M) / max(1, #{kappa = 0, tau >= t}) <= q``.
    Selects ``{kappa = 0, tau >= T}``.
    """
    _check_q(q)
    if M < 2:
        raise SelectionError(f"multiple-knockoff threshold needs M >= 2, got {M}")
    kappa = np.asarray(kappa, dtype=int)
    tau = np.asarray(tau, dtype=float)
    cand = np.unique(tau[tau > 0])
    if cand.size == 0:
        return np.inf, np.array([], dtype=int)
    orig = np.sort(tau[kappa == 0])
    knock = np.sort(tau[kappa >= 1])
    n_orig = orig.size - np.searchsorted(orig, cand, side="left")
    n_knock = knock.size - np.searchsorted(knock, cand, side="left")
    ratio = (1.0 / M + n_knock / M) / np.maximum(1, n_orig)
    ok = np.flatnonzero(ratio <= q)
    if ok.size == 0:
        return np.inf, np.array([], dtype=int)
    T = float(cand[ok[0]])
    return T, np.flatnonzero((kappa == 0) & (tau >= T))


def knockoff_select(Z, M: int, q: float, metadata: Optional[dict] = None) -> SelectionReport:
    """Statistics plus filter for an importance vector of length ``(1+M)p``."""
    if M == 1:
        stats = single_knockoff_stats(Z)
        T, selected = single_knockoff_threshold(stats.W, q)
    else:
        stats = multiple_knockoff_stats(Z, M)
        T, selected = multiple_knockoff_threshold(stats.kappa, stats.tau, M, q)
    return SelectionReport(q=q, M=M, T=T, selected=selected, stats=stats, metadata=metadata)
