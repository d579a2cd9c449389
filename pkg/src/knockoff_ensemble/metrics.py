"""Selection quality and importance-stability measures."""

from __future__ import annotations

import csv
from itertools import combinations
from pathlib import Path

import numpy as np

from .errors import DataError


def power_fdp(selected, true_support):
    """``(|S & T| / |T|, |S - T| / max(1, |S|))``."""
    selected = set(int(j) for j in selected)
    truth = set(int(j) for j in true_support)
    if not truth:
        raise DataError("power is undefined for an empty true support")
    hits = len(selected & truth)
    return hits / len(truth), (len(selected) - hits) / max(1, len(selected))


def jaccard(a, b) -> float:
    """Jaccard similarity; two empty sets count as identical (1.0)."""
    a, b = set(a), set(b)
    union = a | b
    if not union:
        return 1.0
    return len(a & b) / len(union)


def pairwise_jaccard(selections):
    return [jaccard(a, b) for a, b in combinations(selections, 2)]


def instability_profile(Zruns):
    """Per-column coefficient of variation and mean across runs.

    Returns ``(instability, signal_strength, zero_mean)``; columns whose mean
    is zero report instability 0 and are flagged in ``zero_mean``.
    """
    Zruns = np.asarray(Zruns, dtype=float)
    if Zruns.ndim != 2 or Zruns.shape[0] < 2:
        raise DataError("instability needs a (runs x features) matrix with at least 2 runs")
    mean = Zruns.mean(axis=0)
    sd = Zruns.std(axis=0, ddof=1)
    zero = mean == 0
    inst = np.zeros_like(mean)
    inst[~zero] = sd[~zero] / mean[~zero]
    return inst, mean, zero


def score_correlation(Za, Zb) -> float:
    Za = np.asarray(Za, dtype=float)
    Zb = np.asarray(Zb, dtype=float)
    if Za.shape != Zb.shape or Za.ndim != 1 or Za.size < 3:
        raise DataError("score correlation needs two equal-length vectors of length >= 3")
    if np.ptp(Za) == 0 or np.ptp(Zb) == 0:
        raise DataError("score correlation undefined for a constant vector")
    return float(np.corrcoef(Za, Zb)[0, 1])


RESULT_COLUMNS = ("replicate", "strategy", "power", "fdp", "n_selected")


def write_results_csv(rows, path, columns=RESULT_COLUMNS) -> None:
    """Rows are dicts; floats are written with full round-trip precision."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(row.get(c)) for c in columns])


def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)
