"""Baseline aggregation rules: FedAvg, Krum, geometric median, trimmed mean.

All rules take a list of :class:`ParamVector` sharing one layout and return
a vector with that layout. The static-detector ("abnormal") rule lives in
:mod:`brcafl.credibility` next to the credibility machinery it reuses.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .params import ParamVector, stack

AGGREGATORS = ("no-defense", "krum", "geomed", "trimmed-mean", "abnormal", "brca")


@dataclass(frozen=True)
class AggregatorSpec:
    kind: str = "brca"
    assumed_byzantine: Optional[int] = None  # Krum's f; None -> ceil(xi * k)
    trim_fraction: Optional[float] = None  # None -> xi
    weiszfeld_tol: float = 1e-7
    weiszfeld_max_iters: int = 1000
    unified_update: bool = True  # brca only; False gives the ablation

    def __post_init__(self):
        if self.kind not in AGGREGATORS:
            raise ValueError(f"unknown defense {self.kind!r}; expected one of {AGGREGATORS}")
        if self.trim_fraction is not None and not 0 <= self.trim_fraction < 0.5:
            raise ValueError("trim_fraction must lie in [0, 0.5)")


def fedavg(updates: Sequence[ParamVector], weights: Optional[Sequence[float]] = None) -> ParamVector:
    """Coordinate-wise weighted mean. ``weights`` must sum to one."""
    if not updates:
        raise ValueError("fedavg needs at least one update")
    x = stack(updates)
    if weights is None:
        w = np.full(len(updates), 1.0 / len(updates))
    else:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != (len(updates),):
            raise ValueError("one weight per update required")
        if abs(w.sum() - 1.0) > 1e-9:
            raise ValueError(f"weights sum to {w.sum()!r}, not 1")
    return updates[0].with_values(w @ x)


def _sq_distances(x: np.ndarray) -> np.ndarray:
    # explicit differences, so identical updates score exactly equal
    d = np.empty((len(x), len(x)))
    for i in range(len(x)):
        diff = x - x[i]
        d[i] = np.einsum("ij,ij->i", diff, diff)
    return d


def krum_scores(updates: Sequence[ParamVector], f: int) -> np.ndarray:
    x = stack(updates)
    k = len(updates)
    if k < f + 3:
        raise ValueError(f"krum needs at least f + 3 = {f + 3} updates, got {k}")
    d = _sq_distances(x)
    m = k - f - 2
    scores = np.empty(k)
    for i in range(k):
        others = np.delete(d[i], i)
        scores[i] = np.sort(others)[:m].sum()
    return scores


def krum(updates: Sequence[ParamVector], f: int) -> tuple[ParamVector, int]:
    """Pick the update whose k - f - 2 nearest neighbours are closest.

    Ties go to the lowest index.
    """
    scores = krum_scores(updates, f)
    idx = int(np.argmin(scores))
    return updates[idx].copy(), idx


def weiszfeld(
    updates: Sequence[ParamVector], tol: float = 1e-7, max_iters: int = 1000, eps: float = 1e-12
) -> tuple[np.ndarray, list[float]]:
    """Weiszfeld iterations from the coordinate-wise mean.

    Returns the final iterate and the objective ``sum_i ||u_i - y||`` at the
    start point and after each step.
    """
    x = stack(updates)
    y = x.mean(axis=0)
    history = [float(np.linalg.norm(x - y, axis=1).sum())]
    for _ in range(max_iters):
        inv = 1.0 / (np.linalg.norm(x - y, axis=1) + eps)
        y_next = inv @ x / inv.sum()
        step = np.linalg.norm(y_next - y)
        y = y_next
        history.append(float(np.linalg.norm(x - y, axis=1).sum()))
        if step < tol:
            break
    return y, history


def geomed(updates: Sequence[ParamVector], tol: float = 1e-7, max_iters: int = 1000) -> ParamVector:
    if not updates:
        raise ValueError("geomed needs at least one update")
    y, _ = weiszfeld(updates, tol, max_iters)
    return updates[0].with_values(y)


def trim_count(k: int, trim_fraction: float) -> int:
    return math.ceil(trim_fraction * k - 1e-12)


def trimmed_mean(updates: Sequence[ParamVector], trim_fraction: float) -> ParamVector:
    """Per coordinate, drop the ceil(trim * k) largest and smallest values and average the rest."""
    k = len(updates)
    t = trim_count(k, trim_fraction)
    if 2 * t >= k:
        raise ValueError(f"trimming {t} from each end of {k} updates leaves nothing")
    x = np.sort(stack(updates), axis=0)
    return updates[0].with_values(x[t : k - t].mean(axis=0))
