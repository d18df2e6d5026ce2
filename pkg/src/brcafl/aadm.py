"""Adaptive anomaly detection over probe-layer weights.

An autoencoder reconstructs each client's probe slice. Large reconstruction
error means the slice looks unlike the honest updates the detector was
trained on. Errors are standardized across the round and mapped through
``exp(-2 z)`` so that the most unusual client gets the smallest score.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .models import Batch, ModelSpec, init_params, loss_and_grad, reconstruction_errors, sgd_epoch
from .params import DimensionError, ParamVector

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class DetectorState:
    spec: ModelSpec
    params: ParamVector
    adapt_count: int = 0
    lr: float = 0.02

    def __post_init__(self):
        if self.spec.kind != "mlp-autoencoder":
            raise ValueError("detector spec must be an autoencoder")
        if self.params.layout != self.spec.layout():
            raise DimensionError("detector params do not match its spec")

    @property
    def input_dim(self) -> int:
        return self.spec.input_dim


@dataclass(frozen=True, eq=False)
class ScoreVector:
    client_ids: tuple[int, ...]
    raw_errors: np.ndarray
    scores: np.ndarray


def detector_spec(probe_dim: int) -> ModelSpec:
    """One tanh hidden layer of width max(4, probe_dim // 4), linear output."""
    return ModelSpec("mlp-autoencoder", probe_dim, probe_dim, (max(4, probe_dim // 4),))


def new_detector(probe_dim: int, lr: float = 0.02, seed=0) -> DetectorState:
    spec = detector_spec(probe_dim)
    return DetectorState(spec, init_params(spec, seed), 0, lr)


def _as_matrix(detector: DetectorState, probes) -> np.ndarray:
    x = np.asarray(probes, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != detector.input_dim:
        raise DimensionError(
            f"probe layers must have width {detector.input_dim}, got shape {x.shape}"
        )
    return x


def pretrain(
    detector: DetectorState,
    probes,
    epochs: int,
    seed=0,
    batch_size: Optional[int] = 32,
) -> DetectorState:
    """Fit the autoencoder to clean probe layers for ``epochs`` SGD passes."""
    x = _as_matrix(detector, probes)
    params = detector.params
    data = Batch(x)
    rng = np.random.default_rng(seed)
    for _ in range(epochs):
        params = sgd_epoch(detector.spec, params, data, detector.lr, batch_size, rng.integers(2**63))
    return replace(detector, params=params)


def exp_standard_scores(values) -> np.ndarray:
    """``exp(-2 z)`` of the population-standardized values.

    Constant input (std below 1e-12) maps to all ones.
    """
    v = np.asarray(values, dtype=np.float64)
    if v.size < 2:
        raise ValueError("need at least two values to standardize")
    sd = v.std()
    if sd < 1e-12:
        return np.ones_like(v)
    return np.exp(-2.0 * (v - v.mean()) / sd)


def score_updates(detector: DetectorState, probes, client_ids: Optional[Sequence[int]] = None) -> ScoreVector:
    x = _as_matrix(detector, probes)
    if len(x) < 2:
        raise ValueError("scoring needs at least two probe layers")
    ids = tuple(range(len(x))) if client_ids is None else tuple(int(i) for i in client_ids)
    if len(ids) != len(x):
        raise ValueError("one client id per probe layer required")
    errors = reconstruction_errors(detector.spec, detector.params, x)
    return ScoreVector(ids, errors, exp_standard_scores(errors))


def trimmed_honest(honest_ids: Sequence[int], credibility: dict[int, float], d: float) -> list[int]:
    """Drop the ceil(d * |H|) most and least credible members; ties break by client id."""
    ranked = sorted(honest_ids, key=lambda i: (credibility[i], i))
    t = math.ceil(d * len(ranked) - 1e-12)
    kept = ranked[t : len(ranked) - t]
    return sorted(kept)


def make_adaption(
    detector: DetectorState,
    honest_ids: Sequence[int],
    credibilities: Sequence[float],
    probes,
    client_ids: Sequence[int],
    d: float,
) -> DetectorState:
    """Fine-tune the detector on the mid-credibility honest probes.

    One gradient step per retained client, in ascending client-id order.
    ``credibilities`` and ``probes`` are aligned with ``client_ids``.
    """
    if not honest_ids:
        raise ValueError("make_adaption needs a non-empty honest set")
    if not 0.0 <= d < 0.5:
        raise ValueError("d must lie in [0, 0.5)")
    x = _as_matrix(detector, probes)
    row = {int(cid): i for i, cid in enumerate(client_ids)}
    cred = {int(cid): float(r) for cid, r in zip(client_ids, credibilities)}
    kept = trimmed_honest([int(i) for i in honest_ids], cred, d)
    if not kept:
        log.warning("adaptation skipped: trimming left no honest clients")
        return detector
    params = detector.params.copy()
    for cid in kept:
        _, g = loss_and_grad(detector.spec, params, Batch(x[row[cid] : row[cid] + 1]))
        params.values[...] -= detector.lr * g.values
    return replace(detector, params=params, adapt_count=detector.adapt_count + 1)
