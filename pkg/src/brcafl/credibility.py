"""Credibility assessment, momentum aggregation and the unified server update."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import aadm
from .aadm import DetectorState, ScoreVector
from .models import Batch, ModelSpec, loss, sgd_epoch
from .params import ParamVector, stack


@dataclass(frozen=True, eq=False)
class ClientUpdate:
    client_id: int
    params: ParamVector
    probe: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "probe", np.asarray(self.probe, dtype=np.float64))

    @classmethod
    def from_params(cls, client_id: int, params: ParamVector, probe_block: str) -> "ClientUpdate":
        return cls(int(client_id), params, params.flat_block(probe_block).copy())

    def check_probe(self, probe_block: str) -> None:
        if not np.array_equal(self.probe, self.params.flat_block(probe_block)):
            raise ValueError(f"client {self.client_id}: probe does not match block {probe_block!r}")


@dataclass(frozen=True, eq=False)
class CredibilityReport:
    client_ids: tuple[int, ...]
    detection_scores: np.ndarray  # normalized e
    verification_scores: np.ndarray  # normalized f
    credibilities: np.ndarray  # final r
    honest_set: tuple[int, ...]
    losses: np.ndarray
    beta: float
    raw_detection: Optional[ScoreVector] = None

    @property
    def zeroed(self) -> tuple[int, ...]:
        return tuple(i for i, r in zip(self.client_ids, self.credibilities) if r == 0.0)

    def credibility_of(self, client_id: int) -> float:
        return float(self.credibilities[self.client_ids.index(client_id)])


def threshold(scores: np.ndarray) -> np.ndarray:
    """Zero every score strictly below the mean, then renormalize the survivors."""
    r = np.asarray(scores, dtype=np.float64).copy()
    r[r < r.mean()] = 0.0
    total = r.sum()
    assert total > 0, "mean threshold zeroed every client"
    return r / total


def verification_scores(
    updates: Sequence[ClientUpdate], shared: Sequence[Batch], spec: ModelSpec
) -> tuple[np.ndarray, np.ndarray]:
    """Each client's loss on its own shared shard, mapped to ``exp(-2 z)`` scores."""
    if len(updates) != len(shared):
        raise ValueError("one shared shard per update required")
    losses = np.empty(len(updates))
    for i, (u, batch) in enumerate(zip(updates, shared)):
        if batch is None or len(batch) == 0:
            raise ValueError(f"client {u.client_id} has an empty shared shard")
        losses[i] = loss(spec, u.params, batch)
    return aadm.exp_standard_scores(losses), losses


def assess(
    updates: Sequence[ClientUpdate],
    shared: Sequence[Batch],
    detector: DetectorState,
    beta: float,
    d: float,
    spec: ModelSpec,
    adapt: bool = True,
) -> tuple[CredibilityReport, DetectorState]:
    """Score every update, mix detection and verification, and flag low scorers.

    Returns the report and the detector after adaptation on the surviving
    clients (unchanged when ``adapt`` is False).
    """
    if not 0.0 <= beta <= 1.0:
        raise ValueError("beta must lie in [0, 1]")
    if len(updates) < 2:
        raise ValueError("credibility assessment needs at least two updates")
    ids = tuple(u.client_id for u in updates)
    probes = np.stack([u.probe for u in updates])
    raw = aadm.score_updates(detector, probes, ids)
    f, losses = verification_scores(updates, shared, spec)
    e = raw.scores / raw.scores.sum()
    f = f / f.sum()
    r = threshold(beta * e + (1.0 - beta) * f)
    honest = tuple(i for i, ri in zip(ids, r) if ri > 0)
    report = CredibilityReport(ids, e, f, r, honest, losses, beta, raw)
    if adapt:
        detector = aadm.make_adaption(detector, honest, r, probes, ids, d)
    return report, detector


def detection_only_report(updates: Sequence[ClientUpdate], detector: DetectorState) -> CredibilityReport:
    """Credibility from detection scores alone (beta = 1, no verification, no adaptation)."""
    ids = tuple(u.client_id for u in updates)
    raw = aadm.score_updates(detector, np.stack([u.probe for u in updates]), ids)
    e = raw.scores / raw.scores.sum()
    r = threshold(e)
    honest = tuple(i for i, ri in zip(ids, r) if ri > 0)
    nan = np.full(len(ids), np.nan)
    return CredibilityReport(ids, e, nan, r, honest, nan, 1.0, raw)


def aggregate(
    prev_global: ParamVector,
    updates: Sequence[ClientUpdate],
    report: CredibilityReport,
    alpha: float,
) -> ParamVector:
    """Momentum mix ``alpha * W + (1 - alpha) * sum_i r_i w_i``."""
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    by_id = {u.client_id: u for u in updates}
    if set(by_id) != set(report.client_ids):
        raise ValueError("updates and report cover different clients")
    vectors = [by_id[i].params for i in report.client_ids]
    x = stack([prev_global, *vectors])[1:]
    if abs(report.credibilities.sum() - 1.0) > 1e-9:
        raise ValueError("credibilities must sum to 1")
    mixed = report.credibilities @ x
    return prev_global.with_values(alpha * prev_global.values + (1.0 - alpha) * mixed)


def abnormal_aggregate(
    prev_global: ParamVector,
    updates: Sequence[ClientUpdate],
    detector: DetectorState,
    alpha: float,
) -> tuple[ParamVector, CredibilityReport]:
    """Static-detector baseline: detection-only credibility, then momentum aggregation."""
    report = detection_only_report(updates, detector)
    return aggregate(prev_global, updates, report, alpha), report


def unified_update(
    global_params: ParamVector,
    shared: Sequence[Batch],
    spec: ModelSpec,
    epochs: int,
    lr: float,
    seed=0,
    batch_size: Optional[int] = None,
) -> ParamVector:
    """Server-side SGD over the honest clients' shared shards.

    ``shared`` must already be restricted to the honest set and ordered by
    ascending client id; each epoch makes one pass over each shard in turn.
    """
    if not shared:
        raise ValueError("unified update needs at least one honest shard")
    if epochs < 0:
        raise ValueError("epochs must be non-negative")
    params = global_params
    rng = np.random.default_rng(seed)
    for _ in range(epochs):
        for batch in shared:
            params = sgd_epoch(spec, params, batch, lr, batch_size, rng.integers(2**63))
    return params
