"""Byzantine update perturbations and per-round client selection."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .params import ParamVector
from .seeding import child_rng

ATTACKS = ("none", "same-value", "sign-flipping", "gaussian")


@dataclass(frozen=True)
class AttackSpec:
    kind: str = "none"
    c: float = 5.0
    a: float = -5.0
    g: float = 0.3  # standard deviation of the additive noise
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ATTACKS:
            raise ValueError(f"unknown attack {self.kind!r}; expected one of {ATTACKS}")
        if self.kind == "sign-flipping" and not self.a < 0:
            raise ValueError("sign-flipping needs a < 0")
        if self.kind == "gaussian" and not self.g > 0:
            raise ValueError("gaussian attack needs g > 0")

    @property
    def needs_training(self) -> bool:
        """Same-value attackers overwrite their update, so local training is skipped."""
        return self.kind != "same-value"


def apply_attack(update: ParamVector, spec: AttackSpec, seed: Optional[int] = None) -> ParamVector:
    """Return the update a Byzantine client sends instead of ``update``.

    ``seed`` overrides ``spec.seed`` for the gaussian noise draw.
    """
    if not update.is_finite():
        raise ValueError("cannot attack a non-finite update")
    w = update.values
    if spec.kind == "none":
        out = w.copy()
    elif spec.kind == "same-value":
        out = np.full_like(w, spec.c)
    elif spec.kind == "sign-flipping":
        out = spec.a * w
    else:
        rng = np.random.default_rng(spec.seed if seed is None else seed)
        out = w + rng.normal(0.0, spec.g, size=w.shape)
    assert np.all(np.isfinite(out)), "attack produced non-finite values"
    return update.with_values(out)


@dataclass(frozen=True)
class RoundPlan:
    selected: tuple[int, ...]
    byzantine: tuple[int, ...]

    @property
    def honest(self) -> tuple[int, ...]:
        bad = set(self.byzantine)
        return tuple(i for i in self.selected if i not in bad)

    def is_byzantine(self, client_id: int) -> bool:
        return client_id in self.byzantine


def byzantine_clients(num_clients: int, xi: float, seed) -> tuple[int, ...]:
    """The experiment-wide adversary set: ceil(xi * n) clients fixed by ``seed``."""
    count = math.ceil(xi * num_clients - 1e-12)
    rng = child_rng(seed, "byzantine-set")
    return tuple(sorted(int(i) for i in rng.choice(num_clients, size=count, replace=False)))


def plan_round(num_clients: int, k: int, xi: float, round_idx: int, seed) -> RoundPlan:
    """Select ``k`` clients for a round, ceil(xi * k) of them Byzantine.

    Selection is stratified: the Byzantine members are drawn from the fixed
    adversary set and the rest from the honest pool, each uniformly without
    replacement. When ``k == num_clients`` every client is selected and the
    Byzantine set is the whole adversary set.
    """
    if not 0.0 <= xi < 0.5:
        raise ValueError("xi must lie in [0, 0.5)")
    if not 1 <= k <= num_clients:
        raise ValueError("need 1 <= k <= num_clients")
    adversaries = byzantine_clients(num_clients, xi, seed)
    honest_pool = np.setdiff1d(np.arange(num_clients), adversaries)
    b = math.ceil(xi * k - 1e-12)
    rng = child_rng(seed, round_idx, "select")
    bad = rng.choice(np.asarray(adversaries, dtype=int), size=b, replace=False) if b else []
    good = rng.choice(honest_pool, size=k - b, replace=False)
    selected = tuple(sorted(int(i) for i in np.concatenate([bad, good])))
    return RoundPlan(selected, tuple(sorted(int(i) for i in bad)))
