"""Federated rounds: client training, attacks, defenses and per-round metrics.

All randomness is derived from ``config.seed`` through
:func:`brcafl.seeding.derive_seed`, keyed by ``(round, client_id, purpose)``,
so a configuration fully determines every metric.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field, fields
from typing import Any, Callable, Optional, Sequence

import numpy as np

from . import aadm, credibility, defenses
from .aadm import DetectorState, ScoreVector
from .attacks import AttackSpec, RoundPlan, apply_attack, plan_round
from .credibility import ClientUpdate, CredibilityReport
from .data import ClientData, Dataset, PartitionSpec, extract_shared, load_idx_dataset, make_blobs, make_source_domain, partition
from .defenses import AggregatorSpec
from .models import ModelSpec, evaluate, init_params, sgd_epoch, sgd_epoch_many
from .params import ParamVector
from .seeding import derive_seed

log = logging.getLogger(__name__)

BCE_SENTINEL = -1.0


class ConfigError(ValueError):
    pass


class SimulationAbort(RuntimeError):
    pass


def _key(name: str, default, **kw):
    return field(default=default, metadata={"key": name}, **kw)


@dataclass(frozen=True)
class ExperimentConfig:
    """Every knob of one run. ``to_flat``/``from_flat`` use dotted JSON keys."""

    dataset_kind: str = _key("dataset.kind", "synthetic-blobs")
    num_classes: int = _key("dataset.num_classes", 10)
    dim: int = _key("dataset.dim", 64)
    per_class: int = _key("dataset.per_class", 250)
    spread: float = _key("dataset.spread", 0.25)
    idx_dir: Optional[str] = _key("dataset.idx_dir", None)
    scheme: str = _key("partition.scheme", "non-iid-2")
    model_kind: str = _key("model.kind", "mlp-classifier")
    hidden_dims: tuple[int, ...] = _key("model.hidden_dims", (32, 16))
    probe_block: Optional[str] = _key("model.probe_block", None)
    n: int = _key("n", 10)
    k: int = _key("k", 10)
    xi: float = _key("xi", 0.2)
    gamma: float = _key("gamma", 0.05)
    alpha: float = _key("alpha", 0.1)
    beta: float = _key("beta", 0.5)
    d: float = _key("d", 0.1)
    lr_client: float = _key("lr.client", 0.3)
    lr_server: float = _key("lr.server", 0.1)
    lr_detection: float = _key("lr.detection", 0.02)
    epochs_client: int = _key("epochs.client", 5)
    epochs_server: int = _key("epochs.server", 1)
    epochs_pretrain: int = _key("epochs.pretrain", 30)
    batch_client: Optional[int] = _key("batch.client", 32)
    warmup_rounds: int = _key("warmup.rounds", 20)
    rounds: int = _key("rounds", 60)
    attack: str = _key("attack.kind", "none")
    attack_c: float = _key("attack.c", 5.0)
    attack_a: float = _key("attack.a", -5.0)
    attack_g: float = _key("attack.g", 0.3)
    defense: str = _key("defense.kind", "brca")
    assumed_byzantine: Optional[int] = _key("defense.assumed_byzantine", None)
    trim_fraction: Optional[float] = _key("defense.trim_fraction", None)
    weiszfeld_tol: float = _key("defense.weiszfeld_tol", 1e-7)
    weiszfeld_max_iters: int = _key("defense.weiszfeld_max_iters", 1000)
    unified_update: bool = _key("defense.unified_update", True)
    detector_checkpoint: Optional[str] = _key("detector.checkpoint", None)
    seed: int = _key("seed", 0)

    REQUIRED = ("partition.scheme", "attack.kind", "defense.kind", "rounds")

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        self.validate()

    def validate(self) -> None:
        lrs = {"lr.client": self.lr_client, "lr.server": self.lr_server, "lr.detection": self.lr_detection}
        for name, value in lrs.items():
            if not value > 0:
                raise ConfigError(f"{name} must be positive")
        if not 1 <= self.k <= self.n:
            raise ConfigError("need 1 <= k <= n")
        if not 0 <= self.xi < 0.5:
            raise ConfigError("xi must lie in [0, 0.5)")
        if not 0 < self.gamma < 1:
            raise ConfigError("gamma must lie in (0, 1)")
        if not 0 < self.alpha < 1:
            raise ConfigError("alpha must lie in (0, 1)")
        if not 0 <= self.beta <= 1:
            raise ConfigError("beta must lie in [0, 1]")
        if not 0 <= self.d < 0.5:
            raise ConfigError("d must lie in [0, 0.5)")
        for name in ("rounds", "epochs_client", "epochs_server", "epochs_pretrain", "warmup_rounds"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{self.key_of(name)} must be non-negative")
        if self.dataset_kind not in ("synthetic-blobs", "idx"):
            raise ConfigError(f"unknown dataset.kind {self.dataset_kind!r}")
        if self.dataset_kind == "idx" and not self.idx_dir:
            raise ConfigError("dataset.kind=idx needs dataset.idx_dir")
        try:
            PartitionSpec(self.scheme, self.n)
            self.attack_spec()
            self.aggregator_spec()
            self.model_spec()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    # -- dotted-key (de)serialization --

    @classmethod
    def key_map(cls) -> dict[str, str]:
        return {f.metadata["key"]: f.name for f in fields(cls)}

    @classmethod
    def key_of(cls, name: str) -> str:
        return {f.name: f.metadata["key"] for f in fields(cls)}[name]

    @classmethod
    def from_flat(cls, flat: dict[str, Any], require: bool = True) -> "ExperimentConfig":
        keys = cls.key_map()
        unknown = sorted(set(flat) - set(keys))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        if require:
            missing = [k for k in cls.REQUIRED if k not in flat]
            if missing:
                raise ConfigError(f"missing required config key: {', '.join(missing)}")
        kwargs = {keys[k]: v for k, v in flat.items()}
        try:
            return cls(**kwargs)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def to_flat(self) -> dict[str, Any]:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            out[f.metadata["key"]] = list(value) if isinstance(value, tuple) else value
        return out

    def canonical_json(self) -> str:
        return json.dumps(self.to_flat(), sort_keys=True, separators=(",", ":"))

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def with_keys(self, **dotted) -> "ExperimentConfig":
        """``config.with_keys(**{"attack.kind": "gaussian"})``"""
        flat = self.to_flat()
        flat.update(dotted)
        return ExperimentConfig.from_flat(flat, require=False)

    # -- derived specs --

    def model_spec(self, input_dim: Optional[int] = None) -> ModelSpec:
        hidden = () if self.model_kind == "logistic-regression" else self.hidden_dims
        return ModelSpec(self.model_kind, input_dim or self.dim, self.num_classes, hidden, self.probe_block)

    def attack_spec(self) -> AttackSpec:
        return AttackSpec(self.attack, self.attack_c, self.attack_a, self.attack_g, self.seed)

    def aggregator_spec(self) -> AggregatorSpec:
        return AggregatorSpec(
            self.defense,
            self.assumed_byzantine,
            self.trim_fraction,
            self.weiszfeld_tol,
            self.weiszfeld_max_iters,
            self.unified_update,
        )

    @property
    def uses_detector(self) -> bool:
        return self.defense in ("brca", "abnormal")


@dataclass(frozen=True, eq=False)
class RoundMetrics:
    round: int
    test_accuracy: float
    test_loss: float
    detector_bce: float
    detection_precision: float
    detection_recall: float
    client_ids: tuple[int, ...]
    byzantine: tuple[int, ...]
    weights: np.ndarray
    honest_set: tuple[int, ...]
    credibility_report: Optional[CredibilityReport] = None
    wall_time_ms: float = 0.0

    def to_json(self) -> dict[str, Any]:
        """The metrics-stream record; wall time is left out so runs compare byte for byte."""
        return {
            "round": self.round,
            "accuracy": self.test_accuracy,
            "loss": self.test_loss,
            "bce": self.detector_bce,
            "precision": self.detection_precision,
            "recall": self.detection_recall,
            "client_ids": list(self.client_ids),
            "byzantine": list(self.byzantine),
            "credibilities": [float(w) for w in self.weights],
            "honest_set": list(self.honest_set),
        }


@dataclass(frozen=True, eq=False)
class SimState:
    global_params: ParamVector
    detector: Optional[DetectorState]
    round: int = 0


# -- metrics --

def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def detector_bce(scores: ScoreVector, plan: RoundPlan) -> float:
    """Cross-entropy of ``sigmoid(e - mean(e))`` read as P(honest).

    Returns :data:`BCE_SENTINEL` when the round has no Byzantine or no
    honest client.
    """
    byz = set(plan.byzantine)
    y = np.array([0.0 if cid in byz else 1.0 for cid in scores.client_ids])
    if y.min() == y.max():
        log.info("detector_bce: round lacks one of the classes, returning sentinel")
        return BCE_SENTINEL
    e = np.asarray(scores.scores, dtype=np.float64)
    p = np.clip(_sigmoid(e - e.mean()), 1e-7, 1 - 1e-7)
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log(1 - p)))


def detection_prf(zeroed: Sequence[int], plan: RoundPlan) -> tuple[float, float]:
    """Precision and recall of "weight zero" as a Byzantine verdict.

    Nothing flagged gives precision 1; no Byzantine present gives recall 1.
    """
    flagged = set(zeroed)
    byz = set(plan.byzantine)
    hits = len(flagged & byz)
    precision = hits / len(flagged) if flagged else 1.0
    recall = hits / len(byz) if byz else 1.0
    return precision, recall


# -- client side --

def client_train(
    global_params: ParamVector,
    client: ClientData,
    spec: ModelSpec,
    epochs: int,
    lr: float,
    batch_size: Optional[int] = None,
    seed=0,
) -> ClientUpdate:
    if len(client.private) == 0:
        raise ValueError(f"client {client.client_id} has no private data")
    params = global_params
    rng = np.random.default_rng(seed)
    for _ in range(epochs):
        params = sgd_epoch(spec, params, client.private, lr, batch_size, rng.integers(2**63))
    if params is global_params:
        params = global_params.copy()
    return ClientUpdate.from_params(client.client_id, params, spec.probe_block)


def train_clients(
    global_params: ParamVector,
    clients: Sequence[ClientData],
    spec: ModelSpec,
    epochs: int,
    lr: float,
    batch_size: Optional[int],
    seeds: Sequence,
) -> list[ClientUpdate]:
    """:func:`client_train` for several clients, stepped in lockstep.

    Each client draws its shuffles from its own seed, so the result matches
    training the clients one by one (up to floating-point rounding).
    """
    for c in clients:
        if len(c.private) == 0:
            raise ValueError(f"client {c.client_id} has no private data")
    if not clients:
        return []
    rngs = [np.random.default_rng(s) for s in seeds]
    params = [global_params] * len(clients)
    data = [c.private for c in clients]
    for _ in range(epochs):
        params = sgd_epoch_many(spec, params, data, lr, batch_size, [r.integers(2**63) for r in rngs])
    return [
        ClientUpdate.from_params(c.client_id, p.copy() if p is global_params else p, spec.probe_block)
        for c, p in zip(clients, params)
    ]


# -- experiment assembly --

def load_dataset(config: ExperimentConfig) -> Dataset:
    if config.dataset_kind == "idx":
        return load_idx_dataset(config.idx_dir, config.num_classes)
    return make_blobs(config.num_classes, config.dim, config.per_class, config.spread, derive_seed(config.seed, "dataset"))


def prepare_clients(dataset: Dataset, config: ExperimentConfig) -> list[ClientData]:
    spec = PartitionSpec(config.scheme, config.n, derive_seed(config.seed, "partition"))
    clients = partition(dataset, spec)
    return [extract_shared(c, config.gamma, derive_seed(config.seed, "shared", c.client_id)) for c in clients]


def harvest_probes(
    clients: Sequence[ClientData],
    spec: ModelSpec,
    start: ParamVector,
    config: ExperimentConfig,
    tag: str,
) -> np.ndarray:
    """Probe slices of every honest client update over clean FedAvg warm-up rounds."""
    params = start
    probes = []
    sizes = np.array([len(c.private) for c in clients], dtype=np.float64)
    weights = sizes / sizes.sum()
    for t in range(config.warmup_rounds):
        seeds = [derive_seed(config.seed, tag, t, c.client_id) for c in clients]
        updates = train_clients(params, clients, spec, config.epochs_client, config.lr_client,
                                config.batch_client, seeds)
        probes.extend(u.probe for u in updates)
        params = defenses.fedavg([u.params for u in updates], weights)
    if not probes:
        raise ValueError("warm-up produced no probe layers (warmup.rounds = 0?)")
    return np.stack(probes)


def pretrain_detector(
    config: ExperimentConfig,
    spec: ModelSpec,
    start: ParamVector,
    clients: Optional[Sequence[ClientData]] = None,
) -> DetectorState:
    """Pre-train an anomaly detector on clean warm-up probes.

    With ``clients=None`` the warm-up runs on a freshly drawn source-domain
    task (the adaptive detector's transfer setting); otherwise on the given
    clients' private data (the static baseline's setting).
    """
    tag = "warmup-target"
    if clients is None:
        tag = "warmup-source"
        source = make_source_domain(
            config.num_classes, spec.input_dim, config.per_class, config.spread, derive_seed(config.seed, "dataset")
        )
        pspec = PartitionSpec(config.scheme, config.n, derive_seed(config.seed, "source-partition"))
        clients = partition(source, pspec)
    probes = harvest_probes(clients, spec, start, config, tag)
    detector = aadm.new_detector(spec.probe_length(), config.lr_detection, derive_seed(config.seed, "detector-init"))
    return aadm.pretrain(detector, probes, config.epochs_pretrain, derive_seed(config.seed, "pretrain"))


def default_detector(
    config: ExperimentConfig,
    dataset: Optional[Dataset] = None,
    clients: Optional[Sequence[ClientData]] = None,
) -> DetectorState:
    """The detector a run of ``config`` starts from.

    ``brca`` (and any non-abnormal defense) gets the source-domain
    detector; ``abnormal`` gets one pre-trained on a clean warm-up of the
    target clients. Neither depends on the attack, so one detector can be
    reused across attack kinds.
    """
    dataset = dataset if dataset is not None else load_dataset(config)
    spec = config.model_spec(dataset.train.inputs.shape[1])
    start = init_params(spec, derive_seed(config.seed, "init"))
    if config.defense != "abnormal":
        return pretrain_detector(config, spec, start)
    if clients is None:
        clients = prepare_clients(dataset, config)
    return pretrain_detector(config, spec, start, [ClientData(c.client_id, c.private) for c in clients])


class Experiment:
    """One configured federation: data, initial model and detectors."""

    def __init__(
        self,
        config: ExperimentConfig,
        detector: Optional[DetectorState] = None,
        dataset: Optional[Dataset] = None,
    ):
        self.config = config
        self.dataset = dataset if dataset is not None else load_dataset(config)
        self.spec = config.model_spec(self.dataset.train.inputs.shape[1])
        self.clients = prepare_clients(self.dataset, config)
        self.by_id = {c.client_id: c for c in self.clients}
        self.attack = config.attack_spec()
        self.aggregator = config.aggregator_spec()
        self.initial_params = init_params(self.spec, derive_seed(config.seed, "init"))
        if detector is None and config.uses_detector:
            detector = default_detector(config, self.dataset, self.clients)
        if detector is not None and detector.input_dim != self.spec.probe_length():
            raise ConfigError("detector input width does not match the probe block")
        self.initial_detector = detector

    def initial_state(self) -> SimState:
        return SimState(self.initial_params, self.initial_detector, 0)

    def plan(self, round_idx: int) -> RoundPlan:
        c = self.config
        return plan_round(c.n, c.k, c.xi, round_idx, c.seed)

    def _client_updates(self, params: ParamVector, plan: RoundPlan, t: int) -> list[ClientUpdate]:
        c = self.config
        train_ids = [i for i in plan.selected if self.attack.needs_training or not plan.is_byzantine(i)]
        trained = train_clients(
            params, [self.by_id[i] for i in train_ids], self.spec, c.epochs_client, c.lr_client,
            c.batch_client, [derive_seed(c.seed, t, i, "train") for i in train_ids],
        )
        trained_by_id = {u.client_id: u.params for u in trained}
        updates = []
        for cid in plan.selected:
            byz = plan.is_byzantine(cid)
            base = trained_by_id.get(cid, params)
            if byz:
                base = apply_attack(base, self.attack, derive_seed(c.seed, t, cid, "attack"))
            if not base.is_finite():
                raise SimulationAbort(f"round {t}: client {cid} sent a non-finite update")
            updates.append(ClientUpdate.from_params(cid, base, self.spec.probe_block))
        return updates

    def run_round(self, state: SimState) -> tuple[SimState, RoundMetrics]:
        c = self.config
        t = state.round
        started = time.perf_counter()
        plan = self.plan(t)
        updates = self._client_updates(state.global_params, plan, t)
        ids = tuple(u.client_id for u in updates)
        vectors = [u.params for u in updates]
        detector = state.detector
        report = None
        bce = BCE_SENTINEL
        zeroed: tuple[int, ...] = ()
        kind = self.aggregator.kind

        if kind == "no-defense":
            sizes = np.array([len(self.by_id[i].private) for i in ids], dtype=np.float64)
            weights = sizes / sizes.sum()
            new = defenses.fedavg(vectors, weights)
        elif kind == "krum":
            f = self.aggregator.assumed_byzantine
            if f is None:
                f = math.ceil(c.xi * len(updates) - 1e-12)
            new, idx = defenses.krum(vectors, f)
            weights = np.zeros(len(updates))
            weights[idx] = 1.0
            zeroed = tuple(i for j, i in enumerate(ids) if j != idx)
        elif kind == "geomed":
            new = defenses.geomed(vectors, self.aggregator.weiszfeld_tol, self.aggregator.weiszfeld_max_iters)
            weights = np.full(len(updates), 1.0 / len(updates))
        elif kind == "trimmed-mean":
            trim = self.aggregator.trim_fraction
            new = defenses.trimmed_mean(vectors, c.xi if trim is None else trim)
            weights = np.full(len(updates), 1.0 / len(updates))
        elif kind == "abnormal":
            new, report = credibility.abnormal_aggregate(state.global_params, updates, detector, c.alpha)
        else:
            shared = [self.by_id[i].shared for i in ids]
            report, detector = credibility.assess(updates, shared, detector, c.beta, c.d, self.spec)
            new = credibility.aggregate(state.global_params, updates, report, c.alpha)
            if self.aggregator.unified_update:
                honest_shards = [self.by_id[i].shared for i in sorted(report.honest_set)]
                new = credibility.unified_update(new, honest_shards, self.spec, c.epochs_server,
                                                 c.lr_server, derive_seed(c.seed, t, "unified"))

        if report is not None:
            weights = report.credibilities
            zeroed = report.zeroed
            bce = detector_bce(report.raw_detection, plan)
        if not new.is_finite():
            raise SimulationAbort(f"round {t}: aggregated global model is not finite ({kind})")

        accuracy, test_loss = evaluate(self.spec, new, self.dataset.test)
        precision, recall = detection_prf(zeroed, plan)
        if not plan.byzantine:
            log.debug("round %d: no Byzantine clients, recall reported as 1", t)
        honest_set = tuple(i for i in ids if i not in set(zeroed))
        metrics = RoundMetrics(
            t, accuracy, test_loss, bce, precision, recall, ids, plan.byzantine,
            np.asarray(weights, dtype=np.float64), honest_set, report,
            (time.perf_counter() - started) * 1000.0,
        )
        return SimState(new, detector, t + 1), metrics

    def run(self, rounds: Optional[int] = None, on_round: Optional[Callable[[RoundMetrics], None]] = None):
        """Run ``rounds`` rounds (default ``config.rounds``); return the final state and all metrics."""
        state = self.initial_state()
        history = []
        for _ in range(self.config.rounds if rounds is None else rounds):
            state, metrics = self.run_round(state)
            history.append(metrics)
            if on_round is not None:
                on_round(metrics)
        return state, history


def run_experiment(config: ExperimentConfig, detector: Optional[DetectorState] = None):
    return Experiment(config, detector).run()
