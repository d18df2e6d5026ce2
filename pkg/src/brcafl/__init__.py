"""Byzantine-robust federated learning by credibility assessment, at desk scale.

The pieces compose bottom-up: :mod:`~brcafl.params` and :mod:`~brcafl.models`
give numpy models over flat parameter vectors; :mod:`~brcafl.data` and
:mod:`~brcafl.attacks` build non-iid federations with Byzantine clients;
:mod:`~brcafl.defenses`, :mod:`~brcafl.aadm` and :mod:`~brcafl.credibility`
aggregate their updates; :mod:`~brcafl.simulation` runs rounds.
"""

from .aadm import DetectorState, ScoreVector
from .attacks import AttackSpec, RoundPlan, apply_attack, plan_round
from .credibility import ClientUpdate, CredibilityReport, aggregate, assess, unified_update
from .data import ClientData, Dataset, PartitionSpec, extract_shared, make_blobs, partition
from .defenses import AggregatorSpec, fedavg, geomed, krum, trimmed_mean
from .models import Batch, ModelSpec, evaluate, init_params, loss_and_grad, sgd_epoch
from .params import DimensionError, ParamVector
from .seeding import derive_seed
from .simulation import Experiment, ExperimentConfig, RoundMetrics, run_experiment

__version__ = "0.1.0"

__all__ = [
    "AggregatorSpec", "AttackSpec", "Batch", "ClientData", "ClientUpdate", "CredibilityReport",
    "Dataset", "DetectorState", "DimensionError", "Experiment", "ExperimentConfig", "ModelSpec",
    "ParamVector", "PartitionSpec", "RoundMetrics", "RoundPlan", "ScoreVector", "aggregate",
    "apply_attack", "assess", "derive_seed", "evaluate", "extract_shared", "fedavg", "geomed",
    "init_params", "krum", "loss_and_grad", "make_blobs", "partition", "plan_round",
    "run_experiment", "sgd_epoch", "trimmed_mean", "unified_update",
]
