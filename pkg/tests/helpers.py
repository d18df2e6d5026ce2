"""Hand-built instances shared by unit and acceptance tests."""

from __future__ import annotations

import math

import numpy as np
from scipy.optimize import fsolve

from brcafl.aadm import DetectorState, detector_spec
from brcafl.credibility import ClientUpdate
from brcafl.models import Batch, ModelSpec
from brcafl.params import ParamVector


def standardized(theta: float) -> np.ndarray:
    """Every 3-point z-vector (mean 0, population variance 1) is sqrt(2) cos(theta - 2 pi j / 3)."""
    return math.sqrt(2) * np.cos(theta - 2 * math.pi * np.arange(3) / 3)


def _normalized_scores(theta):
    e = np.exp(-2 * standardized(theta))
    return e / e.sum()


def credibility_instance(target=(0.4, 0.35, 0.25), beta=0.5):
    """Three clients whose pre-threshold credibilities equal ``target``.

    The detector is an all-zero autoencoder, so each client's reconstruction
    error is the mean square of its probe. Each shared shard is one sample
    at x = 0 with label 0, so the verification loss is log(1 + exp(-t))
    where ``b = (0, -t)`` is the client's bias. Angles for the detection and
    verification z-vectors are solved so that ``beta e + (1 - beta) f = target``.
    """
    target = np.asarray(target, dtype=float)

    def residual(v):
        r = beta * _normalized_scores(v[0]) + (1 - beta) * _normalized_scores(v[1])
        return r[:2] - target[:2]

    th_e, th_f = fsolve(residual, (0.0, 0.0), xtol=1e-12)
    errors = 1.0 + 0.1 * standardized(th_e)
    losses = 0.5 + 0.1 * standardized(th_f)

    spec = ModelSpec("logistic-regression", 1, 2)
    updates, shared = [], []
    for cid, (m, ell) in enumerate(zip(errors, losses)):
        t = -math.log(math.expm1(ell))
        params = ParamVector(np.array([math.sqrt(m), math.sqrt(m), 0.0, -t]), spec.layout())
        updates.append(ClientUpdate.from_params(cid, params, "w"))
        shared.append(Batch(np.zeros((1, 1)), np.array([0])))
    dspec = detector_spec(spec.probe_length())
    detector = DetectorState(dspec, ParamVector(np.zeros(dspec.num_params()), dspec.layout()), 0, 0.02)
    return updates, shared, detector, spec, errors, losses
