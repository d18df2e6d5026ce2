"""Acceptance suite.

Each test checks one numbered criterion at its stated tolerance, appends a
``CRITERION n: PASS|FAIL ...`` line to the report printed at the end of the
pytest session, and then asserts. Federated runs are cached at module level
so later criteria reuse earlier runs (criterion 4's grid feeds 5, 6 and 7).
"""

from __future__ import annotations

import time

import numpy as np
import pytest
from conftest import ACCEPTANCE_LINES
from helpers import credibility_instance
from test_defenses import brute_krum, naive_trimmed_mean, vecs
from test_models import fd_grad, random_case

from brcafl.aadm import new_detector
from brcafl.cli import execute_run
from brcafl.credibility import ClientUpdate, assess
from brcafl.defenses import geomed, krum, krum_scores, trimmed_mean, weiszfeld
from brcafl.models import Batch, ModelSpec, init_params, loss_and_grad
from brcafl.simulation import Experiment, ExperimentConfig, default_detector

pytestmark = pytest.mark.slow

SEEDS = (0, 1, 2, 3, 4)
ATTACKS = ("gaussian", "same-value", "sign-flipping")
SCHEMES = ("non-iid-1", "non-iid-2", "non-iid-3", "iid")
BASELINES = ("krum", "geomed", "trimmed-mean")

_detectors: dict = {}
_runs: dict = {}


def report(n: int, ok: bool, detail: str) -> None:
    ACCEPTANCE_LINES.append(f"CRITERION {n}: {'PASS' if ok else 'FAIL'} {detail}")


def config(scheme, attack, defense, seed, **extra) -> ExperimentConfig:
    return ExperimentConfig().with_keys(
        **{"partition.scheme": scheme, "attack.kind": attack, "defense.kind": defense, "seed": seed, **extra}
    )


def detector_for(cfg: ExperimentConfig):
    """Detectors do not depend on the attack, so one per (seed, scheme, kind, gamma) is enough."""
    if not cfg.uses_detector:
        return None
    kind = "abnormal" if cfg.defense == "abnormal" else "source"
    key = (cfg.seed, cfg.scheme, kind, cfg.gamma)
    if key not in _detectors:
        _detectors[key] = default_detector(cfg)
    return _detectors[key]


def run(scheme, attack, defense, seed, **extra):
    key = (scheme, attack, defense, seed, tuple(sorted(extra.items())))
    if key not in _runs:
        cfg = config(scheme, attack, defense, seed, **extra)
        _runs[key] = Experiment(cfg, detector_for(cfg)).run()[1]
    return _runs[key]


def final_acc(scheme, attack, defense, **extra) -> float:
    return float(np.mean([run(scheme, attack, defense, s, **extra)[-1].test_accuracy for s in SEEDS]))


# -- 1 --

def test_criterion_1_gradient_oracle():
    rng = np.random.default_rng(2024)
    started = time.perf_counter()
    worst, failures = 0.0, 0
    for _ in range(100):
        spec, params, batch = random_case(rng)
        _, g = loss_and_grad(spec, params, batch)
        num = fd_grad(spec, params, batch)
        rel = np.abs(g.values - num) / np.maximum(np.abs(num), 1e-2)
        worst = max(worst, float(rel.max()))
        failures += int(not np.all(np.abs(g.values - num) <= 1e-4 * np.abs(num) + 1e-6))
    elapsed = time.perf_counter() - started
    ok = failures == 0 and elapsed < 10
    report(1, ok, f"100 triples, {failures} failures, worst scaled rel err {worst:.2e}, {elapsed:.2f}s (< 10s)")
    assert ok


# -- 2 --

def test_criterion_2_aggregator_oracles():
    rng = np.random.default_rng(7)
    started = time.perf_counter()
    krum_bad = trim_bad = 0
    for _ in range(200):
        k = int(rng.integers(3, 8))
        f = int(rng.integers(0, k - 2))
        pts = rng.standard_normal((k, int(rng.integers(1, 6))))
        scores, best = brute_krum(pts.tolist(), f)
        krum_bad += int(krum(vecs(pts), f)[1] != best
                        or not np.allclose(krum_scores(vecs(pts), f), scores, rtol=1e-12))
    for _ in range(200):
        k = int(rng.integers(1, 8))
        trim = float(rng.choice([0.0, 0.1, 0.2, 0.3, 0.4]))
        if 2 * np.ceil(trim * k - 1e-12) >= k:
            trim = 0.0
        pts = rng.standard_normal((k, int(rng.integers(1, 6))))
        trim_bad += int(not np.allclose(trimmed_mean(vecs(pts), trim).values,
                                        naive_trimmed_mean(pts.tolist(), trim), rtol=1e-12, atol=1e-15))
    geo_err, mono_bad = 0.0, 0
    for _ in range(50):
        # symmetric set: random points and their reflections through a centre
        centre = rng.standard_normal(3)
        half = rng.standard_normal((int(rng.integers(1, 5)), 3))
        pts = np.vstack([centre + half, centre - half])
        geo_err = max(geo_err, float(np.abs(geomed(vecs(pts), tol=1e-12, max_iters=10_000).values - centre).max()))
        _, history = weiszfeld(vecs(pts + 0.1 * rng.standard_normal(pts.shape)), tol=1e-10, max_iters=500)
        mono_bad += int(any(b > a + 1e-12 * max(1.0, a) for a, b in zip(history, history[1:])))
    elapsed = time.perf_counter() - started
    ok = krum_bad == 0 and trim_bad == 0 and geo_err <= 1e-6 and mono_bad == 0 and elapsed < 10
    report(2, ok, f"krum mismatches {krum_bad}/200, trimmed-mean mismatches {trim_bad}/200, "
                  f"geomed max err {geo_err:.1e} (<= 1e-6), non-monotone runs {mono_bad}/50, {elapsed:.2f}s (< 10s)")
    assert ok


# -- 3 --

def test_criterion_3_credibility_arithmetic():
    updates, shared, detector, spec, _, _ = credibility_instance()
    rep, _ = assess(updates, shared, detector, 0.5, 0.1, spec, adapt=False)
    err = float(np.abs(rep.credibilities - np.array([0.5333333333, 0.4666666667, 0.0])).max())

    spec2 = ModelSpec("mlp-classifier", 4, 3, (5,))
    base = init_params(spec2, 0)
    same = [ClientUpdate.from_params(i, base, spec2.probe_block) for i in range(5)]
    rng = np.random.default_rng(0)
    shard = Batch(rng.standard_normal((6, 4)), rng.integers(0, 3, 6))
    flat, _ = assess(same, [shard] * 5, new_detector(spec2.probe_length()), 0.5, 0.1, spec2)
    uniform = np.allclose(flat.credibilities, 0.2, rtol=0, atol=1e-15) and flat.zeroed == ()
    ok = err <= 1e-6 and uniform
    report(3, ok, f"hand instance r={np.round(rep.credibilities, 4).tolist()} max err {err:.1e} (<= 1e-6); "
                  f"sigma=0 round uniform={uniform} zeroed={list(flat.zeroed)}")
    assert ok


# -- 4 --

def test_criterion_4_directional_reproduction():
    started = time.perf_counter()
    for scheme in SCHEMES:
        for attack in ATTACKS:
            for defense in ("brca",) + BASELINES + (("no-defense",) if scheme == "non-iid-2" else ()):
                for s in SEEDS:
                    run(scheme, attack, defense, s)
    elapsed = time.perf_counter() - started

    lines, ok = [], True
    for attack in ATTACKS:
        nd = final_acc("non-iid-2", attack, "no-defense")
        br = final_acc("non-iid-2", attack, "brca")
        a_ok = nd <= 0.25 if attack != "gaussian" else True
        b_ok = br >= 0.75 and br >= nd + 0.4
        ok &= a_ok and b_ok
        lines.append(f"{attack}: no-defense {nd:.3f}{'' if attack == 'gaussian' else ' (<= 0.25 ' + ('ok' if a_ok else 'MISS') + ')'}"
                     f", brca {br:.3f} (>= 0.75 and >= no-defense+0.4: {'ok' if b_ok else 'MISS'})")
    misses = []
    for scheme in SCHEMES:
        for attack in ATTACKS:
            br = final_acc(scheme, attack, "brca")
            for b in BASELINES:
                other = final_acc(scheme, attack, b)
                if br < other - 0.02:
                    misses.append(f"{scheme}/{attack}: brca {br:.3f} < {b} {other:.3f} - 0.02")
    ok &= not misses
    time_ok = elapsed < 300
    ok &= time_ok
    report(4, ok, "; ".join(lines)
           + f"; (c) {12 - len({m.split(':')[0] for m in misses})}/12 cells ok"
           + (" [" + "; ".join(misses) + "]" if misses else "")
           + f"; runtime {elapsed:.0f}s (< 300s: {'ok' if time_ok else 'MISS'})")
    assert ok


# -- 5 --

def test_criterion_5_detection_quality():
    lines, ok = [], True
    exact_zero = True
    for attack in ATTACKS:
        rec, prec = [], []
        for s in SEEDS:
            history = run("non-iid-2", attack, "brca", s)
            for m in history[10:]:
                rec.append(m.detection_recall)
                prec.append(m.detection_precision)
            for m in history:
                w = dict(zip(m.client_ids, m.weights))
                exact_zero &= all(w[i] == 0.0 for i in m.credibility_report.zeroed)
        r, p = float(np.mean(rec)), float(np.mean(prec))
        need_r, need_p = (0.7, None) if attack == "gaussian" else (0.9, 0.8)
        good = r >= need_r and (need_p is None or p >= need_p)
        ok &= good
        lines.append(f"{attack}: recall {r:.3f} (>= {need_r}), precision {p:.3f}"
                     + (f" (>= {need_p})" if need_p else "") + ("" if good else " MISS"))
    ok &= exact_zero
    report(5, ok, "; ".join(lines) + f"; zeroed credibility exactly 0 every round: {exact_zero}")
    assert ok


# -- 6 --

def _bce_curve(attack, defense):
    return np.mean([[m.detector_bce for m in run("non-iid-2", attack, defense, s)] for s in SEEDS], axis=0)


def test_criterion_6_adaptation_benefit():
    lines, ok = [], True
    for attack in ATTACKS:
        adaptive = _bce_curve(attack, "brca")
        static = _bce_curve(attack, "abnormal")
        third = len(adaptive) // 3
        first, last = adaptive[:third].mean(), adaptive[-third:].mean()
        static_last = static[-third:].mean()
        good = last < first and last <= static_last
        ok &= good
        lines.append(f"{attack}: adaptive first {first:.4f} -> last {last:.4f}, static last {static_last:.4f}"
                     + ("" if good else " MISS"))
    report(6, ok, "; ".join(lines))
    assert ok


# -- 7 --

def test_criterion_7_unified_update_benefit():
    gaps = []
    for scheme in SCHEMES:
        with_uu = final_acc(scheme, "same-value", "brca")
        without = final_acc(scheme, "same-value", "brca", **{"defense.unified_update": False})
        gaps.append(with_uu - without)
    first_ok = gaps[0] >= 0.05
    mono_ok = all(b <= a + 0.01 for a, b in zip(gaps, gaps[1:]))
    ok = first_ok and mono_ok
    report(7, ok, "same-value gaps (with - without) "
                  + ", ".join(f"{s} {g:+.4f}" for s, g in zip(SCHEMES, gaps))
                  + f"; non-iid-1 gap >= 0.05: {first_ok}; shrinking within 0.01: {mono_ok}")
    assert ok


# -- 8 --

def test_criterion_8_shared_rate_sweep():
    gammas = (0.01, 0.03, 0.05, 0.07, 0.10)
    accs = [final_acc("non-iid-2", "same-value", "brca", gamma=g) for g in gammas]
    nd = final_acc("non-iid-2", "same-value", "no-defense", gamma=0.01)
    beats = accs[0] >= nd + 0.3
    mono = all(b >= a - 0.02 for a, b in zip(accs, accs[1:]))
    ok = beats and mono
    report(8, ok, "brca " + ", ".join(f"gamma={g} {a:.3f}" for g, a in zip(gammas, accs))
                  + f"; no-defense at 0.01 {nd:.3f}; margin >= 0.3: {beats}; non-decreasing within 0.02: {mono}")
    assert ok


# -- 9 --

def test_criterion_9_determinism(tmp_path):
    cells = [("non-iid-2", "sign-flipping", "brca"), ("non-iid-2", "gaussian", "abnormal"),
             ("non-iid-1", "same-value", "geomed")]
    identical = []
    for i, (scheme, attack, defense) in enumerate(cells):
        cfg = config(scheme, attack, defense, 3)
        blobs = []
        for rep in ("a", "b"):
            out = tmp_path / f"{i}{rep}"
            execute_run(cfg, out)
            blobs.append((out / "metrics.jsonl").read_bytes())
        identical.append(blobs[0] == blobs[1])
    ok = all(identical)
    report(9, ok, f"{sum(identical)}/{len(cells)} repeated runs byte-identical metrics.jsonl")
    assert ok
