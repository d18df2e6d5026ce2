"""
Defenses under attack
=====================

Ten clients share a 10-class blob task, two of them Byzantine. Each client
holds only two classes (``non-iid-2``). We run every aggregation rule
against each attack and print the final test accuracy.

Run with ``python demos/01_defenses_under_attack.py``; it takes well under a
minute on one core.
"""

# %%
from __future__ import annotations

from brcafl.simulation import Experiment, ExperimentConfig

ATTACKS = ("gaussian", "same-value", "sign-flipping")
DEFENSES = ("no-defense", "krum", "geomed", "trimmed-mean", "abnormal", "brca")

base = ExperimentConfig().with_keys(rounds=30)

# %%
# A detector is pre-trained once per defense; the attack does not affect it,
# so we build each experiment's detector on the first attack and reuse it.
detectors = {}
results = {}
for defense in DEFENSES:
    for attack in ATTACKS:
        config = base.with_keys(**{"attack.kind": attack, "defense.kind": defense})
        experiment = Experiment(config, detectors.get(defense))
        detectors.setdefault(defense, experiment.initial_detector)
        _, history = experiment.run()
        results[defense, attack] = history[-1].test_accuracy

# %%
print(f"{'defense':<14}" + "".join(f"{a:>15}" for a in ATTACKS))
for defense in DEFENSES:
    print(f"{defense:<14}" + "".join(f"{results[defense, a]:>15.3f}" for a in ATTACKS))

# %%
# Plain averaging collapses under the two scaling attacks. Krum keeps a
# single client per round, so with two classes per client it never sees most
# of the label space.
