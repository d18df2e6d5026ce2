"""
Inside one credibility round
============================

Step a BRCA federation round by round and look at what the server sees:
the detector's reconstruction errors, each client's loss on its own shared
shard, and the credibility weights those turn into.
"""

# %%
from __future__ import annotations

import numpy as np

from brcafl.simulation import Experiment, ExperimentConfig

config = ExperimentConfig().with_keys(**{"attack.kind": "sign-flipping", "rounds": 5})
experiment = Experiment(config)
state = experiment.initial_state()

# %%
np.set_printoptions(precision=3, suppress=True)
for _ in range(config.rounds):
    state, m = experiment.run_round(state)
    rep = m.credibility_report
    print(f"round {m.round}: accuracy {m.test_accuracy:.3f}, Byzantine {list(m.byzantine)}")
    print("  clients      ", np.array(rep.client_ids))
    print("  recon error  ", rep.raw_detection.raw_errors)
    print("  shared loss  ", rep.losses)
    print("  credibility  ", rep.credibilities)
    print(f"  zeroed {list(rep.zeroed)}  precision {m.detection_precision:.2f}  recall {m.detection_recall:.2f}")

# %%
# Flipped updates reconstruct badly and fit their own shared shard poorly,
# so both scores push their weight below the mean and the threshold zeroes it.
# The detector then fine-tunes on the probes of the clients it kept.
print("detector adaptation steps:", state.detector.adapt_count)
