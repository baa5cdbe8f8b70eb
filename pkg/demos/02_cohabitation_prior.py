"""
From a cohabitation matrix to pseudo-labels
===========================================

A cohabitation matrix scores how likely two species grow near each
other. This walk-through parses one, applies an expert correction, turns
it into a row-stochastic prior and uses the prior to re-score a treetop
candidate next to a labeled tree.
"""

import numpy as np

from treepl.cohabitation import (
    ExpertDelta,
    apply_expert_deltas,
    build_prior,
    parse_matrix_csv,
)
from treepl.pseudolabel import Candidate, FusionConfig, Parent, distance_weight, select_best_parent

# %%
# The matrix arrives as CSV, usually extracted from a language-model
# reply. Parsing validates symmetry, the unit diagonal and the [0, 1] range.
text = """species,Pine,Spruce,Birch,Alder
Pine,1,0.55,0.6,0.1
Spruce,0.55,1,0.3,0.2
Birch,0.6,0.3,1,0.4
Alder,0.1,0.2,0.4,1
"""
m = parse_matrix_csv(text)

# A forester knows Pine and Spruce share this site more than the
# model thought and adds 0.15 to that pair.
m = apply_expert_deltas(m, [ExpertDelta("Pine", "Spruce", 0.15)])
print(f"Pine-Spruce after correction: {m.values[0, 1]:.2f}")

# %%
# Off-diagonal scores are damped by 0.75 and every row is normalized,
# so row c reads as "what grows next to a c tree".
prior = build_prior(m, delta_scale=0.75)
print(np.round(prior.pi, 3))

# %%
# Distance matters too: parents within r_min count fully, the weight
# falls along an ellipse to epsilon at r_max and is zero beyond.
cfg = FusionConfig(r_min=5, r_max=20, epsilon=0.05, tau=0.9)
for d in (0, 5, 12.5, 20, 25):
    print(f"w({d:>4}) = {float(distance_weight(d, cfg)):.4f}")

# %%
# A candidate the network thinks is Spruce or Birch sits 6 m from a
# labeled Pine and 15 m from a labeled Alder. Each parent proposes a
# re-scored distribution and the single most confident entry wins.
cand = Candidate(x=10, y=10, probs=np.array([0.05, 0.45, 0.45, 0.05]))
parents = [Parent(16, 10, 0), Parent(10, 25, 3)]
best = select_best_parent(cand, parents, prior, cfg)
print(f"label {m.species[best.label]}, confidence {best.confidence:.3f}, from parent {best.parent_index}")
print("kept as pseudo-label:", best.confidence > cfg.tau)
