"""How much does picking each parallel edge greedily lose against the exact DP?

The node order comes from nearest neighbour; for each preference the greedy
linear rule and the label DP choose edges for that same order. Gaps are
relative Chebyshev costs.

    python demos/edge_selection_gap.py
"""

import numpy as np

from mgroute.fsasp import fsasp_gap_study
from mgroute.instancegen import GenConfig
from mgroute.pareto import preference_grid

cells, hv_rows = fsasp_gap_study(GenConfig.parse("flex2", 30, "motsp"), 10, preference_grid(21))
gaps = np.array([c["gap"] for c in cells])
print(f"{len(cells)} (instance, preference) cells")
print(f"share with no gap  {np.mean(gaps == 0):.2f}")
print(f"median / p95 / max {np.median(gaps):.4f} / {np.percentile(gaps, 95):.4f} / {gaps.max():.4f}")
for row in hv_rows[:5]:
    print(f"instance {row['instance']}: HV greedy {row['hv_greedy']:.4f}  HV dp {row['hv_dp']:.4f}")
