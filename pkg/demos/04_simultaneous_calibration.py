"""Calibrated predictions that still beat the forecaster.

Predictions live on a simplex grid.  A swap-regret learner proposes a
column-stochastic matrix over grid points, the rounded calibeating
prediction proposes a fixed distribution, a two-expert weight mixes them,
and the prediction is sampled from the stationary distribution of the mix.
"""

from __future__ import annotations

import math

import numpy as np

from calibeat.grid import build_grid, round_to_grid
from calibeat.harness import IidBinned, RunConfig, run
from calibeat.simulcal import stationary

g = build_grid(2, 0.25)
print("grid:", g.points[:, 0].tolist())
print("rounding of (0.3, 0.7):", {tuple(g.points[i].tolist()): round(w, 3) for i, w in round_to_grid(g, [0.3, 0.7]).items()})
C = np.array([[0.9, 0.2, 0, 0, 0], [0.1, 0.6, 0.3, 0, 0], [0, 0.2, 0.4, 0.3, 0], [0, 0, 0.3, 0.5, 0.5],
              [0, 0, 0, 0.2, 0.5]])
pi = stationary(C)
print("stationary distribution:", pi.round(4), "residual", f"{np.abs(C @ pi - pi).sum():.1e}")

for T in (2**12, 2**14):
    f = run(RunConfig(IidBinned.spread(2), T, seed=5, algorithm="engine=simul")).final
    print(f"T={T}: gap={f['gap'][0]:.1f} (ln T={math.log(T):.1f})  K_T={f['K']:.1f}  "
          f"pseudo K_T={f['Ktilde']:.1f}  sqrt(T ln T)={math.sqrt(T * math.log(T)):.0f}  "
          f"mean weight on BM={f['w_mean']:.3f}  max residual={f['residual_max']:.1e}")
