"""Calibeating several forecasters at once.

Each forecaster gets its own calibeating engine; exponential weights over
the engines' predictions follows whichever forecaster is most refined.
The gap to every forecaster is at most that engine's own gap plus the
aggregator's regret.
"""

from __future__ import annotations

import math

from calibeat.harness import MultiForecaster, RunConfig, run

N, Q, T = 6, 5, 2**14
res = run(RunConfig(MultiForecaster(N, Q), T, seed=1, algorithm="engine=multi"))
f = res.final
print(f"N={N} |Q|={Q} T={T}")
for n in range(N):
    print(f"  forecaster {n + 1}: R = {f['R_f'][n]:8.1f}  gap = {f['gap'][n]:7.1f}  engine gap = {f['sub_gap'][n]:7.1f}")
print(f"aggregator regret {f['agg_regret']:.2f}  (4 ln N = {4 * math.log(N):.2f})")
worst = max(g - (s + f["agg_regret"]) for g, s in zip(f["gap"], f["sub_gap"]))
print(f"max of gap - (engine gap + regret): {worst:.2e}")

# Hedge sampling works for any bounded loss; the expected loss tracks the mixture.
res = run(RunConfig(MultiForecaster(N, Q), T, seed=1, algorithm="engine=multi;mode=sampling;aggregator=hedge"))
print(f"sampling mode: max gap {max(res.final['gap']):.1f}, regret (expected) {res.final['agg_regret']:.1f}")
