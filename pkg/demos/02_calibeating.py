"""Beating a forecaster's refinement with one learner per forecast value.

The engine keeps an independent follow-the-leader copy for every distinct
forecast it has seen.  Its loss approaches the forecaster's refinement,
with a gap that grows like |Q| log T.
"""

from __future__ import annotations

import math

from calibeat.harness import IidBinned, RunConfig, run

Q = 10
for T in (2**10, 2**12, 2**14, 2**16):
    res = run(RunConfig(IidBinned.spread(Q), T, seed=3, replicates=4))
    f = res.final
    gap = f["gap"][0]
    print(f"T={T:6d}  L={f['L']:9.1f}  R(forecaster)={f['R_f'][0]:9.1f}  gap={gap:6.1f}  "
          f"gap/(|Q| ln(T/|Q|))={gap / (Q * math.log(T / Q)):.3f}  K_T={f['K']:.1f}")

# Log loss with the KT estimator in each bin.
res = run(RunConfig(IidBinned.spread(Q), 2**14, seed=3, algorithm="engine=calibeat;learner=kt", loss="log"))
print("log loss, KT:", {k: round(res.final[k][0] if isinstance(res.final[k], list) else res.final[k], 2)
                        for k in ("L", "R_f", "gap")})
