"""Loss = refinement + calibration, bin by bin.

A forecaster's cumulative loss splits into how informative its bins are
(refinement: the loss of the best constant in each bin) and how far each
issued value is from its bin's outcome frequencies (calibration).
"""

from __future__ import annotations

import numpy as np

from calibeat.scoring import Transcript, score
from calibeat.simplex import Brier, LogLoss, bin_optimum

rng = np.random.default_rng(0)

# Two bins with true rain rates 0.2 and 0.7.  The forecaster says 0.3 and 0.6.
truth = np.array([0.2, 0.7])
said = np.array([[0.3, 0.7], [0.6, 0.4]])  # (rain, dry)
cells = rng.integers(0, 2, 5000)
ys = (rng.random(5000) >= truth[cells]).astype(int)  # 0 = rain
tr = Transcript(said[cells][:, None, :], said[cells], ys)

for loss in (Brier(), LogLoss()):
    rep = score(loss, tr)
    print(f"{loss.name:>5}: L = {rep.cumulative_loss:8.2f}  R = {rep.refinement_self:8.2f}  "
          f"K = {rep.calibration:6.2f}  (R + K - L = {rep.refinement_self + rep.calibration - rep.cumulative_loss:.1e})")

# The refinement of one bin is the loss of its best constant prediction.
counts = np.bincount(ys[cells == 0], minlength=2)
p, v = bin_optimum(Brier(), counts)
print("bin 0 counts", counts, "best constant", p.round(3), "value", round(v, 2))

# Relabelling each bin with its own frequency keeps R and zeroes K.
fixed = np.array([[np.mean(ys[cells == c] == 0), np.mean(ys[cells == c] == 1)] for c in range(2)])
rep = score(Brier(), Transcript(said[cells][:, None, :], fixed[cells], ys))
print(f"recalibrated: L = {rep.cumulative_loss:.2f}  K = {rep.calibration:.2e}")
