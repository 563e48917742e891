"""Online calibeating, multi-calibeating and simultaneous calibration for proper losses."""

from .calibeating import CalibeatingEngine, ProtocolError, Rate, gap_bound
from .grid import SimplexGrid, build_grid, round_to_grid
from .harness import RunConfig, RunResult, generate, rate_fit, run
from .learners import EWOO, ExpWeights, FTLBrier, FTLLogKT, Hedge, Lopsided, SimplePerturbedLeader
from .multicalibeating import MultiEngine
from .scoring import BinLedger, Transcript, calibration_error, cumulative_loss, refinement, score
from .simplex import Brier, DomainError, GridProper, LogLoss, make_loss
from .simulcal import BMReduction, SimulEngine, StationaryError, stationary

__version__ = "0.1.0"

__all__ = [
    "BMReduction", "BinLedger", "Brier", "CalibeatingEngine", "DomainError", "EWOO", "ExpWeights",
    "FTLBrier", "FTLLogKT", "GridProper", "Hedge", "LogLoss", "Lopsided", "MultiEngine", "ProtocolError",
    "Rate", "RunConfig", "RunResult", "SimplePerturbedLeader", "SimplexGrid", "SimulEngine",
    "StationaryError", "Transcript", "build_grid", "calibration_error", "cumulative_loss", "gap_bound",
    "generate", "make_loss", "rate_fit", "refinement", "round_to_grid", "run", "score", "stationary",
]
