"""Acceptance criteria 1-13, one test each.

Every test runs the matching check from :mod:`calibeat.verify` on the
acceptance seeds, prints a ``PASS``/``FAIL`` line, and asserts it passed.
The lines are repeated in the pytest terminal summary.
"""

from __future__ import annotations

import json

import pytest

from calibeat import verify

CRITERIA = [
    (1, "decomposition identity", verify.check_decomposition, 10),
    (2, "closed-form vs oracle refinement", verify.check_bin_optimum, 30),
    (3, "rounding", verify.check_rounding, 10),
    (4, "calibeating log rate (FTL, Brier)", verify.check_calibeating_ftl, 300),
    (5, "log-loss calibeating (KT)", verify.check_calibeating_kt, 300),
    (6, "multi-calibeating composition", verify.check_composition, None),
    (7, "multi-calibeating log rate", verify.check_multi_rate, 300),
    (8, "Hedge bound", verify.check_hedge, 60),
    (9, "lopsided two-expert regret", verify.check_lopsided, 60),
    (10, "BM swap regret", verify.check_bm, 60),
    (11, "simultaneous guarantee", verify.check_simul, 900),
    (12, "K=3 tradeoff smoke test", verify.check_tradeoff, 600),
    (13, "determinism", verify.check_determinism, None),
]

LINES: dict[int, str] = {}


@pytest.mark.parametrize("number,title,check,budget", CRITERIA, ids=[f"criterion_{c[0]:02d}" for c in CRITERIA])
def test_criterion(number, title, check, budget):
    res = check()
    ok = res.passed and (budget is None or res.seconds <= budget)
    line = f"{'PASS' if ok else 'FAIL'} criterion {number:2d}: {title} ({res.seconds:.1f}s)"
    LINES[number] = line
    print(line)
    detail = json.dumps(res.to_dict()["details"], sort_keys=True)[:2000]
    assert res.passed, f"{title}: {detail}"
    assert budget is None or res.seconds <= budget, f"{title}: took {res.seconds:.1f}s, budget {budget}s"
