"""Driving experiments from config files.

Runs the bundled sweep config through the command-line entry point and
summarizes the results into a markdown table and SVG charts.
Equivalent shell commands:

    calibeat sweep --config demos/configs/sweep_T.yaml --out /tmp/calibeat_demo
    calibeat report /tmp/calibeat_demo
"""

from __future__ import annotations

import os
import tempfile

from calibeat.cli import main

here = os.path.dirname(os.path.abspath(__file__))
out = tempfile.mkdtemp(prefix="calibeat_demo_")
main(["sweep", "--config", os.path.join(here, "configs", "sweep_T.yaml"), "--out", out])
main(["run", "--config", os.path.join(here, "configs", "simul.yaml"), "--out", out, "--set", "T=4096"])
main(["report", out])
print(sorted(os.listdir(os.path.join(out, "report")))[:4], "...")
