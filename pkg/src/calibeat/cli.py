"""Command-line front end: ``run``, ``sweep``, ``verify`` and ``report``.

Exit codes: 0 success, 1 configuration/validation failure (including failed
verify checks and empty report directories), 2 runtime abort.
"""

from __future__ import annotations

import argparse
import copy
import glob
import itertools
import json
import os
import sys
from typing import Optional

import yaml

from .calibeating import ProtocolError
from .harness import ConfigError, RunAbort, RunConfig, fit_series, parse_algorithm, run, write_result
from .simplex import DomainError
from .simulcal import StationaryError
from .svg import line_chart

DEFAULT_SWEEP_CAP = 10**4
SWEEP_ALIASES = {"T": "T", "seed": "seed", "seeds": "seed", "Q": "scenario.Q", "N": "scenario.N",
                 "eps": "algorithm.eps", "epsilon": "algorithm.eps"}
TOP_LEVEL = {"name", "scenario", "algorithm", "loss", "T", "seed", "replicates", "metrics_stride",
             "sweep", "out", "cap"}

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_CONFIG):
        super().__init__(message)
        self.code = code


# -- config documents ------------------------------------------------------------------


def _line_of(root, path: list[str]) -> Optional[int]:
    """1-based source line of the node at ``path`` in a composed YAML tree."""
    node, line = root, None
    for part in path:
        if not isinstance(node, yaml.MappingNode):
            break
        for k, val in node.value:
            if k.value == part:
                node, line = val, k.start_mark.line + 1
                break
        else:
            break
    return line


def load_document(path: str) -> tuple[dict, object]:
    try:
        text = open(path).read()
    except OSError as exc:
        raise CliError(f"cannot read config: {exc}") from None
    try:
        doc = yaml.safe_load(text)
        node = yaml.compose(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" at line {mark.line + 1}" if mark is not None else ""
        raise CliError(f"config parse error{where}: {getattr(exc, 'problem', exc)}") from None
    if not isinstance(doc, dict):
        raise CliError("config must be a mapping")
    return doc, node


def _set_path(doc: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    cur = doc
    for p in parts[:-1]:
        if p == "algorithm" and isinstance(cur.get(p), str):
            cur[p] = {k: v for k, v in parse_algorithm(cur[p]).items() if v is not None}
        nxt = cur.setdefault(p, {})
        if not isinstance(nxt, dict):
            raise ConfigError(dotted, f"{p!r} is not a mapping")
        cur = nxt
    cur[parts[-1]] = value


def apply_overrides(doc: dict, overrides: list[str], seed: Optional[int]) -> dict:
    doc = copy.deepcopy(doc)
    for item in overrides or []:
        key, eq, raw = item.partition("=")
        if not eq or not key:
            raise ConfigError("--set", f"expected key=value, got {item!r}")
        _set_path(doc, key.strip(), yaml.safe_load(raw))
    if seed is not None:
        doc["seed"] = seed
    return doc


def normalize(doc: dict) -> dict:
    """Validated, defaults-filled form of a config document (stable under echo/parse)."""
    extra = set(doc) - TOP_LEVEL
    if extra:
        raise ConfigError("config", f"unknown fields {sorted(extra)}")
    base = {k: v for k, v in doc.items() if k not in ("sweep", "out", "cap")}
    cfg = RunConfig.from_dict(base)
    norm = cfg.to_dict()
    norm["algorithm"] = {k: v for k, v in norm["algorithm"].items() if v is not None}
    sweep = doc.get("sweep") or {}
    if not isinstance(sweep, dict):
        raise ConfigError("sweep", "must be a mapping of axis -> list")
    axes = {}
    for axis, vals in sweep.items():
        if not isinstance(vals, list) or not vals:
            raise ConfigError(f"sweep.{axis}", "must be a nonempty list")
        axes[SWEEP_ALIASES.get(axis, axis)] = vals
    norm["sweep"] = axes
    norm["out"] = doc.get("out", "results")
    cap = doc.get("cap", DEFAULT_SWEEP_CAP)
    if not isinstance(cap, int) or cap < 1:
        raise ConfigError("cap", "must be a positive integer")
    norm["cap"] = cap
    return norm


def echo(norm: dict) -> str:
    """Canonical text form of a normalized config (JSON, which is also valid YAML)."""
    return json.dumps(norm, sort_keys=True, indent=1)


def expand(norm: dict) -> list[RunConfig]:
    axes = norm["sweep"]
    size = 1
    for vals in axes.values():
        size *= len(vals)
    if size > norm["cap"]:
        raise ConfigError("sweep", f"cross product has {size} runs, above the cap of {norm['cap']}")
    base = {k: v for k, v in norm.items() if k not in ("sweep", "out", "cap")}
    configs = []
    for combo in itertools.product(*axes.values()):
        d = copy.deepcopy(base)
        for path, val in zip(axes, combo):
            _set_path(d, path, val)
        configs.append(RunConfig.from_dict(d))
    return configs


# -- commands --------------------------------------------------------------------------


def _threads(arg: Optional[int]) -> int:
    if arg is not None:
        return max(1, arg)
    env = os.environ.get("CALIBEAT_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise CliError(f"CALIBEAT_THREADS must be an integer, got {env!r}") from None
    return 1


def _fmt(v) -> str:
    return "-" if v is None else f"{v:.4g}"


def cmd_run(args) -> int:
    doc, node = load_document(args.config)
    try:
        doc = apply_overrides(doc, args.set, args.seed)
        norm = normalize(doc)
        configs = expand(norm)
    except ConfigError as exc:
        line = _line_of(node, exc.field.split(".")) if node is not None else None
        where = f" (line {line})" if line else ""
        raise CliError(f"invalid config: {exc}{where}") from None
    out = args.out or norm["out"]
    threads = _threads(args.threads)
    print(f"{'setting':<40} {'T':>8} {'seed':>6} {'max gap':>10} {'K_T':>10} {'log fit':>18} {'secs':>6}")
    finals = []
    for cfg in configs:
        try:
            res = run(cfg, threads=threads)
        except (RunAbort, StationaryError, ProtocolError, DomainError) as exc:
            raise CliError(f"runtime abort in {cfg.setting()} seed={cfg.seed}: {exc}", EXIT_RUNTIME) from None
        write_result(res, out)
        f = res.final
        fit = fit_series(res.mean, "gap", "log")
        fit_s = "-" if fit is None else f"{fit.coefficients[1]:.3g}*ln t (r={fit.max_rel_residual:.2g})"
        print(f"{cfg.setting():<40} {cfg.T:>8} {cfg.seed:>6} {max(f['gap']):>10.4g} {f['K']:>10.4g} "
              f"{fit_s:>18} {res.wall_clock:>6.1f}")
        finals.append((cfg, max(f["gap"])))
    _print_sweep_fit(finals)
    print(f"wrote {2 * sum(c.replicates for c in configs)} files to {out}")
    return EXIT_OK


def _print_sweep_fit(finals):
    """Fit the final gap against T across runs that differ only in T (and seed)."""
    from .harness import rate_fit

    groups: dict = {}
    for cfg, gap in finals:
        d = cfg.to_dict()
        d.pop("T"), d.pop("seed")
        groups.setdefault(json.dumps(d, sort_keys=True), {}).setdefault(cfg.T, []).append(gap)
    for key, by_T in groups.items():
        if len(by_T) < 4:
            continue
        ts = sorted(by_T)
        vals = [sum(by_T[t]) / len(by_T[t]) for t in ts]
        for shape in ("log", "sqrt"):
            try:
                fit = rate_fit(ts, vals, shape)
            except ValueError:
                print(f"sweep fit skipped: final-T span {ts[0]}..{ts[-1]} is under two decades "
                      "(per-run log fits above use the checkpoint series)")
                break
            c1, c2 = fit.coefficients
            print(f"sweep fit [{shape}] final gap ~ {c1:.3g} + {c2:.3g}*g(T), max rel residual {fit.max_rel_residual:.3g}")


def cmd_verify(args) -> int:
    from . import verify

    results = verify.run_suite(args.suite, report=lambda r: print(r.line(), flush=True))
    doc = {"suite": args.suite, "passed": all(r.passed for r in results), "checks": [r.to_dict() for r in results]}
    text = json.dumps(doc, sort_keys=True, indent=1)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, f"verify_{args.suite}.json"), "w") as fp:
            fp.write(text + "\n")
    print(text)
    failed = [r.name for r in results if not r.passed]
    if failed:
        print("failed: " + "; ".join(failed), file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


def _shape(rows, key) -> str:
    fits = []
    for shape in ("log", "sqrt"):
        fit = fit_series(rows, key, shape)
        if fit is not None:
            fits.append((fit.max_rel_residual, shape, fit.coefficients[1]))
    if not fits:
        return "-"
    res, shape, c2 = min(fits)
    label = "ln t" if shape == "log" else "sqrt t"
    return f"{c2:.3g}*{label}"


def cmd_report(args) -> int:
    paths = sorted(glob.glob(os.path.join(args.results_dir, "*.json")))
    docs = []
    for p in paths:
        try:
            with open(p) as fp:
                d = json.load(fp)
        except (OSError, json.JSONDecodeError):
            continue
        if isinstance(d, dict) and "checkpoints" in d and "config" in d:
            docs.append((os.path.splitext(os.path.basename(p))[0], d))
    if not docs:
        raise CliError(f"no run results in {args.results_dir}")
    out = args.out or os.path.join(args.results_dir, "report")
    os.makedirs(out, exist_ok=True)
    loss_name = lambda d: d["config"]["loss"] if isinstance(d["config"]["loss"], str) else d["config"]["loss"].get("kind", "grid")
    docs.sort(key=lambda sd: (sd[1]["setting"], str(loss_name(sd[1])), sd[0]))
    lines = [
        "| setting | loss | T | seed | replicate | final max gap | K_T | gap shape | K_T shape |",
        "|---|---|---|---|---|---|---|---|---|",
    ]
    for stem, d in docs:
        rows = d["checkpoints"]
        f = rows[-1]
        lines.append(f"| {d['setting']} | {loss_name(d)} | {f['t']} | {d['seed']} | {d['replicate']} | "
                     f"{_fmt(max(f['gap']))} | {_fmt(f['K'])} | {_shape(rows, 'gap')} | {_shape(rows, 'K')} |")
        ts = [r["t"] for r in rows]
        gaps = {f"forecaster {n + 1}": (ts, [r["gap"][n] for r in rows]) for n in range(len(f["gap"]))}
        with open(os.path.join(out, f"{stem}_gap.svg"), "w") as fp:
            fp.write(line_chart(gaps, f"calibeating gap: {d['setting']}", "t", "L_t - R_t(forecaster)"))
        kser = {"K_t": (ts, [r["K"] for r in rows])}
        if f.get("Ktilde") is not None:
            kser["pseudo K_t"] = (ts, [r["Ktilde"] for r in rows])
        with open(os.path.join(out, f"{stem}_K.svg"), "w") as fp:
            fp.write(line_chart(kser, f"calibration error: {d['setting']}", "t", "K_t"))
    with open(os.path.join(out, "report.md"), "w") as fp:
        fp.write("# Measured rates\n\n" + "\n".join(lines) + "\n")
    print("\n".join(lines))
    print(f"wrote report.md and {2 * len(docs)} charts to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="calibeat", description="Calibeating experiments and checks.")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, helptext in (("run", "execute the runs described by a config"),
                           ("sweep", "same as run; sweep axes come from the config's sweep block")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", required=True, metavar="PATH")
        p.add_argument("--out", metavar="DIR")
        p.add_argument("--seed", type=int, metavar="U64")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config field")
        p.add_argument("--threads", type=int, metavar="N")
        p.set_defaults(func=cmd_run)
    p = sub.add_parser("verify", help="run an invariant/acceptance suite")
    p.add_argument("suite", nargs="?", default="core", choices=["core", "rates", "simulcal", "all"])
    p.add_argument("--out", metavar="DIR", help="also write verify_<suite>.json here")
    p.set_defaults(func=cmd_verify)
    p = sub.add_parser("report", help="summarize a results directory")
    p.add_argument("results_dir")
    p.add_argument("--out", metavar="DIR")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "seed", None) is not None and not 0 <= args.seed < 2**64:
        print("error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
