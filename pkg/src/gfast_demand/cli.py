"""Command line experiment runner.

``gfast-demand <subcommand> --scenario <path> [--out <dir>] [--seed <n>] [--workers <n>]``

Subcommands ``srop``, ``minrate``, ``heuristic``, ``region`` and ``roundrobin``
run experiments and write CSV tables plus ``manifest.json``; ``validate``
checks a scenario; ``export`` turns a run directory into plot-ready CSV;
``audit`` recomputes every stored rate from the stored powers and channels.

Exit status: 0 ok, 1 invalid input, 2 solver or audit failure.  Failures
print one JSON object on stderr.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import platform
import sys
import time
import warnings
from collections import defaultdict
from importlib import metadata
from pathlib import Path

import numpy as np
import scipy

from .channel import ChannelFormatError, load_channel, save_channel
from .demand import (InfeasibleDemandError, PriorityPartition, line_lengths_of,
                     solve_alternating, solve_heuristic)
from .precoding import PrecoderKind, build_structure, make_order
from .region import (AVERAGING_NOTE, RegionSweepSpec, average_region, pareto_front,
                     round_robin_study, sweep_region)
from .scenario import Scenario, ScenarioError, load_scenario, validate
from .spectrum import PowerConstraints, audit_allocation, solve_srop

log = logging.getLogger(__name__)

EXIT_OK, EXIT_INVALID, EXIT_SOLVER = 0, 1, 2
FIGURES = ("region", "gains_vs_rate", "gains_vs_length", "per_tone")

PER_USER = ["seed", "kind", "solver", "line", "length_m", "encode_pos", "prioritized",
            "r_min_bps", "srop_bps", "rate_bps", "normalized"]
PER_TONE = ["seed", "kind", "solver", "tone", "freq_hz", "line", "prioritized", "disabled",
            "power_w", "bits"]
LAMBDA = ["seed", "kind", "stage", "t", "line", "lambda", "alpha", "rate_bps", "lambda_next",
          "restored"]
REGION = ["seed", "kind", "ratio", "group1_pct", "group2_pct", "group1_bps", "group2_bps",
          "pareto", "converged", "error"]
GAINS = ["seed", "kind", "mode", "solver", "line", "length_m", "prioritized_set", "srop_bps",
         "achieved_bps", "gain_pct"]


class CliError(Exception):
    def __init__(self, code, kind, errors):
        self.code, self.kind, self.errors = code, kind, errors
        super().__init__(str(errors))


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, PrecoderKind):
        return v.value
    return str(v)


class _Tables:
    """CSV writers keyed by file name; rows are formatted deterministically."""

    def __init__(self, out: Path):
        self.out = out
        self.files = {}

    def write(self, name, header, rows):
        path = self.out / name
        new = name not in self.files
        with open(path, "w" if new else "a", newline="") as fh:
            w = csv.writer(fh)
            if new:
                w.writerow(header)
                self.files[name] = path
            for row in rows:
                w.writerow([_fmt(v) for v in row])


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _version(name):
    try:
        return metadata.version(name)
    except metadata.PackageNotFoundError:
        return "unknown"


def _write_manifest(out, sc, command, artifacts, diagnostics, started, status):
    manifest = {
        "command": command,
        "status": status,
        "scenario": sc.name,
        "scenario_sha256": sc.digest(),
        "seeds": sc.seeds,
        "versions": {"package": _version("artifact"), "python": platform.python_version(),
                     "numpy": np.__version__, "scipy": scipy.__version__},
        "started": started,
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "artifacts": {p.name: _sha256(p) for p in sorted(artifacts)},
        "diagnostics": diagnostics,
        "notes": {"region_averaging": AVERAGING_NOTE},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _tone_rows(seed, kind, solver, ch, sol, prio_mask):
    N, L = sol.power.shape
    f = ch.frequencies
    for n in range(N):
        for l in range(L):
            yield (seed, kind, solver, n, f[n], l, prio_mask[l], sol.disabled[n, l],
                   sol.power[n, l], sol.rates[n, l])


def _user_rows(seed, kind, solver, ch, order, prio_mask, r_min, srop_R, R):
    pos = np.empty(len(order), dtype=int)
    pos[order] = np.arange(len(order))
    lengths = line_lengths_of(ch)
    for l in range(len(order)):
        norm = R[l] / srop_R[l] if srop_R[l] > 0 else float("nan")
        yield (seed, kind, solver, l, lengths[l], pos[l], prio_mask[l], r_min[l], srop_R[l],
               R[l], norm)


def _channel(sc, seed, out, artifacts):
    ch = sc.channel(seed)
    path = out / f"channel_{seed}.bin"
    save_channel(ch, path)
    artifacts.add(path)
    return ch


def run_srop(sc: Scenario, out: Path, workers: int, tables: _Tables, artifacts, diag):
    cons = sc.constraints()
    L = sc.num_lines
    for seed in sc.seeds:
        ch = _channel(sc, seed, out, artifacts)
        order = make_order(line_lengths_of(ch))
        none = np.zeros(L, dtype=bool)
        for kind in sc.precoder_kinds:
            sol = solve_srop(ch, kind, cons, sc.gap, order, sc.wsr_settings())
            R = sol.user_rates(sc.symbol_rate_hz)
            if not sol.converged:
                diag.append({"seed": seed, "kind": kind.value, "warning": "sweep cap reached"})
            tables.write("per_user.csv", PER_USER,
                         _user_rows(seed, kind, "srop", ch, order, none, np.zeros(L), R, R))
            tables.write("per_tone.csv", PER_TONE, _tone_rows(seed, kind, "srop", ch, sol, none))


def run_demand(sc: Scenario, out: Path, workers: int, tables: _Tables, artifacts, diag,
               solver: str):
    cons = sc.constraints()
    L = sc.num_lines
    part = PriorityPartition(tuple(sc.prioritized), L, sc.r_min_vector())
    mask = part.mask
    for seed in sc.seeds:
        ch = _channel(sc, seed, out, artifacts)
        order = make_order(line_lengths_of(ch), part.prioritized)
        for kind in sc.precoder_kinds:
            srop = solve_srop(ch, kind, cons, sc.gap, order, sc.wsr_settings())
            try:
                if solver == "alternating":
                    rep = solve_alternating(ch, kind, cons, sc.gap, part, order,
                                            sc.demand_settings(), sc.wsr_settings(),
                                            sc.symbol_rate_hz, srop)
                else:
                    rep = solve_heuristic(ch, kind, cons, sc.gap, part, order,
                                          sc.wsr_settings(), sc.symbol_rate_hz, srop,
                                          sc.demand_settings().eps_r)
            except InfeasibleDemandError as exc:
                raise CliError(EXIT_INVALID, "validation",
                               [{"field": "r_min_bps", "message": f"seed {seed}, "
                                                                  f"{kind.value}: {exc}"}])
            for flag in rep.flags:
                diag.append({"seed": seed, "kind": kind.value, "solver": solver, "flag": flag})
            diag.append({"seed": seed, "kind": kind.value, "solver": solver,
                         "wsr_solves": rep.wsr_solves, "stages": rep.stages,
                         "converged": bool(rep.converged),
                         "violations": {str(k): v for k, v in rep.violations.items()}})
            tables.write("per_user.csv", PER_USER,
                         _user_rows(seed, kind, solver, ch, order, mask, part.r_min,
                                    rep.srop_rates, rep.user_rates))
            tables.write("per_tone.csv", PER_TONE,
                         _tone_rows(seed, kind, solver, ch, rep.solution, mask))
            if solver == "alternating":
                cons_idx = part.constrained
                tables.write("lambda.csv", LAMBDA, (
                    (seed, kind, s.stage, s.t, int(l), s.lam[i], s.alpha[i], s.rates[i],
                     s.lam_next[i], s.restored)
                    for s in rep.lambda_trajectory for i, l in enumerate(cons_idx)))


def run_region(sc: Scenario, out: Path, workers: int, tables: _Tables, artifacts, diag):
    cons = sc.constraints()
    spec = RegionSweepSpec(tuple(sc.prioritized), tuple(sc.ratios), tuple(sc.precoder_kinds))
    for seed in sc.seeds:
        ch = _channel(sc, seed, out, artifacts)
        pts = sweep_region(ch, spec, cons, sc.gap, sc.wsr_settings(), sc.symbol_rate_hz,
                           pareto=False, workers=workers)
        front = set()
        for kind in spec.kinds:
            front.update(id(p) for p in pareto_front([p for p in pts if p.kind == kind]))
        for p in pts:
            if p.error:
                diag.append({"seed": seed, "kind": p.kind.value, "ratio": p.ratio,
                             "error": p.error})
        tables.write("region_points.csv", REGION, (
            (seed, p.kind, p.ratio, p.group1_pct, p.group2_pct, p.group1_bps, p.group2_bps,
             id(p) in front, p.converged, p.error) for p in pts))


def run_roundrobin(sc: Scenario, out: Path, workers: int, tables: _Tables, artifacts, diag):
    cons = sc.constraints()
    for seed in sc.seeds:
        ch = _channel(sc, seed, out, artifacts)
        for kind in sc.precoder_kinds:
            try:
                recs = round_robin_study(ch, sc.group_size, cons, sc.gap, kind,
                                         sc.roundrobin_mode, sc.r_min_vector(), sc.solver,
                                         seed, sc.wsr_settings(), sc.demand_settings(),
                                         sc.symbol_rate_hz, workers)
            except InfeasibleDemandError as exc:
                raise CliError(EXIT_INVALID, "validation",
                               [{"field": "r_min_bps", "message": str(exc)}])
            tables.write("gains.csv", GAINS, (
                (r.seed, r.kind, r.mode, r.solver, r.line, r.length,
                 " ".join(map(str, r.prioritized)), r.srop_bps, r.achieved_bps, r.gain_pct)
                for r in recs))


RUNNERS = {
    "srop": run_srop,
    "minrate": lambda *a: run_demand(*a, solver="alternating"),
    "heuristic": lambda *a: run_demand(*a, solver="heuristic"),
    "region": run_region,
    "roundrobin": run_roundrobin,
}


def run(command: str, scenario_path, out=None, seed=None, workers=1) -> int:
    """Run one experiment subcommand; returns the exit status."""
    started = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    try:
        sc = load_scenario(scenario_path, seed)
    except ScenarioError as exc:
        return _fail(EXIT_INVALID, "validation",
                     [{"field": f, "message": m} for f, m in exc.errors])
    out = Path(out) if out else Path("runs") / f"{sc.name}_{command}"
    out.mkdir(parents=True, exist_ok=True)
    (out / "scenario.json").write_text(json.dumps(sc.raw, indent=2, sort_keys=True) + "\n")
    tables = _Tables(out)
    artifacts = {out / "scenario.json"}
    diag: list = []
    status, code = "ok", EXIT_OK
    try:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            RUNNERS[command](sc, out, workers, tables, artifacts, diag)
        for w in caught:
            diag.append({"warning": str(w.message)})
    except CliError as exc:
        status, code = exc.kind, exc.code
        _fail(exc.code, exc.kind, exc.errors)
    except (ScenarioError, ChannelFormatError) as exc:
        status, code = "validation", EXIT_INVALID
        _fail(code, status, [{"field": "scenario", "message": str(exc)}])
    except (ValueError, ArithmeticError, np.linalg.LinAlgError, RuntimeError) as exc:
        status, code = "solver", EXIT_SOLVER
        _fail(code, status, [{"message": f"{type(exc).__name__}: {exc}"}])
    artifacts.update(tables.files.values())
    _write_manifest(out, sc, command, artifacts, diag, started, status)
    if code == EXIT_OK:
        print(json.dumps({"status": "ok", "out": str(out),
                          "artifacts": sorted(p.name for p in artifacts)}))
    return code


def _fail(code, kind, errors) -> int:
    print(json.dumps({"status": "error", "kind": kind, "errors": errors}), file=sys.stderr)
    return code


def cmd_validate(scenario_path, seed=None) -> int:
    try:
        sc = load_scenario(scenario_path, seed)
    except ScenarioError as exc:
        return _fail(EXIT_INVALID, "validation",
                     [{"field": f, "message": m} for f, m in exc.errors])
    _, warns = validate(sc)
    print(json.dumps({"status": "ok", "scenario": sc.name, "lines": sc.num_lines,
                      "tones": sc.num_tones, "seeds": sc.seeds,
                      "warnings": [{"field": f, "message": m} for f, m in warns]}))
    return EXIT_OK


def _read_csv(path: Path):
    if not path.exists():
        raise CliError(EXIT_INVALID, "missing_artifact",
                       [{"field": path.name, "message": f"{path} not found"}])
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def export_plotdata(run_dir, figure: str, out=None) -> Path:
    """Write ``plot_<figure>.csv`` for one figure analog and return its path."""
    run_dir = Path(run_dir)
    if figure not in FIGURES:
        raise CliError(EXIT_INVALID, "validation",
                       [{"field": "figure", "message": f"must be one of {FIGURES}"}])
    dest = Path(out) if out else run_dir / f"plot_{figure}.csv"
    rows = []
    if figure == "region":
        recs = _read_csv(run_dir / "region_points.csv")
        header = ["ratio", "group1_pct", "group2_pct", "kind"]
        from .region import RegionPoint
        sweeps = defaultdict(list)
        for r in recs:
            if r["error"]:
                continue
            sweeps[r["seed"]].append(RegionPoint(
                float(r["ratio"]), PrecoderKind(r["kind"]), float(r["group1_pct"]),
                float(r["group2_pct"]), float(r["group1_bps"]), float(r["group2_bps"])))
        avg = average_region(list(sweeps.values()))
        for kind in dict.fromkeys(p.kind for p in avg):
            for p in pareto_front([q for q in avg if q.kind == kind]):
                rows.append((p.ratio, p.group1_pct, p.group2_pct, p.kind))
    elif figure in ("gains_vs_rate", "gains_vs_length"):
        recs = _read_csv(run_dir / "gains.csv")
        if figure == "gains_vs_rate":
            header = ["srop_rate_bps", "achieved_rate_bps", "gain_pct", "kind", "line", "seed"]
            rows = [(float(r["srop_bps"]), float(r["achieved_bps"]), float(r["gain_pct"]),
                     r["kind"], int(r["line"]), int(r["seed"])) for r in recs]
        else:
            header = ["length_m", "gain_pct", "kind", "line", "seed"]
            rows = [(float(r["length_m"]), float(r["gain_pct"]), r["kind"], int(r["line"]),
                     int(r["seed"])) for r in recs]
    else:
        recs = _read_csv(run_dir / "per_tone.csv")
        header = ["kind", "solver", "tone", "freq_hz", "mean_bits_prioritized",
                  "mean_bits_others", "mean_disabled_lines"]
        acc = defaultdict(lambda: [0.0, 0, 0.0, 0, 0, set(), None])
        for r in recs:
            a = acc[(r["kind"], r["solver"], int(r["tone"]))]
            b = float(r["bits"])
            if r["prioritized"] == "1":
                a[0] += b
                a[1] += 1
            else:
                a[2] += b
                a[3] += 1
            a[4] += r["disabled"] == "1"
            a[5].add(r["seed"])
            a[6] = float(r["freq_hz"])
        for (kind, solver, tone), a in sorted(acc.items()):
            seeds = len(a[5])
            rows.append((kind, solver, tone, a[6], a[0] / a[1] if a[1] else float("nan"),
                         a[2] / a[3] if a[3] else float("nan"), a[4] / seeds))
    with open(dest, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    return dest


def audit_run(run_dir, tol=1e-6) -> dict:
    """Recompute stored per-tone rates and constraint margins of a run."""
    run_dir = Path(run_dir)
    sc_raw = json.loads((run_dir / "scenario.json").read_text())
    sc = Scenario(**{k: v for k, v in sc_raw.items() if k in Scenario.__dataclass_fields__
                     and k not in ("base_dir", "raw")}, base_dir=run_dir, raw=sc_raw)
    tones = _read_csv(run_dir / "per_tone.csv")
    users = _read_csv(run_dir / "per_user.csv")
    N, L = sc.num_tones, sc.num_lines
    cons: PowerConstraints = sc.constraints()
    groups = defaultdict(list)
    for r in tones:
        groups[(int(r["seed"]), r["kind"], r["solver"])].append(r)
    pos = defaultdict(dict)
    for r in users:
        pos[(int(r["seed"]), r["kind"], r["solver"])][int(r["line"])] = int(r["encode_pos"])
    results = []
    for key, rows in sorted(groups.items()):
        seed, kind, solver = key
        ch = load_channel(run_dir / f"channel_{seed}.bin")
        power = np.zeros((N, L))
        bits = np.zeros((N, L))
        dis = np.zeros((N, L), dtype=bool)
        for r in rows:
            n, l = int(r["tone"]), int(r["line"])
            power[n, l] = float(r["power_w"])
            bits[n, l] = float(r["bits"])
            dis[n, l] = r["disabled"] == "1"
        p = pos[key]
        order = np.argsort([p[l] for l in range(L)], kind="stable")
        st = build_structure(ch, kind, ~dis, order)
        rep = audit_allocation(ch, st, power, cons, sc.gap, bits)
        results.append({"seed": seed, "kind": kind, "solver": solver,
                        "mask_violation": rep.mask_violation, "sum_violation": rep.sum_violation,
                        "max_bits": rep.max_rate, "rate_mismatch": rep.rate_mismatch,
                        "ok": bool(rep.ok(cons.b_max, tol))})
    return {"ok": all(r["ok"] for r in results), "checks": results}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gfast-demand", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    for name in RUNNERS:
        p = sub.add_parser(name, help=f"run the {name} experiment")
        p.add_argument("--scenario", required=True, type=Path)
        p.add_argument("--out", type=Path)
        p.add_argument("--seed", type=int, help="first realization seed (overrides scenario)")
        p.add_argument("--workers", type=int, default=1, help="parallel sweep/subset jobs")
    p = sub.add_parser("validate", help="check a scenario file")
    p.add_argument("--scenario", required=True, type=Path)
    p.add_argument("--seed", type=int)
    p = sub.add_parser("export", help="write plot-ready CSV from a run directory")
    p.add_argument("--run", required=True, type=Path)
    p.add_argument("--figure", required=True, choices=FIGURES)
    p.add_argument("--out", type=Path)
    p = sub.add_parser("audit", help="recompute rates and constraints of a run")
    p.add_argument("--run", required=True, type=Path)
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    if args.command == "validate":
        return cmd_validate(args.scenario, args.seed)
    if args.command in ("export", "audit"):
        try:
            if args.command == "export":
                print(export_plotdata(args.run, args.figure, args.out))
                return EXIT_OK
            report = audit_run(args.run)
        except CliError as exc:
            return _fail(exc.code, exc.kind, exc.errors)
        except (ChannelFormatError, FileNotFoundError) as exc:
            return _fail(EXIT_INVALID, "missing_artifact", [{"message": str(exc)}])
        print(json.dumps(report, indent=2))
        return EXIT_OK if report["ok"] else EXIT_SOLVER
    if args.workers < 1:
        return _fail(EXIT_INVALID, "validation",
                     [{"field": "--workers", "message": "must be >= 1"}])
    return run(args.command, args.scenario, args.out, args.seed, args.workers)


if __name__ == "__main__":
    sys.exit(main())
