"""Command line: ``rci-build``, ``simulate``, ``report`` and ``sweep``.

Exit codes: 0 ok, 1 bound violation (or failed certificate), 2 config
error, 3 cache error. Relative output folders are resolved under
``$BIAXCONTOUR_OUTPUT`` when it is set.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import controller as ctl
from .cache import CacheError, load_bundle, save_bundle
from .config import ConfigError, RunConfig, load_config
from .invariance import RCIConvergenceError, RCIEmptyError
from .pathkit import metrics, plan_reference
from .polytope import contains_point
from .simloop import Scenario, StartError, TraceFormatError, read_trace, run_closed_loop
from .synthesis import SetBundle, build_all, certificates_pass

log = logging.getLogger("biaxcontour")

OK, VIOLATION, CONFIG_ERROR, CACHE_ERROR = 0, 1, 2, 3
OUTPUT_ENV = "BIAXCONTOUR_OUTPUT"


def output_root(cfg: RunConfig) -> Path:
    out = cfg.output
    env = os.environ.get(OUTPUT_ENV)
    if env and not out.is_absolute():
        out = Path(env) / out
    return out


def cache_root(cfg: RunConfig) -> Path:
    return output_root(cfg) / "cache"


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


SUMMARY_COLUMNS = ("run", "config_hash", "ticks", "max_eps", "rms_eps", "max_abs_ex", "max_abs_ey",
                   "max_abs_theta", "triangle_violations", "violations", "fallbacks")


def _write_summary_csv(path: Path, rows: list[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write("# schema=biaxcontour-summary/1\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        for r in rows:
            w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in SUMMARY_COLUMNS])


# --- library entry points --------------------------------------------------


def _certified_enough(bundle: SetBundle, samples: int) -> bool:
    certs = bundle.report.get("certificates", {})
    if not samples:
        return True
    return len(certs) == 1 + len(bundle.y) and all(c["samples"] >= samples for c in certs.values())


def build_sets(cfg: RunConfig, force: bool = False) -> tuple[SetBundle, bool]:
    """Load the cached bundle for ``cfg`` or build and store it. Returns ``(bundle, cache_hit)``."""
    key = cfg.synthesis_hash
    if not force:
        try:
            bundle = load_bundle(cache_root(cfg), key)
        except CacheError:
            bundle = None
        if bundle is not None and _certified_enough(bundle, cfg.samples):
            return bundle, True
    bundle = build_all(cfg.setup, cfg.samples, cfg.seed, cfg.workers)
    save_bundle(bundle, cache_root(cfg), key)
    return bundle, False


def check_reference(cfg: RunConfig, bundle: SetBundle, ref) -> None:
    """Every reference state must lie in its certified reference set."""
    for axis, C in (("x", bundle.ref_ci_x), ("y", bundle.ref_ci_y)):
        for k in range(len(ref)):
            if not contains_point(C, ref.state(axis, k), 1e-9):
                raise ConfigError(
                    f"reference {axis} state {ref.state(axis, k).tolist()} at tick {k} is outside the "
                    "certified reference set; lower v_max/a_max or widen synthesis.ref_*")


def simulate(cfg: RunConfig, bundle: SetBundle):
    """Run the configured scenario. Returns ``(trace, metrics)``."""
    ref = plan_reference(cfg.path, cfg.v_max, cfg.a_max, cfg.setup.Ts, cfg.dwell)
    check_reference(cfg, bundle, ref)
    c = ctl.make_controller(bundle.x, bundle.y, cfg.setup.bank, cfg.params.D, cfg.mpc)
    sc = Scenario(cfg.path, ref, cfg.params, cfg.setup.Ts, cfg.mode, cfg.rig, cfg.seed, cfg.quantum)
    trace = run_closed_loop(sc, c, cfg.config_hash)
    return trace, metrics(trace, cfg.path, cfg.budget)


def run_summary(cfg: RunConfig, trace, m) -> dict:
    st = np.asarray(trace.solve_times)
    return {
        "config_hash": cfg.config_hash,
        "synthesis_hash": cfg.synthesis_hash,
        "tuning": cfg.raw["mpc"]["tuning"],
        "mode": cfg.mode,
        "seed": cfg.seed,
        "metrics": m.to_record(),
        "violated": m.violated,
        "incidents": len(trace.incidents),
        "solve_time_mean_s": float(st.mean()) if st.size else 0.0,
        "solve_time_max_s": float(st.max()) if st.size else 0.0,
        "ticks_over_budget": int(np.sum(st > cfg.setup.Ts)),
    }


def write_run(cfg: RunConfig, trace, m, outdir: Path | None = None) -> dict:
    from .plotting import write_plot_data

    outdir = outdir or output_root(cfg) / "runs"
    outdir.mkdir(parents=True, exist_ok=True)
    stem = f"run-{cfg.config_hash}"
    sha = trace.write_csv(outdir / f"{stem}.csv")
    write_plot_data(trace, cfg.path, cfg.params.D, outdir, stem)
    summary = run_summary(cfg, trace, m)
    summary["trace_sha256"] = sha
    summary["trace"] = str(outdir / f"{stem}.csv")
    _write_json(outdir / f"{stem}-metrics.json", summary)
    return summary


# --- commands --------------------------------------------------------------


def cmd_rci_build(cfg: RunConfig, args) -> int:
    bundle, hit = build_sets(cfg, args.force)
    report = dict(bundle.report)
    report["cache_hit"] = hit
    report["synthesis_hash"] = cfg.synthesis_hash
    report["config_hash"] = cfg.config_hash
    _write_json(output_root(cfg) / f"build-{cfg.synthesis_hash}.json", report)
    print(f"{'cache hit' if hit else 'built'}: 1 X set, {len(bundle.y)} Y sets (key {cfg.synthesis_hash})")
    for name, cert in sorted(bundle.report.get("certificates", {}).items()):
        print(f"  {name}: {cert['samples'] - cert['failures']}/{cert['samples']} samples pass, "
              f"worst margin {cert['worst_margin']:.3e}")
    return OK if certificates_pass(bundle) or cfg.samples == 0 else VIOLATION


def cmd_simulate(cfg: RunConfig, args) -> int:
    bundle = load_bundle(cache_root(cfg), cfg.synthesis_hash)
    trace, m = simulate(cfg, bundle)
    s = write_run(cfg, trace, m)
    r = s["metrics"]
    print(f"max eps {r['max_eps'] * 1e3:.4f} mm, |e_x| {r['max_abs_ex'] * 1e3:.4f} mm, "
          f"|e_y| {r['max_abs_ey'] * 1e3:.4f} mm, |theta| {r['max_abs_theta']:.3e} rad, "
          f"incidents {s['incidents']}")
    print(f"trace: {s['trace']}")
    return VIOLATION if m.violated else OK


def _sweep_job(args):
    path, overrides = args
    cfg = load_config(path, overrides)
    bundle = load_bundle(cache_root(cfg), cfg.synthesis_hash)
    trace, m = simulate(cfg, bundle)
    return write_run(cfg, trace, m)


def cmd_sweep(cfg: RunConfig, args) -> int:
    tunings = args.tunings.split(",") if args.tunings else [cfg.raw["mpc"]["tuning"]]
    seeds = range(cfg.seed, cfg.seed + args.seeds)
    base = list(args.set or [])
    jobs = [(args.config, base + [f"mpc.tuning={t}", f"seed={s}"]) for t in tunings for s in seeds]
    load_bundle(cache_root(cfg), cfg.synthesis_hash)
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_sweep_job, jobs))
    else:
        results = [_sweep_job(j) for j in jobs]
    _write_json(output_root(cfg) / "sweep.json", results)
    bad = 0
    for s in results:
        r = s["metrics"]
        bad += s["violated"]
        print(f"tuning {s['tuning']} seed {s['seed']}: max eps {r['max_eps'] * 1e3:.4f} mm, "
              f"incidents {s['incidents']}, {'VIOLATION' if s['violated'] else 'ok'}")
    return VIOLATION if bad else OK


def cmd_report(args) -> int:
    from .plotting import render_runs

    traces = {}
    for f in args.traces:
        traces[Path(f).stem] = read_trace(f)
    hashes = {t.config_hash for t in traces.values()}
    if len(hashes) > 1 and not args.force:
        raise ConfigError("traces come from different configurations "
                          f"({', '.join(sorted(hashes))}); pass --force to compare anyway")
    cfg = load_config(args.config, args.set or [])
    rows = []
    for name, tr in traces.items():
        m = metrics(tr, cfg.path, cfg.budget)
        rows.append({"run": name, "config_hash": tr.config_hash, "ticks": len(tr), **m.to_record(),
                     "violations": int(m.violated),
                     "fallbacks": int(np.count_nonzero(tr.column("fallback")))})
    outdir = Path(args.out) if args.out else output_root(cfg) / "report"
    _write_json(outdir / "summary.json", rows)
    _write_summary_csv(outdir / "summary.csv", rows)
    cols = ("max_eps", "max_abs_ex", "max_abs_ey")
    print(f"{'metric':<14}" + "".join(f"{r['run']:>24}" for r in rows))
    for c in cols:
        print(f"{c + ' [mm]':<14}" + "".join(f"{r[c] * 1e3:>24.4f}" for r in rows))
    print(f"{'max |theta|':<14}" + "".join(f"{r['max_abs_theta']:>24.3e}" for r in rows))
    print(f"{'violations':<14}" + "".join(f"{r['violations']:>24d}" for r in rows))
    print(f"{'fallbacks':<14}" + "".join(f"{r['fallbacks']:>24d}" for r in rows))
    if not args.no_figures:
        for f in render_runs(traces, cfg.path, cfg.budget, outdir):
            print(f"figure: {f}")
    return VIOLATION if any(r["violations"] for r in rows) else OK


# --- argument parsing ------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", "-c", help="YAML config file (defaults built in)")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config value")
    p.add_argument("--print-effective-config", action="store_true", help="print the merged config and exit")


def make_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="biaxcontour", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)
    p = sub.add_parser("rci-build", help="compute and certify the RCI sets")
    _common(p)
    p.add_argument("--force", action="store_true", help="rebuild even on a cache hit")
    p = sub.add_parser("simulate", help="run the configured scenario")
    _common(p)
    p = sub.add_parser("sweep", help="run the scenario over tunings and seeds")
    _common(p)
    p.add_argument("--seeds", type=int, default=10, help="number of consecutive seeds")
    p.add_argument("--tunings", help="comma-separated tuning names (default: the configured one)")
    p.add_argument("--jobs", type=int, default=1, help="parallel processes")
    p = sub.add_parser("report", help="compare trace files")
    _common(p)
    p.add_argument("traces", nargs="+")
    p.add_argument("--force", action="store_true", help="compare traces from different configs")
    p.add_argument("--out", help="output folder for the summary and figures")
    p.add_argument("--no-figures", action="store_true", help="skip rendering")
    return ap


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.print_effective_config:
            print(load_config(args.config, args.set or []).effective_yaml(), end="")
            return OK
        if args.command == "report":
            return cmd_report(args)
        cfg = load_config(args.config, args.set or [])
        if args.command == "rci-build":
            return cmd_rci_build(cfg, args)
        if args.command == "simulate":
            return cmd_simulate(cfg, args)
        return cmd_sweep(cfg, args)
    except (ConfigError, StartError, RCIEmptyError, RCIConvergenceError) as err:
        print(f"error: {err}", file=sys.stderr)
        return CONFIG_ERROR
    except (CacheError, TraceFormatError) as err:
        print(f"error: {err}", file=sys.stderr)
        return CACHE_ERROR


__all__ = ["OUTPUT_ENV", "build_sets", "main", "make_parser", "simulate", "write_run"]
