"""Command line interface: ``stqcl <command> ...`` or ``python -m stqcl``.

Exit codes: 0 success, 1 I/O or dataset error, 2 invalid configuration,
3 tolerance failure.  Relative ``--out`` paths and default output locations
resolve under ``$STQCL_OUT_ROOT`` when it is set.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .data import DataError, SplitSpec, generate_synthetic, load_csv, write_csv
from .efficiency import sweep
from .gradcheck import run_gradcheck
from .numerics import ContractError
from .serialize import (
    METRIC_COLUMNS,
    ConfigError,
    RunConfig,
    config_from_dict,
    config_to_dict,
    dataset_fingerprint,
    load_config,
    manifest,
    read_json,
    read_metrics,
    save_fusion,
    save_model,
    validate_config,
    write_csv_rows,
    write_json,
    write_losses,
    write_metrics,
    write_pace_trace,
    write_sim_reports,
)
from .trainer import SCHEDULERS, prepare, train_spl, train_stqcl, train_vanilla

log = logging.getLogger("stqcl")

EXIT_OK, EXIT_IO, EXIT_CONFIG, EXIT_TOLERANCE = 0, 1, 2, 3
OUT_ROOT_ENV = "STQCL_OUT_ROOT"


class UsageError(Exception):
    """Bad command usage that is neither I/O nor configuration."""


def out_path(arg: str | None, default: str) -> Path:
    root = os.environ.get(OUT_ROOT_ENV)
    path = Path(arg if arg is not None else default)
    if root and not path.is_absolute():
        path = Path(root) / path
    return path


def _config(args) -> RunConfig:
    return load_config(args.config) if getattr(args, "config", None) else config_from_dict({})


# ---------------------------------------------------------------- gen-data


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    ds = generate_synthetic(cfg.data)
    path = out_path(args.out, "data.csv")
    path.parent.mkdir(parents=True, exist_ok=True)
    write_csv(ds, path)
    write_json(path.with_suffix(".manifest.json"),
               manifest(cfg, "gen-data", [cfg.data.seed], dataset_fingerprint(ds)))
    print(f"wrote {path} ({ds.n_steps} rows, {ds.n_nodes} nodes)")
    return EXIT_OK


# ---------------------------------------------------------------- train


def _train_one(cfg: RunConfig, ds, fingerprint: str, scheduler: str, seed: int, run_dir: Path) -> None:
    tcfg = replace(cfg.train, seed=seed, scheduler=scheduler)
    resolved = RunConfig(cfg.data, tcfg, cfg.sim)
    validate_config(resolved)
    prep = prepare(ds, tcfg.model.t_in, tcfg.model.t_out, SplitSpec(*tcfg.split))
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "checkpoints").mkdir(exist_ok=True)
    if scheduler == "none":
        params, report = train_vanilla(tcfg, prep)
        save_model(run_dir / "checkpoints" / "model.json", params)
        histories = {"main": (report.train_loss, report.val_loss)}
    elif scheduler == "all":
        ens, report = train_stqcl(tcfg, prep)
        for kind, params in ens.experts.items():
            save_model(run_dir / "checkpoints" / f"{kind}.json", params)
        save_fusion(run_dir / "checkpoints" / "fusion.json", ens.fusion)
        histories = {k: (r.train_loss, r.val_loss) for k, r in report.experts.items()}
    else:
        params, report = train_spl(tcfg, prep, scheduler)
        save_model(run_dir / "checkpoints" / "model.json", params)
        histories = {"main": (report.train_loss, report.val_loss)}

    write_json(run_dir / "config.json", config_to_dict(resolved))
    write_json(run_dir / "manifest.json", manifest(resolved, "train", [seed], fingerprint, {"scheduler": scheduler}))
    write_losses(run_dir / "losses.csv", histories)
    write_pace_trace(run_dir / "pace_trace.csv", report.pace_trace)
    write_metrics(run_dir, report.metrics)
    write_json(run_dir / "timing.json", {"wall_time_seconds": report.wall_time})


def cmd_train(args) -> int:
    cfg = _config(args)
    if args.data:
        ds = load_csv(args.data, min_rows=cfg.train.model.t_in + cfg.train.model.t_out)
    else:
        ds = generate_synthetic(cfg.data)
    fingerprint = dataset_fingerprint(ds)
    seeds = args.seed if args.seed else [cfg.train.seed]
    out = out_path(args.out, "runs")
    for seed in seeds:
        run_dir = out / f"{args.scheduler}-seed{seed}"
        _train_one(cfg, ds, fingerprint, args.scheduler, seed, run_dir)
        print(f"wrote {run_dir}")
    return EXIT_OK


# ---------------------------------------------------------------- compare


def _load_run(path: Path) -> tuple[str, int, dict]:
    if not (path / "metrics.json").exists():
        raise FileNotFoundError(f"run directory has no metrics.json: {path}")
    man = read_json(path / "manifest.json") if (path / "manifest.json").exists() else {}
    variant = man.get("scheduler", path.name)
    seed = (man.get("seeds") or [0])[0]
    return variant, seed, read_metrics(path / "metrics.json")


def compare_runs(run_dirs) -> tuple[list[str], list[list]]:
    """Rows (variant, horizon) with per-metric mean, std and winner flags."""
    if len(run_dirs) < 2:
        raise UsageError("compare needs at least 2 run directories")
    groups: dict[str, list[dict]] = {}
    horizons = None
    for d in run_dirs:
        variant, _, metrics = _load_run(Path(d))
        if horizons is None:
            horizons = sorted(metrics)
        elif sorted(metrics) != horizons:
            raise DataError(f"incompatible horizons in {d}: {sorted(metrics)} vs {horizons}")
        groups.setdefault(variant, []).append(metrics)
    metrics_cols = [c for c in METRIC_COLUMNS if all(c in m[horizons[0]] for g in groups.values() for m in g)]
    means = {
        (v, h): {c: float(np.mean([m[h][c] for m in runs])) for c in metrics_cols}
        for v, runs in groups.items() for h in horizons
    }
    stds = {
        (v, h): {c: float(np.std([m[h][c] for m in runs])) for c in metrics_cols}
        for v, runs in groups.items() for h in horizons
    }
    header = ["variant", "horizon", "n_runs"]
    for c in metrics_cols:
        header += [c, f"{c}_std", f"{c}_best"]
    rows = []
    for h in horizons:
        best = {c: min(means[(v, h)][c] for v in groups) for c in metrics_cols}
        for v, runs in groups.items():
            row = [v, h, len(runs)]
            for c in metrics_cols:
                row += [means[(v, h)][c], stds[(v, h)][c], means[(v, h)][c] == best[c]]
            rows.append(row)
    return header, rows


def cmd_compare(args) -> int:
    header, rows = compare_runs(args.runs)
    out = out_path(args.out, "compare")
    out.mkdir(parents=True, exist_ok=True)
    write_csv_rows(out / "compare.csv", header, rows)
    write_json(out / "compare.json", [dict(zip(header, r)) for r in rows])
    width = max(len(r[0]) for r in rows)
    for r in rows:
        cells = [f"{header[i]}={r[i]:.4f}{'*' if r[i + 2] else ''}" for i in range(3, len(r), 3)]
        print(f"{r[0]:<{width}}  h={r[1]:<3} " + " ".join(cells))
    print(f"wrote {out / 'compare.csv'}")
    return EXIT_OK


# ---------------------------------------------------------------- sim-eff


def cmd_sim_eff(args) -> int:
    cfg = _config(args)
    sim = cfg.sim
    fractions = args.fractions if args.fractions is not None else sim.fractions
    placements = args.placements if args.placements is not None else sim.placements
    probe = RunConfig(cfg.data, cfg.train, type(sim)(sim.n_nodes, sim.batch_groups, sim.iterations, sim.seed,
                                                         tuple(fractions), tuple(placements)))
    validate_config(probe)
    reports = sweep(sim.base(), fractions, placements)
    path = out_path(args.out, "sim_eff.csv")
    path.parent.mkdir(parents=True, exist_ok=True)
    write_sim_reports(path, reports)
    for r in reports:
        print(f"{r.scheduler:<9} {r.placement:<12} f={r.hard_fraction:<5} "
              f"utilization={r.utilization_mean:.4f} wasted={r.wasted_fraction:.4f}")
    print(f"wrote {path}")
    return EXIT_OK


# ---------------------------------------------------------------- gradcheck


def cmd_gradcheck(args) -> int:
    pinned = read_json(args.spec) if args.spec else None
    if pinned is not None and not isinstance(pinned, dict):
        raise ConfigError("spec: expected a JSON object of model fields")
    cases = run_gradcheck(args.n, args.seed, pinned)
    worst = max(c.worst for c in cases)
    failed = [c for c in cases if not c.ok]
    for c in failed:
        print(f"case {c.index}: relative error {c.worst:.3e} ({c.spec})")
    print(f"{len(cases)} configurations, max relative error {worst:.3e}, "
          f"max absolute difference {max(c.max_abs for c in cases):.3e}")
    return EXIT_TOLERANCE if failed else EXIT_OK


# ---------------------------------------------------------------- entry


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stqcl", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"stqcl {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic dataset CSV")
    g.add_argument("--config")
    g.add_argument("--out", help="CSV path (default data.csv)")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one scheduler variant per seed")
    t.add_argument("--config")
    t.add_argument("--data", help="dataset CSV; the synthetic generator is used when omitted")
    t.add_argument("--scheduler", choices=SCHEDULERS, default="none")
    t.add_argument("--seed", type=int, nargs="+")
    t.add_argument("--out", help="parent directory for run directories (default runs)")
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("compare", help="tabulate metrics of two or more runs")
    c.add_argument("--runs", nargs="+", required=True)
    c.add_argument("--out", help="output directory (default compare)")
    c.set_defaults(func=cmd_compare)

    s = sub.add_parser("sim-eff", help="batch utilization simulation")
    s.add_argument("--config")
    s.add_argument("--fractions", type=float, nargs="+")
    s.add_argument("--placements", nargs="+")
    s.add_argument("--out", help="CSV path (default sim_eff.csv)")
    s.set_defaults(func=cmd_sim_eff)

    k = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    k.add_argument("--spec", help="JSON object pinning model fields")
    k.add_argument("--seed", type=int, default=0)
    k.add_argument("-n", type=int, default=20, help="number of random configurations")
    k.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, DataError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_IO
    except ContractError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
