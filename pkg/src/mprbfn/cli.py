"""Command-line entry point: ``mprbfn {gen-dataset,train,bench,plan}``.

A JSON config file (``--config``) supplies defaults for every section; command
flags override it. Recognised top-level keys::

    vehicle  profile name or a VehicleParams mapping
    grid     GridSpec fields (strides as a list)
    ocp      OcpConfig fields
    train    TrainConfig fields plus kind, size, kernel, train_fraction
    bench    repetitions, batch_sizes, ocp_timing_samples
    plan     scenario (path, relative to the config file), steps, dt
    out      output directory
    seed     integer seed
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import bench, dataset, models, net, ocp, planner
from .vehicle import VehicleParams, get_profile

DEFAULTS = {
    "vehicle": "bmw_320i",
    "grid": {**dataset.DESK_GRID, "strides": list(dataset.DESK_STRIDES)},
    "ocp": {},
    "train": {"kind": "mp_rbfn", "size": 256, "kernel": "gaussian", "epochs": 300, "train_fraction": 0.7},
    "bench": {"repetitions": 30, "batch_sizes": list(bench.TIMING_BATCHES), "ocp_timing_samples": 10},
    "plan": {"scenario": None, "steps": 60, "dt": 0.1},
    "out": "runs/desk",
    "seed": 0,
}


class CliError(Exception):
    pass


def load_config(path: str | None) -> dict:
    cfg = json.loads(json.dumps(DEFAULTS))
    if path is None:
        cfg["_base"] = str(Path.cwd())
        return cfg
    p = Path(path)
    try:
        user = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise CliError(f"{path}: line {e.lineno}: {e.msg}") from None
    except OSError as e:
        raise CliError(f"cannot read config {path}: {e}") from None
    for k, v in user.items():
        if isinstance(v, dict) and isinstance(cfg.get(k), dict):
            cfg[k].update(v)
        else:
            cfg[k] = v
    cfg["_base"] = str(p.resolve().parent)
    return cfg


def vehicle_from(cfg) -> VehicleParams:
    v = cfg["vehicle"]
    return get_profile(v) if isinstance(v, str) else VehicleParams.from_dict(v)


def grid_from(cfg) -> dataset.GridSpec:
    return dataset.GridSpec.from_dict(cfg["grid"])


def ocp_from(cfg) -> ocp.OcpConfig:
    return ocp.OcpConfig.from_dict(cfg["ocp"])


def train_config_from(cfg, seed: int) -> net.TrainConfig:
    fields = {k: v for k, v in cfg["train"].items() if k in net.TrainConfig.__dataclass_fields__}
    fields["seed"] = seed
    return net.TrainConfig(**fields)


def _resolve(cfg, path) -> Path:
    p = Path(path)
    return p if p.is_absolute() else Path(cfg["_base"]) / p


# ---------------------------------------------------------------------------
# commands


def cmd_gen_dataset(cfg, args) -> int:
    params, grid, oc = vehicle_from(cfg), grid_from(cfg), ocp_from(cfg)
    if args.dry_run:
        print(f"grid cardinality: {dataset.count_queries(grid, params)}")
        return 0
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / (args.name or "dataset.mpds")
    t0 = time.perf_counter()

    def progress(i, n):
        if args.verbose and (i % 1000 == 0 or i == n):
            print(f"  {i}/{n} solved", file=sys.stderr)

    ds = dataset.build_dataset(grid, params, oc, jobs=args.jobs, seed=args.seed, progress=progress)
    dataset.save(ds, path)
    m = ds.metadata
    print(f"wrote {path}")
    print(f"candidates {m['candidates']}  pruned {m['pruned']}  accepted {m['accepted']}  "
          f"rejected {m['rejected']}  wall time {time.perf_counter() - t0:.1f} s")
    return 0


def _split(cfg, ds, seed):
    return dataset.split(ds, cfg["train"].get("train_fraction", 0.7), seed)


def train_one(cfg, ds, kind: str, seed: int, kernel: str | None = None, size: int | None = None, log=None):
    """Build, train and return ``(best model, history, test split)``."""
    tc = train_config_from(cfg, seed)
    train, test = _split(cfg, ds, seed)
    desc = {"kind": kind, "size": size or cfg["train"].get("size", 256), "seed": seed,
            "horizon_s": ds.grid.horizon_s, "step_s": ds.grid.step_s}
    if "rbfn" in kind:
        desc["kernel"] = kernel or cfg["train"].get("kernel", "gaussian")
    model = models.build_model(desc)
    best, hist = models.train_model(model, train, test, tc, log=log)
    return best, hist, test


def cmd_train(cfg, args) -> int:
    ds = dataset.load(args.dataset)
    kind = args.kind or cfg["train"]["kind"]
    if kind not in models.MODEL_KINDS:
        raise CliError(f"unknown model kind {kind!r}; choose from {', '.join(models.MODEL_KINDS)}")
    if args.epochs is not None:
        cfg["train"]["epochs"] = args.epochs
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        best, hist, _ = train_one(cfg, ds, kind, args.seed, args.kernel, args.size)
    except models.TrainingDiverged as e:
        print(f"training diverged at epoch {e.epoch}", file=sys.stderr)
        return 3
    stem = args.name or kind
    digest = models.save_model(best, out / f"{stem}.mpnet")
    hist["checkpoint_sha256"] = digest
    with open(out / f"{stem}_loss.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("epoch", "train_loss", "test_loss"))
        for e, a, b in zip(hist["epoch"], hist["train_loss"], hist["test_loss"]):
            w.writerow((e, repr(a), repr(b)))
    (out / f"{stem}_history.json").write_text(json.dumps(hist, indent=1, sort_keys=True) + "\n")
    (out / f"{stem}_loss.svg").write_text(loss_curve_svg(hist))
    print(f"wrote {out / f'{stem}.mpnet'} (sha256 {digest[:16]})")
    print(f"final train loss {hist['train_loss'][-1]:.6g}  test loss {hist['test_loss'][-1]:.6g}  "
          f"best test loss {hist['best_test_loss']:.6g}")
    return 0


def loss_curve_svg(hist, width: int = 480, height: int = 280) -> str:
    tr = np.log10(np.maximum(hist["train_loss"], 1e-300))
    te = np.log10(np.maximum(hist["test_loss"], 1e-300))
    lo, hi = float(min(tr.min(), te.min())), float(max(tr.max(), te.max()))
    span = hi - lo if hi > lo else 1.0
    n = len(tr)

    def pts(series):
        return " ".join(
            f"{40 + (width - 60) * i / max(n - 1, 1):.1f},{20 + (height - 50) * (hi - v) / span:.1f}"
            for i, v in enumerate(series)
        )

    return "\n".join([
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.0f}" y="14" text-anchor="middle" font-size="12">log10 loss (blue train, orange test)</text>',
        f'<polyline points="{pts(tr)}" fill="none" stroke="#1f77b4"/>',
        f'<polyline points="{pts(te)}" fill="none" stroke="#ff7f0e"/>',
        f'<text x="4" y="24" font-size="10">{hi:.2f}</text>',
        f'<text x="4" y="{height - 30}" font-size="10">{lo:.2f}</text>',
        "</svg>",
    ]) + "\n"


def build_report(cfg, ds, named_models: dict, seed: int, skip_timing: bool = False, ocp_timing_samples=None):
    """Accuracy rows for every model plus the analytic baseline, and optional timing."""
    params = ds.params
    tgrid = ds.grid.time_grid
    train, test = _split(cfg, ds, seed)
    weights = net.group_weights_from_data(train.trajectories)
    report = bench.EvalReport(metadata={
        "dataset_samples": len(ds),
        "test_samples": len(test),
        "host": bench.host_description(),
    })
    losses = {}
    for name, m in named_models.items():
        pred = m(test.queries)
        report.rows.append(bench.evaluate_generator(name, pred, test.trajectories, test.queries))
        losses[name] = net.weighted_mse(pred, test.trajectories, weights)
        report.metadata[f"hash_{name}"] = models.model_hash(m)[:16]
    atraj, valid = models.analytic_mp(test.queries, params, tgrid)
    report.rows.append(bench.evaluate_generator("analytic", atraj, test.trajectories, test.queries, valid))
    report.metadata["test_losses"] = {k: round(v, 6) for k, v in losses.items()}

    if not skip_timing:
        reps = cfg["bench"]["repetitions"]
        sizes = cfg["bench"]["batch_sizes"]
        for name, m in named_models.items():
            report.timing[name] = bench.time_inference(m, test.queries, sizes, reps)
        n_ocp = ocp_timing_samples or cfg["bench"]["ocp_timing_samples"]
        qs = [ocp.Query.from_array(q) for q in test.queries[:n_ocp]]
        oc = ocp_from(cfg)
        report.timing["ocp"] = [bench.time_per_call(lambda q: ocp.solve(q, params, tgrid, oc), qs)]
    return report, losses


def acceptance_checks(report: bench.EvalReport, losses: dict, model_name: str = "mp_rbfn",
                      basic_name: str = "basic_rbfn") -> dict[str, bool]:
    """Threshold checks on a report; keys describe each check."""
    checks = {}
    ana = report.row("analytic")
    mp = report.row(model_name) if any(r.name == model_name for r in report.rows) else None
    if mp is not None:
        checks["position RMSE <= 0.5 x analytic"] = mp.position_rmse <= 0.5 * ana.position_rmse
        e = mp.yaw.mean_error
        if 0.0 in e and 1.6 in e:
            checks["MP-RBFN yaw degradation <= 50%"] = e[1.6] <= 1.5 * e[0.0]
    if basic_name in losses and model_name in losses:
        checks["MP-RBFN test loss < basic RBFN"] = losses[model_name] < losses[basic_name]
    e = ana.yaw.mean_error
    if 0.0 in e and 1.6 in e:
        checks["analytic error at 1.6 >= 2x at 0"] = e[1.6] >= 2.0 * e[0.0]
    shares = [ana.yaw.valid_share.get(c) for c in bench.YAW_BINS]
    if None not in shares:
        checks["analytic valid share decreasing"] = shares[0] > shares[1] > shares[2]
    if report.timing and model_name in report.timing and "ocp" in report.timing:
        t = {x.batch: x for x in report.timing[model_name]}
        t_ocp = report.timing["ocp"][0].per_trajectory_s
        if 50 in t:
            checks[">= 100x faster than OCP at batch 50"] = t_ocp >= 100.0 * t[50].per_trajectory_s
        if 50 in t and 13000 in t:
            checks["amortised time falls from 50 to 13000"] = t[13000].per_trajectory_s <= t[50].per_trajectory_s
    return checks


def cmd_bench(cfg, args) -> int:
    ds = dataset.load(args.dataset)
    named = {}
    for path in args.models:
        if not Path(path).exists():
            raise CliError(f"model checkpoint {path} not found")
        m = models.load_model(path)
        named[Path(path).stem] = m
    report, losses = build_report(cfg, ds, named, args.seed, args.skip_timing)
    paths = bench.emit_report(report, args.out)
    print(bench.text_table(report), end="")
    print("wrote " + ", ".join(str(p) for p in paths))
    if args.assert_thresholds:
        checks = acceptance_checks(report, losses, args.reference, args.basic)
        for name, ok in checks.items():
            print(f"{'PASS' if ok else 'FAIL'}  {name}")
        if not all(checks.values()):
            return 4
    return 0


def cmd_plan(cfg, args) -> int:
    params = vehicle_from(cfg)
    scenario_path = args.scenario or cfg["plan"]["scenario"]
    if scenario_path is None:
        raise CliError("no scenario given")
    scenario = planner.load_scenario(_resolve(cfg, scenario_path) if args.scenario is None else scenario_path, params)
    if args.model == "analytic":
        gen = models.AnalyticGenerator(params)
    else:
        if not Path(args.model).exists():
            raise CliError(f"model checkpoint {args.model} not found")
        gen = models.load_model(args.model)
    steps = args.steps or cfg["plan"]["steps"]
    log = planner.run_receding_horizon(scenario, gen, steps, cfg["plan"]["dt"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(scenario_path).stem
    planner.export_log_csv(log, out / f"{stem}_plan.csv")
    planner.export_trace_svg(log, scenario, out / f"{stem}_trace.svg")
    ego = log.ego_array()
    print(f"steps {steps}  min clearance {log.min_clearance:.3f} m  max |y| {np.abs(ego[:, 1]).max():.3f} m  "
          f"emergency steps {sum(log.emergency)}")
    if all(log.emergency):
        print("every step fell back to the emergency stop: no admissible candidate (check model and sampling)",
              file=sys.stderr)
        return 5
    if scenario.obstacles:
        ahead = all(ego[-1, 0] > o[0] for o in log.obstacle_states[-1])
        status = "overtake complete" if ahead and log.min_clearance > 0 else "overtake incomplete"
    else:
        status = "complete"
    print(status)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mprbfn", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--seed", type=int, help="random seed (overrides config)")
    p.add_argument("--jobs", type=int, default=1, help="worker processes for dataset generation")
    p.add_argument("--out", help="output directory (overrides config)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-dataset", help="solve the grid of OCPs and write a .mpds file")
    g.add_argument("--dry-run", action="store_true", help="only print the grid cardinality")
    g.add_argument("--name", help="output file name (default dataset.mpds)")

    t = sub.add_parser("train", help="train one model on a dataset")
    t.add_argument("dataset")
    t.add_argument("--kind", help=f"one of {', '.join(models.MODEL_KINDS)}")
    t.add_argument("--kernel", choices=net.KERNELS)
    t.add_argument("--size", type=int, help="latent/centre/hidden width")
    t.add_argument("--epochs", type=int)
    t.add_argument("--name", help="output stem (default: the model kind)")

    b = sub.add_parser("bench", help="accuracy and timing report")
    b.add_argument("dataset")
    b.add_argument("models", nargs="*", help=".mpnet checkpoints")
    b.add_argument("--skip-timing", action="store_true")
    b.add_argument("--assert", dest="assert_thresholds", action="store_true",
                   help="exit non-zero when an acceptance threshold fails")
    b.add_argument("--reference", default="mp_rbfn", help="model name checked against the thresholds")
    b.add_argument("--basic", default="basic_rbfn", help="basic RBFN model name for the loss ordering")

    pl = sub.add_parser("plan", help="closed-loop receding-horizon run")
    pl.add_argument("model", help=".mpnet checkpoint or 'analytic'")
    pl.add_argument("--scenario", help="scenario JSON (default: config plan.scenario)")
    pl.add_argument("--steps", type=int)
    return p


COMMANDS = {"gen-dataset": cmd_gen_dataset, "train": cmd_train, "bench": cmd_bench, "plan": cmd_plan}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config)
        args.seed = cfg["seed"] if args.seed is None else args.seed
        args.out = str(_resolve(cfg, cfg["out"])) if args.out is None else args.out
        return COMMANDS[args.command](cfg, args)
    except (CliError, planner.ScenarioError, planner.PlannerError, dataset.DatasetFormatError,
            models.ModelFormatError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (ValueError, TypeError) as e:
        print(f"error: invalid configuration: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
