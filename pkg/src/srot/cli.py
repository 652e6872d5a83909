"""``srot`` command-line entry point.

Subcommands: ``gen``, ``train``, ``solve``, ``flow``, ``labelprop``, ``plot``.
Settings come from an optional JSON config file, then command-line flags;
the merged configuration is written to ``OUT/config.json``. Outputs go under
``OUT``::

    config.json  data/  plans/  traces/  plots/  report.csv

Exit status is 0 on success, 1 on a runtime failure and 2 on a usage error.
``SROT_THREADS`` caps the threads used by the numerical libraries.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import measures, plotting, solvers
from .classifier import TrainConfig, init_model, load_model, save_model, train
from .errors import SrotError
from .flows import LossSpec, compare_flows, euler_flow, write_flow_report, FlowTrace
from .labelprop import METHODS as LP_METHODS
from .labelprop import LabelpropRow, run_labelprop_experiment, write_labelprop_report
from .reweighting import SOURCE, TARGET, SrotConfig, detect_outliers, srot_hard, srot_soft

PRESETS = {
    "toy2d": (measures.gen_toy_2d, {"n_clean_per_side": 75, "n_type1": 6, "n_type2": 4}),
    "flow2d": (measures.gen_flow_2d, {"n": 1000, "kappa": 0.1}),
    "highdim": (measures.gen_highdim_analog, {"d": 64, "n_clean": 270, "n_outlier": 30}),
    "labelprop": (measures.gen_labelprop_analog, {}),
}

SOLVE_CHOICES = ("exact", "sinkhorn", "uot", "partial", "truncated", "rot", "srot_hard", "srot_soft")
FLOW_ALIASES = {"wasserstein": "exact", "w": "exact"}
FLOW_CHOICES = ("wasserstein", "exact", "sinkhorn", "uot", "partial", "truncated",
                "srot_hard", "srot_soft")

DEFAULTS = {
    "seed": 0,
    "out": "srot_out",
    "dataset": {"preset": "toy2d", "path": None, "params": {}},
    "classifier": {
        "mode": "ar", "hidden": [128, 128], "activation": "relu", "omega": None, "eta": None,
        "power_iters": 1, "lr": 1e-2, "epochs": None, "batch_size": 32, "log_every": 10,
        "model_path": None,
    },
    "solver": {
        "name": "uot", "epsilon": 0.01, "tau": [1000.0, 1.0, 0.05], "max_iters": 10000,
        "tol": 1e-9, "mass": None, "lam": None, "rho": 0.05, "rot_mode": "partial",
    },
    "srot": {"gamma": None, "rescale": False, "base_solver": "exact", "partial_mass": None,
             "ce_floor": 1e-6},
    "flow": {
        "losses": ["wasserstein", "partial", "srot_hard"], "lr": 0.01, "iters": 400,
        "log_every": 10, "mass": 0.9, "cost": "sqeuclidean", "rescale": True,
        "epsilon": 0.01, "tau": 1.0,
    },
    "labelprop": {"methods": list(LP_METHODS), "mass_grid": [0.5, 0.7, 0.85, 0.9],
                  "threshold_frac": 0.25},
}


class UsageError(Exception):
    """Bad flags or configuration; maps to exit status 2."""


# -- configuration ------------------------------------------------------------

def _merge(base: dict, override: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        if key not in base:
            raise UsageError(f"unknown config key {where}{key!r}")
        if isinstance(base[key], dict) and key != "params":
            if not isinstance(val, dict):
                raise UsageError(f"config key {where}{key!r} must be an object")
            out[key] = _merge(base[key], val, f"{where}{key}.")
        else:
            out[key] = val
    return out


def load_config(path) -> dict:
    if path is None:
        return copy.deepcopy(DEFAULTS)
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise UsageError(f"{path}: the config must be a JSON object")
    return _merge(DEFAULTS, doc)


def _set(cfg, section, key, value):
    if value is not None:
        cfg[section][key] = value


def resolve_config(args) -> dict:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.out is not None:
        cfg["out"] = args.out
    cmd = args.command
    if cmd == "gen":
        _set(cfg, "dataset", "preset", args.preset)
    if cmd in ("train", "solve", "flow", "labelprop", "plot"):
        _set(cfg, "dataset", "path", args.data)
    if cmd in ("train", "solve", "flow", "labelprop"):
        _set(cfg, "classifier", "model_path", getattr(args, "model", None))
    if cmd == "train":
        _set(cfg, "classifier", "mode", args.mode)
        _set(cfg, "classifier", "epochs", args.epochs)
        _set(cfg, "classifier", "omega", args.omega)
        _set(cfg, "classifier", "eta", args.eta)
        _set(cfg, "classifier", "lr", args.lr)
    if cmd == "solve":
        _set(cfg, "solver", "name", args.solver)
        _set(cfg, "solver", "tau", args.tau)
        _set(cfg, "solver", "epsilon", args.epsilon)
        _set(cfg, "solver", "mass", args.mass)
        _set(cfg, "solver", "lam", args.lam)
        _set(cfg, "solver", "rho", args.rho)
    if cmd == "flow":
        _set(cfg, "flow", "losses", args.loss)
        _set(cfg, "flow", "lr", args.lr)
        _set(cfg, "flow", "iters", args.iters)
        _set(cfg, "flow", "log_every", args.log_every)
        _set(cfg, "flow", "mass", args.mass)
    if cmd == "labelprop":
        _set(cfg, "labelprop", "methods", args.methods)
        if args.mass_grid is not None:
            cfg["labelprop"]["mass_grid"] = args.mass_grid
        if args.single_mass is not None:
            cfg["labelprop"]["mass_grid"] = [args.single_mass]
        _set(cfg, "labelprop", "threshold_frac", args.threshold)
    _validate(cfg, cmd)
    return cfg


def _validate(cfg, cmd):
    if cfg["dataset"]["preset"] not in PRESETS:
        raise UsageError(f"unknown preset {cfg['dataset']['preset']!r}; "
                         f"expected one of {sorted(PRESETS)}")
    if cfg["classifier"]["mode"] not in ("ce", "ar"):
        raise UsageError("classifier.mode must be 'ce' or 'ar'")
    if cfg["solver"]["name"] not in SOLVE_CHOICES:
        raise UsageError(f"unknown solver {cfg['solver']['name']!r}")
    tau = cfg["solver"]["tau"]
    if not isinstance(tau, list):
        cfg["solver"]["tau"] = [tau]
    if cmd == "flow":
        losses = cfg["flow"]["losses"]
        if not losses:
            raise UsageError("flow needs at least one loss")
        bad = [name for name in losses if name not in FLOW_CHOICES]
        if bad:
            raise UsageError(f"unknown flow losses {bad}")
        if cfg["flow"]["log_every"] < 1 or cfg["flow"]["iters"] < 0:
            raise UsageError("flow.iters must be >= 0 and flow.log_every >= 1")
    if cmd == "labelprop":
        bad = [m for m in cfg["labelprop"]["methods"] if m not in LP_METHODS]
        if bad:
            raise UsageError(f"unknown label-propagation methods {bad}")
        if not 0 <= cfg["labelprop"]["threshold_frac"] <= 1:
            raise UsageError("labelprop.threshold_frac must lie in [0, 1]")


# -- helpers ------------------------------------------------------------------

class Layout:
    def __init__(self, root):
        self.root = Path(root)
        self.data = self.root / "data"
        self.plans = self.root / "plans"
        self.traces = self.root / "traces"
        self.plots = self.root / "plots"
        self.report = self.root / "report.csv"
        self.config = self.root / "config.json"

    def make(self):
        for d in (self.data, self.plans, self.traces, self.plots):
            d.mkdir(parents=True, exist_ok=True)

    @property
    def dataset(self):
        return self.data / "dataset.csv"

    @property
    def model(self):
        return self.data / "model.json"


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow(row)


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def _load_dataset(cfg, layout):
    path = Path(cfg["dataset"]["path"]) if cfg["dataset"]["path"] else layout.dataset
    if not path.exists():
        raise FileNotFoundError(f"dataset not found: {path} (run 'srot gen' first or pass --data)")
    return measures.load_dataset_csv(path)


def _train_config(cfg, ds, mode=None) -> TrainConfig:
    c = cfg["classifier"]
    mode = (mode or c["mode"]).upper()
    # plain cross-entropy needs longer to memorize the contaminated labels
    epochs = c["epochs"] if c["epochs"] is not None else (2000 if mode == "CE" else 1000)
    return TrainConfig(
        omega=c["omega"] if c["omega"] is not None else ds.meta.get("omega", 0.001),
        eta=c["eta"] if c["eta"] is not None else ds.meta.get("eta", 0.25),
        power_iters=c["power_iters"], lr=c["lr"], epochs=epochs,
        batch_size=c["batch_size"], mode=mode, seed=cfg["seed"],
        log_every=c["log_every"])


def _fit(cfg, ds, mode=None):
    tc = _train_config(cfg, ds, mode)
    dims = [ds.dim] + list(cfg["classifier"]["hidden"]) + [2]
    model = init_model(dims, tc.seed, cfg["classifier"]["activation"])
    model, hist = train(model, ds, tc)
    return model, hist, tc


def _get_model(cfg, ds, layout, required=True):
    path = cfg["classifier"]["model_path"]
    if path:
        if not Path(path).exists():
            raise FileNotFoundError(f"model checkpoint not found: {path}")
        return load_model(path)[0]
    if layout.model.exists():
        return load_model(layout.model)[0]
    if not required:
        return None
    model, hist, tc = _fit(cfg, ds)
    save_model(model, layout.model, tc)
    hist.to_csv(layout.data / "history.csv")
    return model


def _solver_config(cfg, tau=None) -> solvers.SolverConfig:
    s = cfg["solver"]
    return solvers.SolverConfig(epsilon=s["epsilon"], tau=tau if tau is not None else s["tau"][0],
                                max_iters=s["max_iters"], tol=s["tol"])


# -- commands -----------------------------------------------------------------

def cmd_gen(cfg, args, layout):
    preset = cfg["dataset"]["preset"]
    fn, params = PRESETS[preset]
    params = dict(params, **cfg["dataset"]["params"])
    path = Path(cfg["dataset"]["path"]) if cfg["dataset"]["path"] else layout.dataset
    if path.exists() and not args.force:
        raise FileExistsError(f"{path} exists; pass --force to overwrite")
    try:
        ds = fn(seed=cfg["seed"], **params)
    except TypeError as exc:
        raise UsageError(f"bad parameters for preset {preset!r}: {exc}") from None
    path.parent.mkdir(parents=True, exist_ok=True)
    measures.save_dataset_csv(ds, path)
    _write_rows(layout.report, ["preset", "side", "n", "outliers", "dim"],
                [[preset, "source", ds.source.n, int(ds.source_outlier_truth.sum()), ds.dim],
                 [preset, "target", ds.target.n, int(ds.target_outlier_truth.sum()), ds.dim]])
    print(f"wrote {ds.source.n + ds.target.n} points to {path}")


def _detection_rows(model, ds):
    rows = []
    for side_id, mu, truth in ((SOURCE, ds.source, ds.source_outlier_truth),
                               (TARGET, ds.target, ds.target_outlier_truth)):
        mask = detect_outliers(model, mu, side_id)
        for i in range(mu.n):
            rows.append([i, int(mask.flags[i]), repr(float(mask.confidences[i])), mask.side,
                         int(truth[i])])
    return rows


def cmd_train(cfg, args, layout):
    ds = _load_dataset(cfg, layout)
    model, hist, tc = _fit(cfg, ds)
    save_model(model, layout.model, tc)
    hist.to_csv(layout.data / "history.csv")
    rows = _detection_rows(model, ds)
    _write_rows(layout.data / "detection.csv", ["index", "flag", "confidence", "side", "truth"], rows)
    summary = []
    for side in ("source", "target"):
        sel = [r for r in rows if r[3] == side]
        flagged = sum(r[1] for r in sel)
        true_pos = sum(r[1] and r[4] for r in sel)
        summary.append([tc.mode, side, len(sel), flagged, sum(r[4] for r in sel), true_pos])
    _write_rows(layout.report, ["mode", "side", "n", "flagged", "outliers", "flagged_outliers"],
                summary)
    print(f"trained {tc.mode} classifier; final accuracy {hist.accuracy[-1]:.4f}")


def _solve_one(cfg, name, ds, model, tau=None):
    s = cfg["solver"]
    a, b = ds.source.weights, ds.target.weights
    C = solvers.cost_matrix(ds.source, ds.target)
    if name == "exact":
        return solvers.solve_exact(a, b, C)
    if name == "sinkhorn":
        return solvers.sinkhorn(a, b, C, _solver_config(cfg))
    if name == "uot":
        return solvers.sinkhorn_unbalanced(a, b, C, _solver_config(cfg, tau))
    if name == "partial":
        return solvers.partial_ot(a, b, C, s["mass"] if s["mass"] is not None else 0.9)
    if name == "truncated":
        lam = s["lam"] if s["lam"] is not None else solvers.rho_to_lambda(C, s["rho"])
        return solvers.truncated_ot(a, b, C, lam)
    if name == "rot":
        return solvers.rot(a, b, C, s["rho"], s["rot_mode"])
    sc = cfg["srot"]
    scfg = SrotConfig(gamma=sc["gamma"], rescale=sc["rescale"], ce_floor=sc["ce_floor"],
                      base_solver=sc["base_solver"] if name == "srot_hard" else (
                          sc["base_solver"] if sc["base_solver"] != "exact" else "partial"),
                      solver_config=_solver_config(cfg), partial_mass=sc["partial_mass"],
                      lam=s["lam"])
    if name == "srot_hard":
        return srot_hard(ds.source, ds.target, model, scfg)
    return srot_soft(ds.source, ds.target, model, scfg)


def cmd_solve(cfg, args, layout):
    ds = _load_dataset(cfg, layout)
    name = cfg["solver"]["name"]
    model = _get_model(cfg, ds, layout) if name.startswith("srot") else None
    runs = [(f"uot_tau{t:g}", t) for t in cfg["solver"]["tau"]] if name == "uot" else [(name, None)]
    rows = []
    for tag, tau in runs:
        plan = _solve_one(cfg, name, ds, model, tau)
        (layout.plans / f"plan_{tag}.json").write_text(plan.to_json())
        info = plotting.plot_plan(layout.plots / f"plan_{tag}.svg", ds.source.points,
                                  ds.target.points, plan.coupling, ds.source_types,
                                  ds.target_types, title=tag)
        rows.append([tag, plan.solver, _fmt(tau), _fmt(plan.objective), _fmt(plan.mass),
                     plan.iterations, int(plan.converged), info["segments"], int(info["culled"])])
    _write_rows(layout.report, ["run", "solver", "tau", "objective", "mass", "iterations",
                                "converged", "segments", "culled"], rows)
    print(f"solved {len(rows)} problem(s) with {name}")


def _loss_spec(cfg, name) -> LossSpec:
    f = cfg["flow"]
    name = FLOW_ALIASES.get(name, name)
    sc = solvers.SolverConfig(epsilon=f["epsilon"], tau=f["tau"],
                              max_iters=cfg["solver"]["max_iters"], tol=cfg["solver"]["tol"])
    if name == "partial":
        return LossSpec("partial", sc, mass=f["mass"], cost=f["cost"])
    if name == "srot_soft":
        return LossSpec("srot_soft", sc, mass=f["mass"], cost=f["cost"], rescale=f["rescale"],
                        gamma=cfg["srot"]["gamma"], ce_floor=cfg["srot"]["ce_floor"])
    return LossSpec(name, sc, cost=f["cost"])


def cmd_flow(cfg, args, layout):
    ds = _load_dataset(cfg, layout)
    f = cfg["flow"]
    specs = [_loss_spec(cfg, name) for name in f["losses"]]
    needs_model = any(s.name.startswith("srot") for s in specs)
    model = _get_model(cfg, ds, layout) if needs_model else None
    alpha_clean = ds.source_clean()
    traces = []
    for spec in specs:
        trace = euler_flow(ds.source, ds.target, spec, lr=f["lr"], iters=f["iters"],
                           log_every=f["log_every"], alpha_clean=alpha_clean, model=model)
        label = spec.label.replace("(", "_").replace(")", "").replace("=", "")
        trace.save(layout.traces / label)
        plotting.plot_flow_snapshots(layout.plots / f"flow_{label}.svg", ds.source.points, trace)
        traces.append(trace)
        print(f"{spec.label}: final W to clean source {trace.final_eval:.6g}"
              + (" (stopped early)" if trace.failed else ""))
    plotting.plot_traces(layout.plots / "flow_traces.svg", traces)
    write_flow_report(compare_flows(traces), layout.report)
    if any(t.failed for t in traces):
        raise SrotError("; ".join(t.message for t in traces if t.failed))


def cmd_labelprop(cfg, args, layout):
    ds = _load_dataset(cfg, layout)
    lp = cfg["labelprop"]
    model = None
    if "srot_hard_partial" in lp["methods"]:
        model = _get_model(cfg, ds, layout, required=False)
        if model is None:
            model, hist, tc = _fit(cfg, ds, mode="ar")
    rows = run_labelprop_experiment(ds, lp["methods"], lp["mass_grid"], model=model,
                                    threshold_frac=lp["threshold_frac"])
    write_labelprop_report(rows, layout.report)
    if rows:
        plotting.plot_labelprop(layout.plots / "labelprop.svg", rows)
    print(f"{len(rows)} label-propagation runs")


def cmd_plot(cfg, args, layout):
    made = 0
    plan_files = sorted(layout.plans.glob("plan_*.json"))
    if plan_files:
        ds = _load_dataset(cfg, layout)
        for p in plan_files:
            plan = solvers.TransportPlan.from_json(p.read_text())
            plotting.plot_plan(layout.plots / f"{p.stem}.svg", ds.source.points, ds.target.points,
                               plan.coupling, ds.source_types, ds.target_types,
                               title=p.stem[len("plan_"):])
            made += 1
    trace_dirs = sorted(d for d in layout.traces.glob("*") if (d / "trace.csv").exists())
    if trace_dirs:
        plotting.plot_traces(layout.plots / "flow_traces.svg", [FlowTrace.load(d) for d in trace_dirs])
        made += 1
    if layout.report.exists():
        with open(layout.report, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames and {"method", "m", "accuracy"} <= set(reader.fieldnames):
                rows = [LabelpropRow(r["method"], float(r["m"]), float(r["accuracy"]),
                                     float(r["labeled_accuracy"]) if r["labeled_accuracy"] else None,
                                     0) for r in reader]
                plotting.plot_labelprop(layout.plots / "labelprop.svg", rows)
                made += 1
    if made == 0:
        raise FileNotFoundError(f"nothing to plot under {layout.root}")
    print(f"rendered {made} plot(s)")


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "solve": cmd_solve, "flow": cmd_flow,
            "labelprop": cmd_labelprop, "plot": cmd_plot}


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON configuration file")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int)
    common.add_argument("--force", action="store_true", help="overwrite existing dataset files")

    parser = argparse.ArgumentParser(prog="srot", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", parents=[common], help="generate a dataset")
    p.add_argument("--preset", choices=sorted(PRESETS))

    p = sub.add_parser("train", parents=[common], help="train the source/target classifier")
    p.add_argument("--data")
    p.add_argument("--mode", choices=("ce", "ar"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--omega", type=float)
    p.add_argument("--eta", type=float)
    p.add_argument("--lr", type=float)

    p = sub.add_parser("solve", parents=[common], help="solve one OT problem and plot the plan")
    p.add_argument("--data")
    p.add_argument("--model")
    p.add_argument("--solver", choices=SOLVE_CHOICES)
    p.add_argument("--tau", type=float, nargs="+")
    p.add_argument("--epsilon", type=float)
    p.add_argument("--mass", type=float)
    p.add_argument("--lam", type=float)
    p.add_argument("--rho", type=float)

    p = sub.add_parser("flow", parents=[common], help="run gradient flows")
    p.add_argument("--data")
    p.add_argument("--model")
    p.add_argument("--loss", nargs="*", choices=FLOW_CHOICES)
    p.add_argument("--lr", type=float)
    p.add_argument("--iters", type=int)
    p.add_argument("--log-every", type=int)
    p.add_argument("--mass", type=float)

    p = sub.add_parser("labelprop", parents=[common], help="label propagation sweep")
    p.add_argument("--data")
    p.add_argument("--model")
    p.add_argument("--methods", nargs="+", choices=LP_METHODS)
    grid = p.add_mutually_exclusive_group()
    grid.add_argument("--mass-grid", type=float, nargs="+")
    grid.add_argument("--mass", dest="single_mass", type=float)
    p.add_argument("--threshold", type=float)

    p = sub.add_parser("plot", parents=[common], help="re-render plots from saved outputs")
    p.add_argument("--data")
    return parser


def _thread_limit():
    raw = os.environ.get("SROT_THREADS")
    if raw is None or raw == "":
        return None
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n < 1:
        raise UsageError(f"SROT_THREADS must be a positive integer, got {raw!r}")
    # more BLAS threads than cores busy-waits and slows everything down
    try:
        cores = len(os.sched_getaffinity(0))
    except AttributeError:
        cores = os.cpu_count() or 1
    return min(n, cores)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        threads = _thread_limit()
        cfg = resolve_config(args)
        layout = Layout(cfg["out"])
        layout.make()
        layout.config.write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
        if threads is not None:
            from threadpoolctl import threadpool_limits
            with threadpool_limits(limits=threads):
                COMMANDS[args.command](cfg, args, layout)
        else:
            COMMANDS[args.command](cfg, args, layout)
    except UsageError as exc:
        print(f"srot: usage error: {exc}", file=sys.stderr)
        return 2
    except (SrotError, OSError) as exc:
        print(f"srot: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
