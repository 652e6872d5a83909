"""Particle gradient flows of OT losses.

The support ``Z`` of the flowing measure ``beta_t`` moves by explicit Euler
steps ``Z <- Z - lr * n * grad_Z h(alpha, beta_t)`` against a fixed measure
``alpha``. Gradients hold the plan fixed (envelope theorem), so each step
costs one solve.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import solvers
from .classifier import SOURCE, TARGET, ClassifierModel
from .errors import InvalidParameter, MismatchedReference, SrotError, UnsupportedCost
from .measures import DiscreteMeasure, make_empirical
from .reweighting import (
    DEFAULT_CE_FLOOR,
    OutlierMask,
    default_gamma,
    detect_outliers,
    hard_weights,
    inverse_ce_terms,
    soft_mass_plan,
)
from .solvers import CostKind, SolverConfig, TransportPlan, as_cost_kind, pairwise_distances

LOSSES = ("exact", "sinkhorn", "uot", "partial", "truncated", "srot_hard", "srot_soft")


def ot_support_grad(plan, source, target, cost_kind="euclidean") -> np.ndarray:
    """Gradient of ``sum_ij P_ij c(x_i, z_j)`` in the target support ``z``.

    Coincident pairs contribute zero under the Euclidean cost.
    """
    P = plan.coupling if isinstance(plan, TransportPlan) else np.asarray(plan, dtype=np.float64)
    X = source.points if isinstance(source, DiscreteMeasure) else np.asarray(source, dtype=np.float64)
    Z = target.points if isinstance(target, DiscreteMeasure) else np.asarray(target, dtype=np.float64)
    if P.shape != (X.shape[0], Z.shape[0]):
        raise InvalidParameter(f"plan shape {P.shape} does not match supports "
                               f"({X.shape[0]}, {Z.shape[0]})")
    kind = as_cost_kind(cost_kind)
    if kind.name == "SquaredEuclidean":
        return 2.0 * (P.sum(axis=0)[:, None] * Z - P.T @ X)
    if kind.name != "Euclidean":
        raise UnsupportedCost(f"no support gradient for {kind} cost")
    diff = Z[None, :, :] - X[:, None, :]
    dist = np.sqrt(np.sum(diff * diff, axis=2))
    w = np.divide(P, dist, out=np.zeros_like(P), where=dist > 0)
    return np.einsum("ij,ijk->jk", w, diff)


@dataclass(frozen=True)
class LossSpec:
    """Which OT loss drives the flow.

    ``name`` is one of :data:`LOSSES`. ``mass`` is the partial-OT mass (for
    ``srot_soft`` it overrides the detected fraction), ``lam`` the truncation
    level. ``cost`` is the base ground cost, ``Euclidean`` or
    ``SquaredEuclidean``.
    """

    name: str = "exact"
    solver_config: SolverConfig = field(default_factory=SolverConfig)
    mass: Optional[float] = None
    lam: Optional[float] = None
    cost: str = "sqeuclidean"
    rescale: bool = False
    gamma: Optional[float] = None
    ce_floor: float = DEFAULT_CE_FLOOR
    base_solver: Optional[str] = None

    def __post_init__(self):
        if self.name not in LOSSES:
            raise InvalidParameter(f"unknown loss {self.name!r}; expected one of {LOSSES}")
        kind = as_cost_kind(self.cost)
        if kind.name not in ("Euclidean", "SquaredEuclidean"):
            raise UnsupportedCost(f"flows support Euclidean costs only, got {kind}")

    @property
    def label(self) -> str:
        if self.name in ("partial",) and self.mass is not None:
            return f"partial(m={self.mass:g})"
        if self.name == "uot":
            return f"uot(tau={self.solver_config.tau:g})"
        if self.name == "srot_soft" and self.rescale:
            return "srot_soft(rescaled)"
        return self.name

    def to_dict(self) -> dict:
        d = asdict(self)
        d["label"] = self.label
        return d


class _Objective:
    """Per-flow state: fixed weights, frozen classifier terms and solver choice."""

    def __init__(self, alpha: DiscreteMeasure, beta0: DiscreteMeasure, spec: LossSpec,
                 model: Optional[ClassifierModel]):
        self.spec = spec
        self.kind = as_cost_kind(spec.cost)
        self.X = alpha.points
        self.a = np.array(alpha.weights)
        self.b = np.array(beta0.weights)
        self.solver = spec.name
        self.mass = spec.mass
        self.lam = spec.lam
        self.extra = None
        self.source_mask = None
        self.target_mask = None
        if spec.name in ("srot_hard", "srot_soft"):
            if model is None:
                raise InvalidParameter(f"{spec.name} flows need a trained classifier")
            self.source_mask = detect_outliers(model, alpha, SOURCE)
            self.target_mask = detect_outliers(model, beta0, TARGET)
        if spec.name == "srot_hard":
            if self.source_mask.n_flagged:
                self.a = hard_weights(self.source_mask, alpha.n) * alpha.mass
            if self.target_mask.n_flagged:
                self.b = hard_weights(self.target_mask, beta0.n) * beta0.mass
            self.solver = spec.base_solver or "exact"
        elif spec.name == "srot_soft":
            base0 = self._base(beta0.points)
            gamma = default_gamma(base0) if spec.gamma is None else spec.gamma
            rows, cols = inverse_ce_terms(model, alpha.points, beta0.points, spec.ce_floor)
            self.extra = gamma * (rows[:, None] + cols[None, :])
            m, a_mass, b_mass = soft_mass_plan(self.source_mask, self.target_mask, alpha.mass,
                                               beta0.mass, spec.mass, spec.rescale)
            self.a = self.a * (a_mass / alpha.mass)
            self.b = self.b * (b_mass / beta0.mass)
            self.mass = m
            self.solver = spec.base_solver or "partial"
        if self.solver == "partial" and self.mass is None:
            self.mass = min(self.a.sum(), self.b.sum())

    def _base(self, Z):
        return pairwise_distances(self.X, Z, squared=self.kind.name == "SquaredEuclidean")

    def __call__(self, Z):
        C = self._base(Z)
        if self.extra is not None:
            C = C + self.extra
        lam = self.lam
        if self.solver == "truncated" and lam is None:
            lam = solvers.rho_to_lambda(C, 0.05)
        plan = solvers.solve(self.solver, self.a, self.b, C, self.spec.solver_config,
                             mass=self.mass, lam=lam)
        if self.solver == "truncated":
            # capped pairs have zero slope in z
            P = np.where(C < 2.0 * lam, plan.coupling, 0.0)
        else:
            P = plan.coupling
        grad = ot_support_grad(P, self.X, Z, self.kind)
        return plan.value, grad, plan

    def eval_weights(self):
        return self.b / self.b.sum()


def reference_key(measure: Optional[DiscreteMeasure]) -> Optional[str]:
    if measure is None:
        return None
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(measure.points).tobytes())
    h.update(np.ascontiguousarray(measure.weights).tobytes())
    return h.hexdigest()[:16]


@dataclass
class FlowTrace:
    """Recorded flow: snapshots, per-iteration loss and logged evaluation metric."""

    snapshots: List[np.ndarray]
    snapshot_iters: List[int]
    loss_series: List[float]
    eval_series: List[float]
    eval_iters: List[int]
    config: dict
    final_loss: Optional[float] = None
    final_plan: Optional[np.ndarray] = None
    weights: Optional[np.ndarray] = None
    failed: bool = False
    message: str = ""
    reference: Optional[str] = None
    source_flags: Optional[np.ndarray] = None

    @property
    def label(self) -> str:
        return self.config.get("loss", {}).get("label", "flow")

    @property
    def iterations(self) -> int:
        return len(self.loss_series)

    @property
    def final_points(self) -> np.ndarray:
        return self.snapshots[-1]

    @property
    def final_eval(self) -> float:
        return self.eval_series[-1] if self.eval_series else float("nan")

    def final_measure(self) -> DiscreteMeasure:
        w = self.weights if self.weights is not None else None
        return make_empirical(self.final_points, w)

    def save(self, directory) -> None:
        """Write ``trace.csv``, ``config.json`` and ``snapshots/iter_XXXXX.csv``."""
        out = Path(directory)
        snap_dir = out / "snapshots"
        snap_dir.mkdir(parents=True, exist_ok=True)
        evals = dict(zip(self.eval_iters, self.eval_series))
        with open(out / "trace.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "loss", "eval"])
            n_rows = max(len(self.loss_series), max(self.eval_iters, default=-1) + 1)
            for it in range(n_rows):
                loss = self.loss_series[it] if it < len(self.loss_series) else self.final_loss
                ev = evals.get(it)
                w.writerow([it, "" if loss is None else repr(float(loss)),
                            "" if ev is None else repr(float(ev))])
        for it, pts in zip(self.snapshot_iters, self.snapshots):
            with open(snap_dir / f"iter_{it:05d}.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow([f"x{k}" for k in range(pts.shape[1])])
                for row in pts:
                    w.writerow([repr(float(v)) for v in row])
        meta = {
            "config": self.config,
            "failed": self.failed,
            "message": self.message,
            "final_loss": self.final_loss,
            "reference": self.reference,
            "weights": None if self.weights is None else self.weights.tolist(),
        }
        (out / "config.json").write_text(json.dumps(meta, indent=2, sort_keys=True))

    @classmethod
    def load(cls, directory) -> "FlowTrace":
        out = Path(directory)
        meta = json.loads((out / "config.json").read_text())
        loss, ev, ev_it = [], [], []
        with open(out / "trace.csv", newline="") as fh:
            for row in csv.DictReader(fh):
                it = int(row["iteration"])
                if row["loss"] != "":
                    loss.append(float(row["loss"]))
                if row["eval"] != "":
                    ev.append(float(row["eval"]))
                    ev_it.append(it)
        snaps, snap_it = [], []
        for p in sorted((out / "snapshots").glob("iter_*.csv")):
            snap_it.append(int(p.stem.split("_")[1]))
            snaps.append(np.loadtxt(p, delimiter=",", skiprows=1, ndmin=2))
        n_iter = max(snap_it[-1] if snap_it else 0, 0)
        if meta.get("final_loss") is not None and len(loss) > n_iter:
            loss = loss[:n_iter]
        w = meta.get("weights")
        return cls(snaps, snap_it, loss, ev, ev_it, meta["config"], meta.get("final_loss"),
                   None, None if w is None else np.asarray(w), meta["failed"], meta["message"],
                   meta.get("reference"))


def _eval_distance(alpha_clean: DiscreteMeasure, Z, weights) -> float:
    C = pairwise_distances(alpha_clean.points, Z)
    keep = weights > 0
    w = weights[keep] / weights[keep].sum()
    a = alpha_clean.weights / alpha_clean.mass
    return solvers.solve_exact(a, w, C[:, keep]).objective


def euler_flow(alpha: DiscreteMeasure, beta0: DiscreteMeasure, loss_spec: LossSpec,
               lr: float = 0.01, iters: int = 400, log_every: int = 10,
               alpha_clean: Optional[DiscreteMeasure] = None,
               model: Optional[ClassifierModel] = None) -> FlowTrace:
    """Move the support of ``beta0`` towards ``alpha`` by explicit Euler steps.

    Each iteration solves the loss at the current support, records its value
    and steps ``Z -= lr * n * grad``. Snapshots and the exact-OT distance to
    ``alpha_clean`` (Euclidean cost) are logged every ``log_every``
    iterations and at the end. A solver error stops the flow and sets
    ``failed``.
    """
    if not lr > 0:
        raise InvalidParameter("lr must be positive")
    if iters < 0 or log_every < 1:
        raise InvalidParameter("iters must be >= 0 and log_every >= 1")
    if alpha.dim != beta0.dim:
        raise InvalidParameter("alpha and beta0 live in different dimensions")
    objective = _Objective(alpha, beta0, loss_spec, model)
    eval_w = objective.eval_weights()
    n = beta0.n
    Z = np.array(beta0.points)
    config = {"lr": lr, "iters": iters, "log_every": log_every, "loss": loss_spec.to_dict()}
    trace = FlowTrace([Z.copy()], [0], [], [], [], config, weights=eval_w,
                      reference=reference_key(alpha_clean))
    if objective.source_mask is not None:
        trace.source_flags = np.array(objective.source_mask.flags)
    if alpha_clean is not None:
        trace.eval_series.append(_eval_distance(alpha_clean, Z, eval_w))
        trace.eval_iters.append(0)
    plan = None
    it = 0
    try:
        for it in range(iters):
            value, grad, plan = objective(Z)
            if not (np.isfinite(value) and np.all(np.isfinite(grad))):
                raise solvers.SolverFailure(f"non-finite loss or gradient at iteration {it}")
            trace.loss_series.append(float(value))
            Z = Z - lr * n * grad
            step = it + 1
            if step % log_every == 0 or step == iters:
                trace.snapshots.append(Z.copy())
                trace.snapshot_iters.append(step)
                if alpha_clean is not None:
                    trace.eval_series.append(_eval_distance(alpha_clean, Z, eval_w))
                    trace.eval_iters.append(step)
        if iters > 0:
            value, _, plan = objective(Z)
            trace.final_loss = float(value)
    except SrotError as exc:
        trace.failed = True
        trace.message = f"stopped at iteration {it}: {exc}"
    if plan is not None:
        trace.final_plan = np.array(plan.coupling)
    return trace


@dataclass(frozen=True)
class FlowReportRow:
    method: str
    final_eval: float
    final_loss: float
    initial_loss: float
    rank: int
    failed: bool


def compare_flows(traces: Sequence[FlowTrace]) -> List[FlowReportRow]:
    """Rank flows by their final distance to the shared clean reference."""
    traces = list(traces)
    refs = {t.reference for t in traces}
    if len(refs) > 1:
        raise MismatchedReference("flows were evaluated against different references")
    order = sorted(range(len(traces)), key=lambda k: (np.nan_to_num(traces[k].final_eval, nan=np.inf), k))
    rank = {k: r + 1 for r, k in enumerate(order)}
    rows = []
    for k, t in enumerate(traces):
        final_loss = t.final_loss if t.final_loss is not None else (
            t.loss_series[-1] if t.loss_series else float("nan"))
        initial = t.loss_series[0] if t.loss_series else float("nan")
        rows.append(FlowReportRow(t.label, float(t.final_eval), float(final_loss),
                                  float(initial), rank[k], t.failed))
    return rows


def write_flow_report(rows: Sequence[FlowReportRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "final_eval", "final_loss", "initial_loss", "rank", "failed"])
        for r in rows:
            w.writerow([r.method, repr(r.final_eval), repr(r.final_loss), repr(r.initial_loss),
                        r.rank, int(r.failed)])
