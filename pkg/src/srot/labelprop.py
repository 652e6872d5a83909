"""Label transfer through a transport plan and barycentric projection."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from . import solvers
from .classifier import TrainConfig, default_dims, init_model, train
from .errors import InvalidDataset, InvalidParameter
from .measures import ContaminatedDataset, DiscreteMeasure
from .reweighting import SOURCE, TARGET, detect_outliers, hard_weights
from .solvers import TransportPlan, cost_matrix

UNCLASSIFIED = -1
METHODS = ("partial", "truncated", "srot_hard_partial")


@dataclass(frozen=True)
class LabeledMeasure:
    measure: DiscreteMeasure
    labels: np.ndarray
    n_classes: int

    def __post_init__(self):
        lab = np.array(self.labels, dtype=np.intp).reshape(-1)
        if lab.size != self.measure.n:
            raise InvalidParameter("one label per support point is required")
        if lab.size and (lab.min() < 0 or lab.max() >= self.n_classes):
            raise InvalidParameter(f"labels must lie in [0, {self.n_classes})")
        lab.setflags(write=False)
        object.__setattr__(self, "labels", lab)


def _coupling(plan) -> np.ndarray:
    return plan.coupling if isinstance(plan, TransportPlan) else np.asarray(plan, dtype=np.float64)


def propagate_labels(plan, source_labels, b, threshold_frac: float = 0.25) -> np.ndarray:
    """Give each target the label of the source point sending it the most mass.

    Target ``j`` stays :data:`UNCLASSIFIED` unless that largest entry is
    positive and at least ``threshold_frac * b[j]``. Ties go to the lowest
    source index.
    """
    P = _coupling(plan)
    labels = np.asarray(source_labels, dtype=np.intp)
    b = np.asarray(b, dtype=np.float64)
    if P.shape != (labels.size, b.size):
        raise InvalidParameter(f"plan shape {P.shape} does not match "
                               f"{labels.size} labels and {b.size} target weights")
    if not 0 <= threshold_frac <= 1:
        raise InvalidParameter("threshold_frac must lie in [0, 1]")
    best = np.argmax(P, axis=0)
    top = P[best, np.arange(P.shape[1])]
    ok = (top > 0) & (top >= threshold_frac * b)
    return np.where(ok, labels[best], UNCLASSIFIED)


def accuracy(pred, truth, clean_mask):
    """Accuracy on clean targets and accuracy among classified targets.

    A classified outlier never counts as correct. The second value is
    ``None`` when nothing was classified.
    """
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    clean = np.asarray(clean_mask, dtype=bool)
    if not (pred.shape == truth.shape == clean.shape):
        raise InvalidParameter("pred, truth and clean_mask must have equal lengths")
    correct = clean & (pred == truth) & (pred != UNCLASSIFIED)
    n_clean = int(clean.sum())
    n_classified = int(np.sum(pred != UNCLASSIFIED))
    acc = correct.sum() / n_clean if n_clean else float("nan")
    labeled = correct.sum() / n_classified if n_classified else None
    return float(acc), (None if labeled is None else float(labeled))


def barycentric_projection(plan, source_points):
    """Plan-weighted mean of the source points for each target.

    Returns ``(proj, unprojected)``; targets receiving no mass get a NaN row
    and ``unprojected[j] = True``.
    """
    P = _coupling(plan)
    X = np.asarray(source_points, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if P.shape[0] != X.shape[0]:
        raise InvalidParameter("plan rows do not match the source points")
    mass = P.sum(axis=0)
    empty = mass <= 0
    proj = np.full((P.shape[1], X.shape[1]), np.nan)
    proj[~empty] = (P[:, ~empty].T @ X) / mass[~empty, None]
    return proj, empty


@dataclass(frozen=True)
class LabelpropRow:
    method: str
    m: float
    accuracy: float
    labeled_accuracy: Optional[float]
    n_classified: int


def _solve_method(method, a, b, C, m, a_hard=None, b_hard=None):
    if method == "partial":
        return solvers.partial_ot(a, b, C, m * min(a.sum(), b.sum()))
    if method == "truncated":
        return solvers.rot(a, b, C, (1.0 - m) / 2.0, mode="truncated")
    if method == "srot_hard_partial":
        return solvers.partial_ot(a_hard, b_hard, C, m * min(a_hard.sum(), b_hard.sum()))
    raise InvalidParameter(f"unknown method {method!r}; expected one of {METHODS}")


def run_labelprop_experiment(dataset: ContaminatedDataset, methods: Sequence[str],
                             mass_grid: Sequence[float], model=None,
                             train_config: Optional[TrainConfig] = None,
                             threshold_frac: float = 0.25) -> List[LabelpropRow]:
    """Accuracy of label transfer for every method and transported mass ``m``.

    ``truncated`` uses the robust-OT wrapper with ``rho = (1 - m) / 2``. The
    SROT variant trains an adversarially regularized classifier unless one is
    passed, removes the detected samples and runs partial OT.
    """
    if dataset.source_labels is None or dataset.target_labels is None:
        raise InvalidDataset("label propagation needs labels on both sides")
    methods = list(methods)
    for meth in methods:
        if meth not in METHODS:
            raise InvalidParameter(f"unknown method {meth!r}; expected one of {METHODS}")
    mass_grid = list(mass_grid)
    if not mass_grid or not methods:
        return []
    src, tgt = dataset.source, dataset.target
    a, b = np.array(src.weights), np.array(tgt.weights)
    C = cost_matrix(src, tgt).values
    a_hard = b_hard = None
    if "srot_hard_partial" in methods:
        if model is None:
            cfg = train_config or TrainConfig(epochs=300, lr=1e-2, log_every=100,
                                              eta=dataset.meta.get("eta", 0.25),
                                              omega=dataset.meta.get("omega", 0.001))
            model, _ = train(init_model(default_dims(src.dim), cfg.seed), dataset, cfg)
        a_hard = hard_weights(detect_outliers(model, src, SOURCE)) * src.mass
        b_hard = hard_weights(detect_outliers(model, tgt, TARGET)) * tgt.mass
    truth = np.asarray(dataset.target_labels)
    clean = ~np.asarray(dataset.target_outlier_truth)
    rows = []
    for meth in methods:
        for m in mass_grid:
            plan = _solve_method(meth, a, b, C, float(m), a_hard, b_hard)
            pred = propagate_labels(plan, dataset.source_labels, b, threshold_frac)
            acc, lab = accuracy(pred, truth, clean)
            rows.append(LabelpropRow(meth, float(m), acc, lab, int(np.sum(pred != UNCLASSIFIED))))
    return rows


def write_labelprop_report(rows: Sequence[LabelpropRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "m", "accuracy", "labeled_accuracy"])
        for r in rows:
            w.writerow([r.method, repr(r.m), repr(r.accuracy),
                        "" if r.labeled_accuracy is None else repr(r.labeled_accuracy)])
