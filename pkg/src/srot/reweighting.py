"""Classifier-driven outlier handling for OT.

A sample is flagged when the source/target classifier assigns it to the
other side. Flagged samples are then either removed (hard weights) or made
expensive to move through an inverse cross-entropy penalty added to the
ground cost (soft cost), in which case a robust solver leaves them out.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import log_softmax

from . import solvers
from .classifier import SIDE_NAMES, SOURCE, TARGET, ClassifierModel, logits, predict_side
from .errors import EmptyMeasure, InvalidGamma, InvalidParameter
from .measures import DiscreteMeasure
from .solvers import (
    EUCLIDEAN,
    CostMatrix,
    SolverConfig,
    SrotSoft,
    TransportPlan,
    as_cost_kind,
    cost_matrix,
)

DEFAULT_CE_FLOOR = 1e-6


def _side_id(side) -> int:
    if side in (SOURCE, TARGET):
        return int(side)
    try:
        return SIDE_NAMES.index(str(side).lower())
    except ValueError:
        raise InvalidParameter(f"side must be 'source' or 'target', got {side!r}") from None


@dataclass(frozen=True)
class OutlierMask:
    """Detection result for one side: flags and confidence of the predicted side."""

    flags: np.ndarray
    confidences: np.ndarray
    side: str

    def __post_init__(self):
        flags = np.array(self.flags, dtype=bool).reshape(-1)
        conf = np.array(self.confidences, dtype=np.float64).reshape(-1)
        if flags.shape != conf.shape:
            raise InvalidParameter("flags and confidences differ in length")
        if not np.all(np.isfinite(conf)):
            raise InvalidParameter("confidences must be finite")
        flags.setflags(write=False)
        conf.setflags(write=False)
        object.__setattr__(self, "flags", flags)
        object.__setattr__(self, "confidences", conf)
        object.__setattr__(self, "side", SIDE_NAMES[_side_id(self.side)])

    @property
    def n(self) -> int:
        return self.flags.size

    @property
    def n_flagged(self) -> int:
        return int(self.flags.sum())

    @property
    def fraction(self) -> float:
        return self.n_flagged / self.n if self.n else 0.0

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["index", "flag", "confidence", "side"])
            for i, (f, c) in enumerate(zip(self.flags, self.confidences)):
                w.writerow([i, int(f), repr(float(c)), self.side])

    @classmethod
    def from_csv(cls, path) -> "OutlierMask":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        side = rows[0]["side"] if rows else "source"
        return cls([int(r["flag"]) for r in rows], [float(r["confidence"]) for r in rows], side)


def detect_outliers(model: ClassifierModel, measure: DiscreteMeasure, assigned_side) -> OutlierMask:
    """Flag the samples the classifier places on the other side."""
    side = _side_id(assigned_side)
    pred, conf = predict_side(model, measure.points, assigned=side)
    return OutlierMask(pred != side, conf, SIDE_NAMES[side])


def hard_weights(mask: OutlierMask, n: Optional[int] = None) -> np.ndarray:
    """Zero weight on flagged samples, uniform ``1/n_kept`` on the rest."""
    if n is not None and n != mask.n:
        raise InvalidParameter(f"mask has {mask.n} entries, expected {n}")
    keep = ~mask.flags
    if not keep.any():
        raise EmptyMeasure("every sample was flagged as an outlier")
    return keep / keep.sum()


def default_gamma(C) -> float:
    """Largest entry of the base cost matrix."""
    values = C.values if isinstance(C, CostMatrix) else np.asarray(C, dtype=np.float64)
    if values.size == 0:
        raise InvalidGamma("empty cost matrix")
    g = float(values.max())
    if not g > 0:
        raise InvalidGamma(f"gamma must be positive, got {g}")
    return g


def inverse_ce_terms(model: ClassifierModel, source_points, target_points,
                     ce_floor: float = DEFAULT_CE_FLOOR):
    """``1 / max(CE, floor)`` for every source row and target column.

    A source sample is scored against the target label and a target sample
    against the source label, so the term is large when the classifier puts
    the sample on the other side.
    """
    if not ce_floor > 0:
        raise InvalidParameter("ce_floor must be positive")
    ce_rows = -log_softmax(logits(model, source_points), axis=1)[:, TARGET]
    ce_cols = -log_softmax(logits(model, target_points), axis=1)[:, SOURCE]
    return 1.0 / np.maximum(ce_rows, ce_floor), 1.0 / np.maximum(ce_cols, ce_floor)


def soft_cost(source: DiscreteMeasure, target: DiscreteMeasure, model: ClassifierModel,
              gamma=None, ce_floor: float = DEFAULT_CE_FLOOR, base=None) -> CostMatrix:
    """Base cost plus ``gamma / CE`` penalties on both sides.

    ``base`` is a cost kind or a precomputed matrix (Euclidean by default);
    ``gamma=None`` uses :func:`default_gamma` of the base matrix.
    """
    if isinstance(base, CostMatrix):
        base_values = base.values
    else:
        base_values = cost_matrix(source, target, as_cost_kind(base or EUCLIDEAN)).values
    gamma = default_gamma(base_values) if gamma is None else float(gamma)
    if not gamma > 0:
        raise InvalidGamma(f"gamma must be positive, got {gamma}")
    rows, cols = inverse_ce_terms(model, source.points, target.points, ce_floor)
    values = base_values + gamma * (rows[:, None] + cols[None, :])
    return CostMatrix(values, SrotSoft(gamma))


@dataclass(frozen=True)
class SrotConfig:
    """Settings for the hard and soft strategies.

    ``partial_mass=None`` picks ``1 - (largest flagged fraction)`` for the
    soft strategy and full mass for the hard one. ``lam=None`` in truncated
    mode uses ``rho_to_lambda`` with ``rho`` equal to that fraction.
    """

    gamma: Optional[float] = None
    rescale: bool = False
    base_solver: str = "exact"
    solver_config: SolverConfig = field(default_factory=SolverConfig)
    partial_mass: Optional[float] = None
    lam: Optional[float] = None
    ce_floor: float = DEFAULT_CE_FLOOR
    cost: str = "euclidean"

    def __post_init__(self):
        if self.gamma is not None and not self.gamma > 0:
            raise InvalidGamma("gamma must be positive")
        if not self.ce_floor > 0:
            raise InvalidParameter("ce_floor must be positive")
        if self.base_solver not in solvers.SOLVERS:
            raise InvalidParameter(f"unknown base solver {self.base_solver!r}")


def run_base_solver(name: str, a, b, C, config: SrotConfig, mass: Optional[float] = None,
                    lam: Optional[float] = None) -> TransportPlan:
    if name == "partial" and mass is None:
        mass = min(float(np.sum(a)), float(np.sum(b)))
    if name == "truncated" and lam is None:
        lam = solvers.rho_to_lambda(C, 0.05)
    return solvers.solve(name, a, b, C, config.solver_config, mass=mass, lam=lam)


@dataclass(frozen=True)
class SrotResult:
    plan: TransportPlan
    source_mask: OutlierMask
    target_mask: OutlierMask
    a: np.ndarray
    b: np.ndarray
    cost: CostMatrix


def srot_hard_detailed(source, target, model, config: Optional[SrotConfig] = None,
                       source_mask=None, target_mask=None) -> SrotResult:
    config = config or SrotConfig()
    sm = source_mask or detect_outliers(model, source, SOURCE)
    tm = target_mask or detect_outliers(model, target, TARGET)
    # an unflagged side keeps its weights untouched so the base problem is recovered exactly
    a = hard_weights(sm, source.n) * source.mass if sm.n_flagged else np.array(source.weights)
    b = hard_weights(tm, target.n) * target.mass if tm.n_flagged else np.array(target.weights)
    C = cost_matrix(source, target, config.cost)
    plan = run_base_solver(config.base_solver, a, b, C, config, config.partial_mass, config.lam)
    return SrotResult(plan, sm, tm, a, b, C)


def srot_hard(source: DiscreteMeasure, target: DiscreteMeasure, model: ClassifierModel,
              config: Optional[SrotConfig] = None) -> TransportPlan:
    """Remove detected outliers on both sides, renormalize, then solve.

    The plan is over the full index sets; flagged rows and columns are zero.
    """
    return srot_hard_detailed(source, target, model, config).plan


def soft_mass_plan(source_mask: OutlierMask, target_mask: OutlierMask, source_mass: float,
                   target_mass: float, partial_mass=None, rescale=False):
    """Transported mass and (possibly rescaled) side masses for the soft strategy.

    With ``rescale`` the side with fewer detections is scaled to carry mass
    ``m`` so that it is transported in full.
    """
    frac = max(source_mask.fraction, target_mask.fraction)
    m = partial_mass if partial_mass is not None else (1.0 - frac) * min(source_mass, target_mass)
    if not m > 0:
        raise EmptyMeasure("no mass left to transport")
    a_mass, b_mass = source_mass, target_mass
    if rescale:
        if target_mask.fraction <= source_mask.fraction:
            b_mass = m
        else:
            a_mass = m
    return m, a_mass, b_mass


def srot_soft_detailed(source, target, model, config: Optional[SrotConfig] = None,
                       source_mask=None, target_mask=None) -> SrotResult:
    config = config or SrotConfig(base_solver="partial")
    sm = source_mask or detect_outliers(model, source, SOURCE)
    tm = target_mask or detect_outliers(model, target, TARGET)
    base = cost_matrix(source, target, config.cost)
    C = soft_cost(source, target, model, config.gamma, config.ce_floor, base=base)
    m, a_mass, b_mass = soft_mass_plan(sm, tm, source.mass, target.mass,
                                       config.partial_mass, config.rescale)
    a = source.weights * (a_mass / source.mass)
    b = target.weights * (b_mass / target.mass)
    lam = config.lam
    if config.base_solver == "truncated" and lam is None:
        lam = solvers.rho_to_lambda(C, max(sm.fraction, tm.fraction, 1e-3))
    if config.base_solver == "exact" and abs(a.sum() - b.sum()) > solvers.MASS_TOL:
        raise InvalidParameter("exact base solver needs equal masses; disable rescale")
    plan = run_base_solver(config.base_solver, a, b, C, config, m, lam)
    return SrotResult(plan, sm, tm, a, b, C)


def srot_soft(source: DiscreteMeasure, target: DiscreteMeasure, model: ClassifierModel,
              config: Optional[SrotConfig] = None) -> TransportPlan:
    """Solve on the soft cost with a robust base solver (partial by default)."""
    return srot_soft_detailed(source, target, model, config).plan
