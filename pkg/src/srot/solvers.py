"""Discrete optimal transport solvers.

Exact (network simplex), entropic Sinkhorn, unbalanced generalized Sinkhorn
with KL marginal penalties, partial OT by dummy-point augmentation,
truncated-cost OT, and the robust-OT wrapper built on the last two.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from typing import Optional, Union

import numpy as np
from scipy.spatial.distance import cdist
from scipy.special import xlogy

from .errors import (
    InvalidMass,
    InvalidParameter,
    InvalidWeights,
    MassMismatch,
    SolverFailure,
    UnsupportedCost,
)
from .measures import DiscreteMeasure

if os.environ.get("SROT_PURE_PYTHON"):
    from ._simplex_py import network_simplex as _network_simplex
    SIMPLEX_BACKEND = "python"
else:
    try:
        from ._simplex import network_simplex as _network_simplex
        SIMPLEX_BACKEND = "cython"
    except ImportError:  # extension not built
        from ._simplex_py import network_simplex as _network_simplex
        SIMPLEX_BACKEND = "python"

MASS_TOL = 1e-9
DENSE_JSON_LIMIT = 10 ** 6


# -- cost matrices ------------------------------------------------------------

@dataclass(frozen=True)
class CostKind:
    """Tag describing how a cost matrix was built.

    ``name`` is one of ``Euclidean``, ``SquaredEuclidean``, ``Truncated``
    (``param`` = lambda) or ``SrotSoft`` (``param`` = gamma).
    """

    name: str
    param: Optional[float] = None

    def __str__(self):
        return self.name if self.param is None else f"{self.name}({self.param:g})"


EUCLIDEAN = CostKind("Euclidean")
SQUARED_EUCLIDEAN = CostKind("SquaredEuclidean")


def Truncated(lam: float) -> CostKind:
    return CostKind("Truncated", float(lam))


def SrotSoft(gamma: float) -> CostKind:
    return CostKind("SrotSoft", float(gamma))


_KIND_ALIASES = {
    "euclidean": EUCLIDEAN,
    "sqeuclidean": SQUARED_EUCLIDEAN,
    "squaredeuclidean": SQUARED_EUCLIDEAN,
    "squared_euclidean": SQUARED_EUCLIDEAN,
}


def as_cost_kind(kind: Union[str, CostKind]) -> CostKind:
    if isinstance(kind, CostKind):
        return kind
    try:
        return _KIND_ALIASES[str(kind).lower()]
    except KeyError:
        raise UnsupportedCost(f"unknown cost kind {kind!r}") from None


@dataclass(frozen=True)
class CostMatrix:
    values: np.ndarray
    kind: CostKind = EUCLIDEAN

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64, copy=True)
        if v.ndim != 2:
            raise InvalidParameter("cost matrix must be two-dimensional")
        if not np.all(np.isfinite(v)) or np.any(v < 0):
            raise InvalidParameter("cost entries must be finite and nonnegative")
        if self.kind.name == "Truncated" and np.any(v > 2 * self.kind.param):
            raise InvalidParameter("truncated cost exceeds 2*lambda")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def source_dim(self) -> int:
        return self.values.shape[0]

    @property
    def target_dim(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self):
        return self.values.shape


def _as_values(C) -> np.ndarray:
    if isinstance(C, CostMatrix):
        return C.values
    return np.asarray(C, dtype=np.float64)


def _kind_of(C) -> CostKind:
    return C.kind if isinstance(C, CostMatrix) else EUCLIDEAN


def pairwise_distances(x, y, squared: bool = False) -> np.ndarray:
    metric = "sqeuclidean" if squared else "euclidean"
    return cdist(np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64), metric=metric)


def cost_matrix(source: DiscreteMeasure, target: DiscreteMeasure,
                kind: Union[str, CostKind] = EUCLIDEAN) -> CostMatrix:
    """Pairwise ground costs between the supports of two measures."""
    if source.dim != target.dim:
        raise InvalidParameter(
            f"dimension mismatch: {source.dim} vs {target.dim}")
    kind = as_cost_kind(kind)
    if kind.name == "Euclidean":
        return CostMatrix(pairwise_distances(source.points, target.points), kind)
    if kind.name == "SquaredEuclidean":
        return CostMatrix(pairwise_distances(source.points, target.points, squared=True), kind)
    if kind.name == "Truncated":
        if not kind.param > 0:
            raise InvalidParameter("lambda must be positive")
        base = pairwise_distances(source.points, target.points)
        return CostMatrix(np.minimum(base, 2 * kind.param), kind)
    raise UnsupportedCost(
        f"{kind} costs depend on a classifier; build them with srot.reweighting.soft_cost")


# -- plans and configs --------------------------------------------------------

@dataclass(frozen=True)
class SolverConfig:
    """Entropic / unbalanced solver parameters.

    ``log_domain=None`` selects the log-domain iterations when
    ``epsilon < 0.05``.
    """

    epsilon: float = 0.01
    tau: float = 1.0
    max_iters: int = 10000
    tol: float = 1e-9
    log_domain: Optional[bool] = None

    def __post_init__(self):
        if self.max_iters < 1:
            raise InvalidParameter("max_iters must be >= 1")
        if not self.tol > 0:
            raise InvalidParameter("tol must be positive")
        if self.epsilon < 0:
            raise InvalidParameter("epsilon must be >= 0")

    @property
    def use_log(self) -> bool:
        return self.epsilon < 0.05 if self.log_domain is None else bool(self.log_domain)


@dataclass(frozen=True)
class TransportPlan:
    """A coupling with its marginals and solver diagnostics.

    ``objective`` is ``<P, C>`` for the exact, partial, truncated and
    balanced Sinkhorn solvers and the full penalized value for the
    unbalanced solver. ``value`` is always the objective the solver
    minimizes (entropic and marginal terms included); flows differentiate it.
    """

    coupling: np.ndarray
    objective: float
    row_marginals: np.ndarray
    col_marginals: np.ndarray
    iterations: int
    converged: bool
    solver: str
    config: dict = field(default_factory=dict)
    value: Optional[float] = None
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        P = np.array(self.coupling, dtype=np.float64, copy=True)
        P.setflags(write=False)
        object.__setattr__(self, "coupling", P)
        for attr in ("row_marginals", "col_marginals"):
            v = np.array(getattr(self, attr), dtype=np.float64, copy=True)
            v.setflags(write=False)
            object.__setattr__(self, attr, v)
        if self.value is None:
            object.__setattr__(self, "value", float(self.objective))

    @property
    def mass(self) -> float:
        return float(self.coupling.sum())

    def to_json(self) -> str:
        P = self.coupling
        doc = {
            "solver": self.solver,
            "shape": list(P.shape),
            "objective": self.objective,
            "value": self.value,
            "iterations": int(self.iterations),
            "converged": bool(self.converged),
            "config": self.config,
            "row_marginals": self.row_marginals.tolist(),
            "col_marginals": self.col_marginals.tolist(),
        }
        if P.size <= DENSE_JSON_LIMIT:
            doc["format"] = "dense"
            doc["coupling"] = P.tolist()
        else:
            i, j = np.nonzero(P)
            doc["format"] = "coo"
            doc["coupling"] = [[int(a), int(b), float(P[a, b])] for a, b in zip(i, j)]
        return json.dumps(doc)

    @classmethod
    def from_json(cls, text: str) -> "TransportPlan":
        doc = json.loads(text)
        n, m = doc["shape"]
        if doc["format"] == "dense":
            P = np.asarray(doc["coupling"], dtype=np.float64).reshape(n, m)
        else:
            P = np.zeros((n, m))
            for i, j, v in doc["coupling"]:
                P[int(i), int(j)] = v
        return cls(P, doc["objective"], P.sum(1), P.sum(0), doc["iterations"],
                   doc["converged"], doc["solver"], doc.get("config", {}), doc.get("value"))


def _make_plan(P, C, solver, iterations, converged, config=None, value=None, objective=None,
               info=None) -> TransportPlan:
    obj = float(np.sum(P * C)) if objective is None else float(objective)
    return TransportPlan(P, obj, P.sum(axis=1), P.sum(axis=0), int(iterations), bool(converged),
                         solver, dict(config or {}), value, dict(info or {}))


def _check_weights(a, b, shape):
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if (a.size, b.size) != tuple(shape):
        raise InvalidParameter(
            f"weights of sizes {a.size}, {b.size} do not match a {shape} cost matrix")
    for w in (a, b):
        if not np.all(np.isfinite(w)) or np.any(w < 0):
            raise InvalidWeights("weights must be finite and nonnegative")
    if a.sum() <= 0 or b.sum() <= 0:
        raise InvalidWeights("weights must carry positive mass")
    return a, b


# -- exact --------------------------------------------------------------------

def solve_exact(a, b, C, max_iter: int = 10_000_000) -> TransportPlan:
    """Exact Kantorovich problem via the network simplex.

    Zero-weight rows and columns are removed before the solve and restored
    as zero lines. The returned ``info`` holds the dual potentials
    (``alpha``, ``beta``) and ``dual_objective``.
    """
    M = _as_values(C)
    a, b = _check_weights(a, b, M.shape)
    sa, sb = a.sum(), b.sum()
    if abs(sa - sb) > MASS_TOL * max(1.0, sa):
        raise MassMismatch(f"total masses differ: {sa!r} vs {sb!r}")
    rows = np.flatnonzero(a > 0)
    cols = np.flatnonzero(b > 0)
    sub = np.ascontiguousarray(M[np.ix_(rows, cols)])
    scale = float(sub.max()) if sub.size else 0.0
    if scale <= 0:
        scale = 1.0
    b_sub = b[cols] * (sa / sb)
    plan_sub, alpha_sub, beta_sub, n_piv, status = _network_simplex(
        a[rows], b_sub, sub / scale, int(max_iter))
    if status == 1:
        raise SolverFailure(f"network simplex hit the pivot limit ({max_iter})")
    if status != 0:
        raise SolverFailure("network simplex reported an unbounded problem")
    if np.max(np.abs(plan_sub.sum(axis=1) - a[rows]), initial=0.0) > 1e-9 * max(1.0, sa):
        raise SolverFailure("network simplex left mass on artificial arcs")
    P = np.zeros(M.shape)
    P[np.ix_(rows, cols)] = plan_sub
    alpha = np.zeros(M.shape[0])
    beta = np.zeros(M.shape[1])
    alpha[rows] = alpha_sub * scale
    beta[cols] = beta_sub * scale
    # zero-weight lines never constrain the dual; pick the tightest feasible value
    if rows.size < M.shape[0]:
        other = np.setdiff1d(np.arange(M.shape[0]), rows)
        alpha[other] = np.min(M[np.ix_(other, cols)] - beta[cols][None, :], axis=1)
    if cols.size < M.shape[1]:
        other = np.setdiff1d(np.arange(M.shape[1]), cols)
        beta[other] = np.min(M[:, other] - alpha[:, None], axis=0)
    dual = float(a @ alpha + b @ beta)
    return _make_plan(P, M, "exact", n_piv, True, {"backend": SIMPLEX_BACKEND},
                      info={"alpha": alpha, "beta": beta, "dual_objective": dual})


# -- entropic -----------------------------------------------------------------

def _gen_kl(p, q) -> float:
    """Generalized KL ``sum p log(p/q) - p + q`` (0 log 0 = 0)."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        return float(np.sum(xlogy(p, p) - xlogy(p, q) - p + q))


WARM_SWEEPS = 50


def _lse(x, axis):
    """Row or column log-sum-exp; empty weights give ``-inf`` entries."""
    top = np.max(x, axis=axis, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    with np.errstate(divide="ignore"):
        return np.log(np.sum(np.exp(x - top), axis=axis)) + np.squeeze(top, axis=axis)


def tau_damping(lam, eps, e):
    """Damping ``tau / (tau + e)`` for the same ``tau`` that gives ``lam`` at ``eps``."""
    if lam >= 1.0:
        return 1.0
    tau = lam * eps / (1.0 - lam)
    return tau / (tau + e)


def _sinkhorn_loop(a, b, M, eps, lam, config: SolverConfig, balanced: bool):
    """Shared potential iterations for the balanced (lam=1) and KL-relaxed solvers.

    The plan is ``a_i b_j exp((f_i + g_j - C_ij) / eps)``. Returns
    ``(P, f, g, iterations, converged, dual_trace, warm_sweeps)``; only the
    sweeps at ``eps`` itself count towards ``max_iters``.
    """
    n, m = M.shape
    with np.errstate(divide="ignore"):
        loga = np.log(a)
        logb = np.log(b)
    f = np.zeros(n)
    g = np.zeros(m)
    converged = False
    trace = []
    it = 0
    warm = 0
    if config.use_log:
        # coarse-to-fine warm start; the final sweeps below run at eps itself
        e = float(M.max(initial=0.0))
        while e > 2.0 * eps:
            e_lam = lam if balanced else tau_damping(lam, eps, e)
            for _ in range(WARM_SWEEPS):
                g_old = g
                f = -e_lam * e * _lse(logb[None, :] + (g[None, :] - M) / e, axis=1)
                g = -e_lam * e * _lse(loga[:, None] + (f[:, None] - M) / e, axis=0)
                warm += 1
                if np.max(np.abs(g - g_old)) <= config.tol * e:
                    break
            e *= 0.5
        for it in range(1, config.max_iters + 1):
            f_old, g_old = f, g
            f = -lam * eps * _lse(logb[None, :] + (g[None, :] - M) / eps, axis=1)
            g = -lam * eps * _lse(loga[:, None] + (f[:, None] - M) / eps, axis=0)
            if balanced:
                logP = loga[:, None] + logb[None, :] + (f[:, None] + g[None, :] - M) / eps
                P = np.exp(logP)
                trace.append(float(a @ f + b @ g - eps * P.sum() + eps))
                err = max(np.max(np.abs(P.sum(1) - a)), np.max(np.abs(P.sum(0) - b)))
            else:
                err = max(np.max(np.abs(f - f_old)), np.max(np.abs(g - g_old))) / eps
            if not np.isfinite(err):
                break
            if err <= config.tol:
                converged = True
                break
        P = np.exp(loga[:, None] + logb[None, :] + (f[:, None] + g[None, :] - M) / eps)
    else:
        K = np.outer(a, b) * np.exp(-M / eps)
        u = np.ones(n)
        v = np.ones(m)
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            for it in range(1, config.max_iters + 1):
                u_old, v_old = u, v
                u = (a / (K @ v)) ** lam
                v = (b / (K.T @ u)) ** lam
                if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
                    u, v = u_old, v_old
                    break
                if balanced:
                    P = u[:, None] * K * v[None, :]
                    f_t, g_t = eps * np.log(u), eps * np.log(v)
                    trace.append(float(a @ f_t + b @ g_t - eps * P.sum() + eps))
                    err = max(np.max(np.abs(P.sum(1) - a)), np.max(np.abs(P.sum(0) - b)))
                else:
                    err = max(np.max(np.abs(np.log(u / u_old))), np.max(np.abs(np.log(v / v_old))))
                if err <= config.tol:
                    converged = True
                    break
            f, g = eps * np.log(u), eps * np.log(v)
        P = u[:, None] * K * v[None, :]
    return P, f, g, it, converged, trace, warm


def sinkhorn(a, b, C, config: Optional[SolverConfig] = None) -> TransportPlan:
    """Entropic OT, ``min <P, C> + eps KL(P | a x b)`` under exact marginals.

    Stops once the largest marginal violation is at most ``config.tol``;
    ``converged`` is false if ``max_iters`` ran out first.
    """
    config = config or SolverConfig()
    M = _as_values(C)
    a, b = _check_weights(a, b, M.shape)
    eps = float(config.epsilon)
    if not eps > 0:
        raise InvalidParameter("sinkhorn needs epsilon > 0")
    if abs(a.sum() - b.sum()) > MASS_TOL * max(1.0, a.sum()):
        raise MassMismatch(f"total masses differ: {a.sum()!r} vs {b.sum()!r}")
    P, f, g, it, converged, trace, warm = _sinkhorn_loop(a, b, M, eps, 1.0, config, balanced=True)
    cost = float(np.sum(P * M))
    value = cost + eps * _gen_kl(P, np.outer(a, b))
    return _make_plan(P, M, "sinkhorn", it, converged, asdict(config), value=value,
                      objective=cost, info={"f": f, "g": g, "dual_trace": trace,
                                                 "warm_sweeps": warm})


def uot_objective(P, a, b, C, eps: float, tau: float) -> float:
    """Penalized unbalanced value at a given coupling."""
    M = _as_values(C)
    return float(np.sum(P * M) + eps * _gen_kl(P, np.outer(a, b))
                 + tau * (_gen_kl(P.sum(1), a) + _gen_kl(P.sum(0), b)))


def sinkhorn_unbalanced(a, b, C, config: Optional[SolverConfig] = None) -> TransportPlan:
    """Entropic unbalanced OT with KL marginal penalties of weight ``tau``.

    Generalized Sinkhorn: each half step is the balanced update damped by
    ``tau / (tau + eps)``. Convergence is measured on the change of the
    log-scalings between sweeps.
    """
    config = config or SolverConfig()
    M = _as_values(C)
    a, b = _check_weights(a, b, M.shape)
    eps, tau = float(config.epsilon), float(config.tau)
    if not eps > 0:
        raise InvalidParameter("sinkhorn_unbalanced needs epsilon > 0")
    if not tau > 0:
        raise InvalidParameter("sinkhorn_unbalanced needs tau > 0")
    lam = tau / (tau + eps)
    P, f, g, it, converged, _, warm = _sinkhorn_loop(a, b, M, eps, lam, config, balanced=False)
    value = uot_objective(P, a, b, M, eps, tau)
    return _make_plan(P, M, "uot", it, converged, asdict(config), value=value, objective=value,
                      info={"f": f, "g": g, "transport_cost": float(np.sum(P * M)),
                                                "warm_sweeps": warm})


# -- partial / truncated / robust --------------------------------------------

def partial_ot(a, b, C, m: float) -> TransportPlan:
    """Exact partial OT moving total mass ``m``.

    Solved as a balanced problem with one dummy row and column; the dummy
    pair costs ``2 max(C) + 1`` so no mass is routed through it.
    """
    M = _as_values(C)
    a, b = _check_weights(a, b, M.shape)
    sa, sb = a.sum(), b.sum()
    top = min(sa, sb)
    if not (m > 0 and m <= top + MASS_TOL):
        raise InvalidMass(f"partial mass must lie in (0, {top:g}], got {m}")
    m = min(float(m), top)
    n, k = M.shape
    aug = np.zeros((n + 1, k + 1))
    aug[:n, :k] = M
    aug[n, k] = 2.0 * float(M.max()) + 1.0
    a_aug = np.append(a, max(sb - m, 0.0))
    b_aug = np.append(b, max(sa - m, 0.0))
    b_aug *= a_aug.sum() / b_aug.sum()
    full = solve_exact(a_aug, b_aug, aug)
    P = np.array(full.coupling[:n, :k])
    return _make_plan(P, M, "partial", full.iterations, True,
                      {"m": m, "backend": SIMPLEX_BACKEND},
                      info={"dummy_dummy_mass": float(full.coupling[n, k])})


def truncated_ot(a, b, C, lam: float) -> TransportPlan:
    """Exact OT under the truncated cost ``min(C, 2 lam)``."""
    if not lam > 0:
        raise InvalidParameter(f"lambda must be positive, got {lam}")
    M = _as_values(C)
    Mt = np.minimum(M, 2.0 * lam)
    base = solve_exact(a, b, Mt)
    return _make_plan(base.coupling, Mt, "truncated", base.iterations, True,
                      {"lambda": float(lam), "backend": SIMPLEX_BACKEND}, info=base.info)


def rho_to_lambda(C, rho: float) -> float:
    """Truncation level for a trimming budget ``rho``.

    Heuristic calibration: ``2 lambda`` is the empirical ``(1 - rho)``
    quantile of the cost entries, so roughly a fraction ``rho`` of the pairs
    are capped.
    """
    M = _as_values(C)
    q = float(np.quantile(M, 1.0 - rho))
    return max(q, np.finfo(float).tiny) / 2.0


def rot(a, b, C, rho: float, mode: str = "partial") -> TransportPlan:
    """Robust OT with outlier budget ``rho`` via partial or truncated OT.

    ``mode="partial"`` transports mass ``(1 - 2 rho) min(|a|, |b|)``;
    ``mode="truncated"`` truncates the cost at the level of
    :func:`rho_to_lambda`. ``rho = 0`` is the exact problem.
    """
    if not 0 <= rho < 0.5:
        raise InvalidParameter(f"rho must lie in [0, 0.5), got {rho}")
    if mode not in ("partial", "truncated"):
        raise InvalidParameter(f"unknown rot mode {mode!r}")
    if rho == 0:
        plan = solve_exact(a, b, C)
    elif mode == "partial":
        mass = (1.0 - 2.0 * rho) * min(float(np.sum(a)), float(np.sum(b)))
        plan = partial_ot(a, b, C, mass)
    else:
        plan = truncated_ot(a, b, C, rho_to_lambda(C, rho))
    cfg = dict(plan.config, rho=rho, mode=mode)
    return TransportPlan(plan.coupling, plan.objective, plan.row_marginals, plan.col_marginals,
                         plan.iterations, plan.converged, f"rot-{mode}", cfg, plan.value, plan.info)


SOLVERS = ("exact", "sinkhorn", "uot", "partial", "truncated")


def solve(name: str, a, b, C, config: Optional[SolverConfig] = None,
          mass: Optional[float] = None, lam: Optional[float] = None) -> TransportPlan:
    """Dispatch to a solver by name (one of :data:`SOLVERS`)."""
    if name == "exact":
        return solve_exact(a, b, C)
    if name == "sinkhorn":
        return sinkhorn(a, b, C, config)
    if name == "uot":
        return sinkhorn_unbalanced(a, b, C, config)
    if name == "partial":
        if mass is None:
            raise InvalidParameter("partial OT needs a mass")
        return partial_ot(a, b, C, mass)
    if name == "truncated":
        if lam is None:
            raise InvalidParameter("truncated OT needs lambda")
        return truncated_ot(a, b, C, lam)
    raise InvalidParameter(f"unknown solver {name!r}; expected one of {SOLVERS}")


def wasserstein(mu: DiscreteMeasure, nu: DiscreteMeasure, kind=EUCLIDEAN) -> float:
    """Exact OT cost between two measures of equal mass."""
    return solve_exact(mu.weights, nu.weights, cost_matrix(mu, nu, kind)).objective
