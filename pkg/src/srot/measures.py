"""Discrete measures, contaminated dataset generators and measure arithmetic.

Every generator draws from ``numpy.random.Philox`` (a counter-based 64-bit
generator) seeded with the user seed, so datasets are bit-identical across
runs and platforms for a given numpy release.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import (
    DefinitionCheckFailed,
    EmptyMeasure,
    InvalidDataset,
    InvalidMass,
    InvalidPoint,
    InvalidWeights,
)

PROBABILITY_TOL = 1e-9

CLEAN = "clean"
TYPE_I = "TypeI"
TYPE_II = "TypeII"


def make_rng(seed: int) -> np.random.Generator:
    """Return the package-wide random generator for ``seed``."""
    return np.random.Generator(np.random.Philox(int(seed)))


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, dtype=np.float64, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class DiscreteMeasure:
    """Weighted point cloud ``sum_i w_i delta_{x_i}``."""

    points: np.ndarray
    weights: np.ndarray
    name: str = ""

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or pts.shape[0] < 1:
            raise EmptyMeasure("a measure needs at least one support point")
        if not np.all(np.isfinite(pts)):
            raise InvalidPoint("support points must be finite")
        w = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if w.shape[0] != pts.shape[0]:
            raise InvalidWeights(
                f"got {w.shape[0]} weights for {pts.shape[0]} points")
        if not np.all(np.isfinite(w)) or np.any(w < 0):
            raise InvalidWeights("weights must be finite and nonnegative")
        object.__setattr__(self, "points", _frozen(pts))
        object.__setattr__(self, "weights", _frozen(w))

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def mass(self) -> float:
        return float(self.weights.sum())

    @property
    def is_probability(self) -> bool:
        return abs(self.mass - 1.0) <= PROBABILITY_TOL

    def with_weights(self, weights, name: Optional[str] = None) -> "DiscreteMeasure":
        return DiscreteMeasure(self.points, weights, self.name if name is None else name)

    def with_points(self, points) -> "DiscreteMeasure":
        return DiscreteMeasure(points, self.weights, self.name)

    def subset(self, mask, name: Optional[str] = None) -> "DiscreteMeasure":
        """Uniform empirical measure on the selected points."""
        mask = np.asarray(mask, dtype=bool)
        if not mask.any():
            raise EmptyMeasure("subset selects no point")
        return make_empirical(self.points[mask], name=self.name if name is None else name)


def make_empirical(points, weights=None, name: str = "") -> DiscreteMeasure:
    """Build a measure, defaulting to uniform ``1/n`` weights.

    >>> make_empirical([[0.0], [1.0], [2.0]]).weights.tolist()
    [0.3333333333333333, 0.3333333333333333, 0.3333333333333333]
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts[:, None]
    if pts.shape[0] < 1:
        raise EmptyMeasure("a measure needs at least one support point")
    if weights is None:
        weights = np.full(pts.shape[0], 1.0 / pts.shape[0])
    return DiscreteMeasure(pts, weights, name)


def rescale_mass(measure: DiscreteMeasure, m: float) -> DiscreteMeasure:
    """Rescale the weights so that they sum to ``m``."""
    if not (m > 0 and np.isfinite(m)):
        raise InvalidMass(f"target mass must be positive, got {m}")
    total = measure.mass
    if total <= 0:
        raise EmptyMeasure("cannot rescale a measure with zero mass")
    return measure.with_weights(measure.weights * (m / total))


def apply_hard_mask(measure: DiscreteMeasure, keep) -> DiscreteMeasure:
    """Drop the points where ``keep`` is false and renormalize uniformly."""
    keep = np.asarray(keep, dtype=bool)
    if keep.shape != (measure.n,):
        raise InvalidWeights("mask length does not match the measure")
    if not keep.any():
        raise EmptyMeasure("every sample was dropped")
    if keep.all():
        return measure
    return make_empirical(measure.points[keep], name=measure.name)


@dataclass(frozen=True)
class ContaminatedDataset:
    """Source/target measures with ground-truth outlier annotations.

    The truth arrays are for evaluation only; no solver reads them.
    ``source_types`` / ``target_types`` hold one of ``"clean"``,
    ``"TypeI"`` or ``"TypeII"`` per sample.
    """

    source: DiscreteMeasure
    target: DiscreteMeasure
    source_outlier_truth: np.ndarray
    target_outlier_truth: np.ndarray
    source_types: tuple
    target_types: tuple
    source_labels: Optional[np.ndarray] = None
    target_labels: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        s = np.asarray(self.source_outlier_truth, dtype=bool)
        t = np.asarray(self.target_outlier_truth, dtype=bool)
        if s.shape != (self.source.n,) or t.shape != (self.target.n,):
            raise InvalidDataset("truth masks must match the measure sizes")
        if len(self.source_types) != self.source.n or len(self.target_types) != self.target.n:
            raise InvalidDataset("type tags must match the measure sizes")
        s.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "source_outlier_truth", s)
        object.__setattr__(self, "target_outlier_truth", t)
        object.__setattr__(self, "source_types", tuple(self.source_types))
        object.__setattr__(self, "target_types", tuple(self.target_types))
        for attr in ("source_labels", "target_labels"):
            val = getattr(self, attr)
            if val is not None:
                val = np.asarray(val, dtype=np.int64)
                val.setflags(write=False)
                object.__setattr__(self, attr, val)

    @property
    def dim(self) -> int:
        return self.source.dim

    def source_clean(self) -> DiscreteMeasure:
        return self.source.subset(~self.source_outlier_truth, name="source_clean")

    def target_clean(self) -> DiscreteMeasure:
        return self.target.subset(~self.target_outlier_truth, name="target_clean")


# -- generators ---------------------------------------------------------------

def _uniform_box(rng, center, half_width, n):
    center = np.asarray(center, dtype=np.float64)
    return center + rng.uniform(-half_width, half_width, size=(n, center.size))


def _uniform_annulus(rng, r_min, r_max, n):
    r = np.sqrt(rng.uniform(r_min ** 2, r_max ** 2, size=n))
    theta = rng.uniform(0.0, 2 * np.pi, size=n)
    return np.column_stack([r * np.cos(theta), r * np.sin(theta)])


def _wasserstein(x, y) -> float:
    from .solvers import cost_matrix, solve_exact

    mu, nu = make_empirical(x), make_empirical(y)
    return solve_exact(mu.weights, nu.weights, cost_matrix(mu, nu)).objective


def check_outlier_types(ds: ContaminatedDataset) -> dict:
    """Verify the outlier-type inequalities with exact OT and Euclidean cost.

    For each side and each outlier type present, compares ``W(outliers, other)``
    against ``W(clean, other)`` where ``other`` is the full opposite measure.
    Raises :class:`DefinitionCheckFailed` on a violation and returns the
    distances otherwise.
    """
    report = {}
    sides = (
        ("source", ds.source, ds.source_types, ds.target),
        ("target", ds.target, ds.target_types, ds.source),
    )
    for side, mu, types, other in sides:
        types = np.asarray(types)
        clean = types == CLEAN
        for tag in (TYPE_I, TYPE_II):
            sel = types == tag
            if not sel.any():
                continue
            if not clean.any():
                raise DefinitionCheckFailed(f"{side}: no clean sample to compare with")
            w_out = _wasserstein(mu.points[sel], other.points)
            w_clean = _wasserstein(mu.points[clean], other.points)
            report[(side, tag)] = (w_out, w_clean)
            ok = w_clean <= w_out if tag == TYPE_I else w_out < w_clean
            if not ok:
                raise DefinitionCheckFailed(
                    f"{side} {tag} outliers: W(outliers, other)={w_out:.6g}, "
                    f"W(clean, other)={w_clean:.6g}")
    return report


def _build(src_pts, src_types, tgt_pts, tgt_types, meta, src_labels=None,
           tgt_labels=None, check=True) -> ContaminatedDataset:
    src_types = list(src_types)
    tgt_types = list(tgt_types)
    ds = ContaminatedDataset(
        source=make_empirical(src_pts, name="source"),
        target=make_empirical(tgt_pts, name="target"),
        source_outlier_truth=np.array([t != CLEAN for t in src_types], dtype=bool),
        target_outlier_truth=np.array([t != CLEAN for t in tgt_types], dtype=bool),
        source_types=src_types,
        target_types=tgt_types,
        source_labels=src_labels,
        target_labels=tgt_labels,
        meta=dict(meta),
    )
    if check:
        check_outlier_types(ds)
    return ds


def _check_count(name, value, minimum=0):
    if int(value) != value or value < minimum:
        raise InvalidDataset(f"{name} must be an integer >= {minimum}, got {value}")


TOY_CENTERS = ((-0.5, 0.0), (0.5, 0.0))
TOY_HALF_WIDTH = 0.25


def gen_toy_2d(n_clean_per_side: int, n_type1: int, n_type2: int, seed: int = 0
               ) -> ContaminatedDataset:
    """Two uniform square blobs with far type-I and swapped type-II outliers.

    The source holds ``n_clean_per_side`` clean points plus ``n_type1``
    type-I outliers on an annulus of radius 8 to 10 times the distance
    between blob centers. The target holds ``n_clean_per_side`` clean points
    plus ``n_type2`` type-II outliers drawn from the source blob itself.
    """
    _check_count("n_clean_per_side", n_clean_per_side, 1)
    _check_count("n_type1", n_type1)
    _check_count("n_type2", n_type2)
    rng = make_rng(seed)
    c_s, c_t = np.array(TOY_CENTERS[0]), np.array(TOY_CENTERS[1])
    dist = float(np.linalg.norm(c_t - c_s))
    src_clean = _uniform_box(rng, c_s, TOY_HALF_WIDTH, n_clean_per_side)
    tgt_clean = _uniform_box(rng, c_t, TOY_HALF_WIDTH, n_clean_per_side)
    type1 = (c_s + c_t) / 2 + _uniform_annulus(rng, 8 * dist, 10 * dist, n_type1)
    type2 = _uniform_box(rng, c_s, TOY_HALF_WIDTH, n_type2)
    src = np.vstack([src_clean, type1])
    tgt = np.vstack([tgt_clean, type2])
    gap = dist - 2 * TOY_HALF_WIDTH
    meta = {"generator": "toy2d", "seed": seed, "blob_distance": dist, "blob_gap": gap,
            "eta": 0.5 * gap}
    return _build(src, [CLEAN] * n_clean_per_side + [TYPE_I] * n_type1,
                  tgt, [CLEAN] * n_clean_per_side + [TYPE_II] * n_type2, meta)


FLOW_TARGET_CENTER = (0.0, 0.0)
FLOW_TARGET_STD = 0.3
FLOW_RING_CENTER = (2.5, 0.0)
FLOW_RING_RADII = (0.6, 1.0)
# perturbation radius for the classifier; larger radii let the constant
# classifier win under the default CE weight
FLOW_ETA = 0.25


def gen_flow_2d(n: int, kappa: float, seed: int = 0) -> ContaminatedDataset:
    """Gradient-flow dataset: a ring ``alpha`` and a Gaussian ``beta_0``.

    ``alpha = (1 - kappa) alpha_c + kappa beta``: a fraction ``kappa`` of the
    source points (the fixed measure of the flow) are drawn from the
    distribution of ``beta_0`` and are therefore second-type outliers. The
    target ``beta_0`` is the initial support of the flowing measure.
    """
    _check_count("n", n, 1)
    if not 0 <= kappa < 1:
        raise InvalidDataset(f"kappa must lie in [0, 1), got {kappa}")
    rng = make_rng(seed)
    n_out = int(round(kappa * n))
    n_clean = n - n_out
    if n_clean < 1:
        raise InvalidDataset("no clean source sample left")
    center = np.asarray(FLOW_RING_CENTER)
    ring = center + _uniform_annulus(rng, *FLOW_RING_RADII, n_clean)
    outliers = np.asarray(FLOW_TARGET_CENTER) + FLOW_TARGET_STD * rng.standard_normal((n_out, 2))
    beta0 = np.asarray(FLOW_TARGET_CENTER) + FLOW_TARGET_STD * rng.standard_normal((n, 2))
    dist = float(np.linalg.norm(center - np.asarray(FLOW_TARGET_CENTER)))
    meta = {"generator": "flow2d", "seed": seed, "kappa": kappa,
            "blob_distance": dist, "eta": FLOW_ETA}
    return _build(np.vstack([ring, outliers]), [CLEAN] * n_clean + [TYPE_II] * n_out,
                  beta0, [CLEAN] * n, meta)


def gen_highdim_analog(d: int, n_clean: int, n_outlier: int, seed: int = 0
                       ) -> ContaminatedDataset:
    """Desk-scale high-dimensional flow dataset.

    The clean source is a curved three-dimensional sheet embedded in
    ``R^d`` away from the origin; outliers and the whole target are draws
    from ``N(0, 0.01 I_d)``.
    """
    _check_count("d", d, 2)
    _check_count("n_clean", n_clean, 1)
    _check_count("n_outlier", n_outlier)
    rng = make_rng(seed)
    basis, _ = np.linalg.qr(rng.standard_normal((d, min(d, 4))))
    mean = basis[:, 0]
    k = basis.shape[1] - 1
    latent = rng.uniform(-1.0, 1.0, size=(n_clean, max(k, 1)))[:, :k]
    sheet = latent @ basis[:, 1:].T * 0.3
    bend = 0.15 * (latent ** 2).sum(axis=1, keepdims=True) * mean
    clean = mean + sheet + bend + 0.02 * rng.standard_normal((n_clean, d))
    sd = np.sqrt(0.01)
    outliers = sd * rng.standard_normal((n_outlier, d))
    beta = sd * rng.standard_normal((n_clean + n_outlier, d))
    meta = {"generator": "highdim", "seed": seed, "blob_distance": 1.0, "eta": 0.5}
    return _build(np.vstack([clean, outliers]), [CLEAN] * n_clean + [TYPE_II] * n_outlier,
                  beta, [CLEAN] * (n_clean + n_outlier), meta)


LP_SOURCE_CENTERS = ((0.0, 0.0), (0.0, 3.0))
LP_EXTRA_CENTER = (-4.0, 6.0)
LP_SHIFT = (2.0, 0.0)
LP_STD = 0.4


def gen_labelprop_analog(seed: int = 0, n_per_class: int = 200, n_extra: int = 100,
                         n_swapped_per_class: int = 50, d: int = 2) -> ContaminatedDataset:
    """Gaussian stand-in for the digits label-propagation benchmark.

    Source: ``n_per_class`` samples of classes 0 and 1 from the source
    domain plus ``n_extra`` samples of a third class (label 2) far away
    (first-type outliers). Target: ``n_per_class`` samples of classes 0 and 1
    from a shifted domain plus ``n_swapped_per_class`` samples per class
    drawn from the *source* domain (second-type outliers). Extra dimensions
    beyond two carry isotropic noise.
    """
    _check_count("d", d, 2)
    rng = make_rng(seed)

    def blob(center, count):
        c = np.zeros(d)
        c[:2] = center
        return c + LP_STD * rng.standard_normal((count, d))

    shift = np.asarray(LP_SHIFT)
    src_parts, src_lab = [], []
    for k, c in enumerate(LP_SOURCE_CENTERS):
        src_parts.append(blob(c, n_per_class))
        src_lab += [k] * n_per_class
    src_parts.append(blob(LP_EXTRA_CENTER, n_extra))
    src_lab += [2] * n_extra
    tgt_parts, tgt_lab = [], []
    for k, c in enumerate(LP_SOURCE_CENTERS):
        tgt_parts.append(blob(np.asarray(c) + shift, n_per_class))
        tgt_lab += [k] * n_per_class
    for k, c in enumerate(LP_SOURCE_CENTERS):
        tgt_parts.append(blob(c, n_swapped_per_class))
        tgt_lab += [k] * n_swapped_per_class
    n_src_clean = 2 * n_per_class
    # classifier settings that keep the adversarial term from flattening the
    # decision function on this geometry
    meta = {"generator": "labelprop", "seed": seed, "n_classes": 3,
            "blob_distance": float(np.linalg.norm(shift)), "eta": 0.25, "omega": 1.0}
    return _build(
        np.vstack(src_parts), [CLEAN] * n_src_clean + [TYPE_I] * n_extra,
        np.vstack(tgt_parts), [CLEAN] * (2 * n_per_class) + [TYPE_II] * (2 * n_swapped_per_class),
        meta, src_labels=src_lab, tgt_labels=tgt_lab)


# -- CSV persistence ----------------------------------------------------------

def save_dataset_csv(ds: ContaminatedDataset, path) -> None:
    """Write ``x0..x{d-1},weight,side,is_outlier,outlier_type[,label]`` rows."""
    d = ds.dim
    with_labels = ds.source_labels is not None and ds.target_labels is not None
    header = [f"x{k}" for k in range(d)] + ["weight", "side", "is_outlier", "outlier_type"]
    if with_labels:
        header.append("label")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for side, mu, truth, types, labels in (
            ("source", ds.source, ds.source_outlier_truth, ds.source_types, ds.source_labels),
            ("target", ds.target, ds.target_outlier_truth, ds.target_types, ds.target_labels),
        ):
            for i in range(mu.n):
                row = [repr(float(v)) for v in mu.points[i]]
                row += [repr(float(mu.weights[i])), side, int(truth[i]),
                        "" if types[i] == CLEAN else types[i]]
                if with_labels:
                    row.append(int(labels[i]))
                writer.writerow(row)
    meta = {k: v for k, v in ds.meta.items() if k != "path"}
    _meta_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True))


def _meta_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".meta.json")


def load_dataset_csv(path) -> ContaminatedDataset:
    """Read a dataset written by :func:`save_dataset_csv`."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        coords = [h for h in header if h.startswith("x") and h[1:].isdigit()]
        if not coords or "weight" not in header or "side" not in header:
            raise InvalidDataset(f"{path}: missing required columns")
        rows = {"source": [], "target": []}
        for row in reader:
            side = row["side"]
            if side not in rows:
                raise InvalidDataset(f"{path}: unknown side {side!r}")
            rows[side].append(row)
    if not rows["source"] or not rows["target"]:
        raise InvalidDataset(f"{path}: both sides need at least one row")
    has_labels = "label" in header

    def unpack(side_rows):
        pts = np.array([[float(r[c]) for c in coords] for r in side_rows])
        w = np.array([float(r["weight"]) for r in side_rows])
        truth = np.array([r.get("is_outlier", "0") in ("1", "True", "true") for r in side_rows])
        types = [r.get("outlier_type") or CLEAN for r in side_rows]
        labels = np.array([int(r["label"]) for r in side_rows]) if has_labels else None
        return pts, w, truth, types, labels

    meta = {}
    if _meta_path(path).exists():
        meta = json.loads(_meta_path(path).read_text())
    meta["path"] = str(path)
    sp, sw, st, sty, sl = unpack(rows["source"])
    tp, tw, tt, tty, tl = unpack(rows["target"])
    return ContaminatedDataset(
        source=DiscreteMeasure(sp, sw, "source"),
        target=DiscreteMeasure(tp, tw, "target"),
        source_outlier_truth=st,
        target_outlier_truth=tt,
        source_types=sty,
        target_types=tty,
        source_labels=sl,
        target_labels=tl,
        meta=meta,
    )


def side_distance(ds: ContaminatedDataset) -> float:
    """Distance between the clean source and clean target means."""
    return float(np.linalg.norm(ds.source_clean().points.mean(0) - ds.target_clean().points.mean(0)))
