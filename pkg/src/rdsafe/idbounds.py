"""Partial identification of cross-group difference functions.

For each treatment arm and ordered group pair, a two-stage pseudo-outcome
regression recovers the observable difference curve on the region where both
groups share that treatment status. Its one-sided value at the nearest
baseline cutoff anchors Lipschitz envelopes whose slope (the smoothness
parameter) is read off the curve's own first derivative.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .core import Dataset, EstimationError, StudyDesign, ThresholdPolicy
from .estimator import interval_index, record_folds
from .smooth import CurveFit, LocalPolyConfig, boundary_limit


def anchor_rank(w: int, g: int, gp: int) -> int:
    """The group whose cutoff bounds the identified region: max rank for the
    treated arm, min rank for the control arm."""
    return max(g, gp) if w == 1 else min(g, gp)


def required_pairs(design: StudyDesign):
    """All (w, g, g') triples appearing in the disagreement decomposition."""
    q = design.q
    pairs = [(1, g, gp) for g in range(2, q + 1) for gp in range(1, g)]
    pairs += [(0, g, gp) for g in range(1, q) for gp in range(g + 1, q + 1)]
    return pairs


def difference_pseudo_outcomes(dataset: Dataset, nuisances, w: int, g: int, gp: int):
    """Doubly-robust pseudo-outcomes for the difference m(w,x,g) - m(w,x,gp).

    Uses records with treatment w from groups g and gp inside the identified
    region, and each record's out-of-fold nuisance fits.
    """
    design = dataset.design
    anchor_cut = design.cutoff_of_rank(anchor_rank(w, g, gp))
    if w == 1:
        region = dataset.x >= anchor_cut
        side = "above"
    else:
        region = dataset.x <= anchor_cut
        side = "below"
    mask = region & (dataset.w == w) & ((dataset.rank == g) | (dataset.rank == gp))
    if not mask.any():
        raise EstimationError(
            f"no records with w={w} from groups ranked {g} and {gp} inside the "
            f"identified region ({'x >= ' if w == 1 else 'x <= '}{anchor_cut})"
        )
    x = dataset.x[mask]
    y = dataset.y[mask]
    rank = dataset.rank[mask]
    folds = record_folds(nuisances, len(dataset))[mask]
    m_g = nuisances.cond_mean(x, folds, g, side)
    m_gp = nuisances.cond_mean(x, folds, gp, side)
    e = nuisances.propensity(x, folds)
    is_g = rank == g
    is_gp = rank == gp
    phi = (
        m_g
        - m_gp
        + np.where(is_g, (y - m_g) / e[:, g - 1], 0.0)
        - np.where(is_gp, (y - m_gp) / e[:, gp - 1], 0.0)
    )
    return x, phi


@dataclass(frozen=True)
class DifferenceCurve:
    """Fitted difference curve for one (w, g, g') triple on its identified region."""

    w: int
    g: int
    gp: int
    curve: CurveFit
    region: tuple
    anchor_cutoff: float


def fit_difference_curve(
    x, phi, w: int, g: int, gp: int, design: StudyDesign,
    config: LocalPolyConfig | None = None,
) -> DifferenceCurve:
    """Local quadratic regression of pseudo-outcomes on x inside the region."""
    config = config or LocalPolyConfig(degree=2)
    x = np.asarray(x, dtype=float)
    phi = np.asarray(phi, dtype=float)
    if x.size < 5:
        raise EstimationError(
            f"difference curve for (w={w}, g={g}, g'={gp}) needs at least 5 "
            f"pseudo-outcome pairs, got {x.size}"
        )
    curve = CurveFit(x, phi, config)
    anchor_cut = design.cutoff_of_rank(anchor_rank(w, g, gp))
    if w == 1:
        region = (anchor_cut, float(x.max()))
    else:
        region = (float(x.min()), anchor_cut)
    return DifferenceCurve(w, g, gp, curve, region, anchor_cut)


def estimate_difference_curve(
    dataset: Dataset, nuisances, w: int, g: int, gp: int,
    config: LocalPolyConfig | None = None,
) -> DifferenceCurve:
    x, phi = difference_pseudo_outcomes(dataset, nuisances, w, g, gp)
    return fit_difference_curve(x, phi, w, g, gp, dataset.design, config)


def boundary_difference(curve: DifferenceCurve) -> float:
    """One-sided local-linear value of the difference curve at the anchor cutoff."""
    pts = np.column_stack([curve.curve.x, curve.curve.y])
    side = "from_above" if curve.w == 1 else "from_below"
    cfg = LocalPolyConfig(degree=1, kernel=curve.curve.config.kernel)
    return boundary_limit(pts, curve.anchor_cutoff, side, cfg)


# Fraction of the identified range excluded at each end of the derivative grid;
# derivative estimates at the extreme edges of local fits are unstable.
LAMBDA_EDGE_BUFFER = 0.05


def select_smoothness(curve: DifferenceCurve, grid_size: int = 50, multiplier: float = 1.0) -> float:
    """Smoothness parameter: multiplier times the max |first derivative| on a grid."""
    if grid_size < 2:
        raise ValueError(f"grid size must be at least 2, got {grid_size}")
    lo, hi = curve.curve.support
    lo = max(lo, curve.region[0])
    hi = min(hi, curve.region[1])
    buf = LAMBDA_EDGE_BUFFER * (hi - lo)
    grid = np.linspace(lo + buf, hi - buf, grid_size)
    derivs = curve.curve.derivatives(grid)
    return float(multiplier * np.max(np.abs(derivs)))


@dataclass(frozen=True)
class SmoothnessParams:
    """Base smoothness estimates per (w, g, g') and a global multiplier."""

    lam: dict
    multiplier: float = 1.0

    def effective(self, w: int, g: int, gp: int) -> float:
        return self.multiplier * self.lam[(w, g, gp)]


class BoundModel:
    """Pointwise Lipschitz envelopes around the boundary difference estimates.

    lower/upper(w, x, g, g') = d_boundary -/+ lambda_eff * |x - anchor cutoff|.
    """

    def __init__(self, design: StudyDesign, boundary: dict, params: SmoothnessParams):
        q = design.q
        self.design = design
        self.boundary = dict(boundary)
        self.params = params
        self._d0 = {0: np.full((q + 1, q + 1), np.nan), 1: np.full((q + 1, q + 1), np.nan)}
        self._lam = {0: np.full((q + 1, q + 1), np.nan), 1: np.full((q + 1, q + 1), np.nan)}
        self._anchor = {0: np.full((q + 1, q + 1), np.nan), 1: np.full((q + 1, q + 1), np.nan)}
        for (w, g, gp), d0 in boundary.items():
            self._d0[w][g, gp] = d0
            self._lam[w][g, gp] = params.effective(w, g, gp)
            self._anchor[w][g, gp] = design.cutoff_of_rank(anchor_rank(w, g, gp))

    def _lookup(self, w, x, g, gp, sign):
        x = np.asarray(x, dtype=float)
        g = np.asarray(g, dtype=np.int64)
        gp = np.asarray(gp, dtype=np.int64)
        d0 = self._d0[w][g, gp]
        lam = self._lam[w][g, gp]
        anchor = self._anchor[w][g, gp]
        if np.isnan(d0).any():
            bad_g = np.atleast_1d(g)[np.atleast_1d(np.isnan(d0))][0]
            bad_gp = np.atleast_1d(gp)[np.atleast_1d(np.isnan(d0))][0]
            raise EstimationError(f"no bound estimated for pair (w={w}, g={bad_g}, g'={bad_gp})")
        return d0 + sign * lam * np.abs(x - anchor)

    def lower(self, w: int, x, g, gp):
        out = self._lookup(w, x, g, gp, -1.0)
        return float(out) if np.ndim(x) == 0 and np.ndim(g) == 0 else out

    def upper(self, w: int, x, g, gp):
        out = self._lookup(w, x, g, gp, +1.0)
        return float(out) if np.ndim(x) == 0 and np.ndim(g) == 0 else out

    def export_curves_csv(self, grid_size: int = 101) -> str:
        """Bound envelopes on an x grid over [c_1, c_Q], as CSV for plotting."""
        design = self.design
        xs = np.linspace(design.c_min, design.c_max, grid_size)
        out = io.StringIO()
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(["w", "g", "g_ref", "x", "b_lower", "b_upper"])
        for (w, g, gp) in sorted(self.boundary):
            lo = self.lower(w, xs, np.full(xs.size, g), np.full(xs.size, gp))
            hi = self.upper(w, xs, np.full(xs.size, g), np.full(xs.size, gp))
            for xv, lv, hv in zip(xs, lo, hi):
                writer.writerow([w, design.label_of(g), design.label_of(gp),
                                 repr(float(xv)), repr(float(lv)), repr(float(hv))])
        return out.getvalue()


def fit_all_difference_curves(
    dataset: Dataset, nuisances, config: LocalPolyConfig | None = None
) -> dict:
    """Fit difference curves for every required (w, g, g') pair."""
    curves = {}
    for (w, g, gp) in required_pairs(dataset.design):
        try:
            curves[(w, g, gp)] = estimate_difference_curve(dataset, nuisances, w, g, gp, config)
        except EstimationError as exc:
            raise EstimationError(
                f"could not estimate the difference curve for pair "
                f"(w={w}, g={g}, g'={gp}): {exc}"
            ) from exc
    return curves


def estimate_smoothness(curves: dict, grid_size: int = 50, multiplier: float = 1.0) -> SmoothnessParams:
    """Data-driven base smoothness parameters from fitted difference curves."""
    lam = {key: select_smoothness(c, grid_size=grid_size, multiplier=1.0) for key, c in curves.items()}
    return SmoothnessParams(lam=lam, multiplier=multiplier)


def build_bound_model(
    dataset: Dataset,
    nuisances,
    params: SmoothnessParams | None = None,
    *,
    curves: dict | None = None,
    curve_config: LocalPolyConfig | None = None,
    grid_size: int = 50,
    multiplier: float = 1.0,
) -> BoundModel:
    """Estimate boundary differences and assemble the empirical bound envelopes.

    If `params` is omitted the smoothness parameters are selected from the
    fitted curves' first derivatives; pass precomputed `curves` to avoid
    refitting during sensitivity sweeps.
    """
    if curves is None:
        curves = fit_all_difference_curves(dataset, nuisances, curve_config)
    boundary = {key: boundary_difference(c) for key, c in curves.items()}
    if params is None:
        params = estimate_smoothness(curves, grid_size=grid_size, multiplier=multiplier)
    missing = set(boundary) - set(params.lam)
    if missing:
        raise EstimationError(f"smoothness parameters missing for pairs {sorted(missing)}")
    return BoundModel(dataset.design, boundary, params)


def disagreement_terms(dataset: Dataset, policy: ThresholdPolicy, baseline: ThresholdPolicy):
    """Per-record disagreement structure: masks and reference ranks.

    Returns (newly_treated_mask, newly_untreated_mask, ref_rank) where
    ref_rank holds the interval-determined comparison group for records inside
    [c_1, c_Q] (the lower interval endpoint; the newly-untreated branch uses
    ref_rank + 1).
    """
    design = dataset.design
    pi = policy.indicator(dataset.x, dataset.rank)
    tilde = baseline.indicator(dataset.x, dataset.rank)
    newly_treated = pi & ~tilde
    newly_untreated = ~pi & tilde
    ref = np.zeros(len(dataset), dtype=np.int64)
    in_r = (dataset.x >= design.c_min) & (dataset.x <= design.c_max)
    ref[in_r] = interval_index(dataset.x[in_r], design)
    return newly_treated, newly_untreated, ref


def worst_case_xi2(dataset: Dataset, policy: ThresholdPolicy, baseline: ThresholdPolicy,
                   bounds: BoundModel) -> float:
    """Worst-case partially identified disagreement term (lower envelopes)."""
    newly_treated, newly_untreated, ref = disagreement_terms(dataset, policy, baseline)
    acc = np.zeros(len(dataset))
    nt = np.flatnonzero(newly_treated)
    if nt.size:
        acc[nt] = bounds.lower(1, dataset.x[nt], dataset.rank[nt], ref[nt])
    nu = np.flatnonzero(newly_untreated)
    if nu.size:
        acc[nu] = bounds.lower(0, dataset.x[nu], dataset.rank[nu], ref[nu] + 1)
    return float(np.sum(acc) / len(dataset))
