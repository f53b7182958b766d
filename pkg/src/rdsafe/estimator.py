"""Cross-fitting orchestration and the point-identified objective components.

The empirical objective splits into the agreement term (sample analog of the
identified value), the cross-fitted doubly-robust disagreement term built from
per-record scores, and the partially identified term handled in `idbounds`.

Nuisance conditional-mean curves are always fit on the raw observed outcome;
cost-adjusted utilities are applied analytically downstream (the treatment is
deterministic given (x, g), so u(y, w) shifts the conditional mean by a known
constant). This is what lets a sensitivity sweep reuse one set of fits.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Dataset, EstimationError, ThresholdPolicy, UtilityConfig
from .smooth import CurveFit, LocalPolyConfig, PropensityModel, _fit_propensity_arrays


@dataclass(frozen=True)
class FoldAssignment:
    """A stratified partition of record indices into K folds."""

    n_folds: int
    fold_of: np.ndarray

    def __post_init__(self):
        self.fold_of.flags.writeable = False


def make_folds(dataset: Dataset, k: int, seed: int) -> FoldAssignment:
    """Random K-fold split, stratified so per-group fold counts differ by <= 1."""
    if k < 2:
        raise ValueError(f"need at least 2 folds, got {k}")
    rng = np.random.default_rng(seed)
    fold_of = np.empty(len(dataset), dtype=np.int64)
    for rank in range(1, dataset.design.q + 1):
        idx = np.flatnonzero(dataset.rank == rank)
        if idx.size < k:
            raise EstimationError(
                f"group {dataset.design.label_of(rank)!r} has {idx.size} records, "
                f"fewer than the {k} folds requested"
            )
        perm = rng.permutation(idx)
        fold_of[perm] = np.arange(perm.size) % k
    return FoldAssignment(k, fold_of)


class GroupMeanFit:
    """Observed conditional-mean curves for one group, split at its own cutoff.

    The observed mean E[Y | X, G = g] jumps at the group's baseline cutoff, so
    the two sides are smoothed separately and every evaluation names the side
    it wants.
    """

    def __init__(self, cutoff: float, below: CurveFit | None, above: CurveFit | None):
        self.cutoff = cutoff
        self.below = below
        self.above = above

    def eval_side(self, xq, side: str) -> np.ndarray:
        fit = self.above if side == "above" else self.below
        if fit is None:
            raise EstimationError(
                f"no conditional-mean fit on the {side}-cutoff side at cutoff "
                f"{self.cutoff} (too few training points on that side)"
            )
        return fit.values(np.atleast_1d(xq))


class CrossfitNuisances:
    """Per-fold nuisance models; record i is always scored out-of-fold."""

    def __init__(self, folds: FoldAssignment, mean_fits, propensity_models):
        self.folds = folds
        self.mean_fits = mean_fits  # list over folds of {rank: GroupMeanFit}
        self.propensity_models = propensity_models  # list over folds

    @property
    def fold_of(self) -> np.ndarray:
        return self.folds.fold_of

    def cond_mean(self, x, fold_idx, ranks, side: str) -> np.ndarray:
        """m-hat^{-k[i]}(x_i, rank_i) on the requested side of each rank's cutoff."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        fold_idx = np.atleast_1d(np.asarray(fold_idx))
        ranks = np.broadcast_to(np.atleast_1d(np.asarray(ranks)), x.shape)
        out = np.empty_like(x)
        for k in np.unique(fold_idx):
            for r in np.unique(ranks[fold_idx == k]):
                mask = (fold_idx == k) & (ranks == r)
                out[mask] = self.mean_fits[k][int(r)].eval_side(x[mask], side)
        return out

    def propensity(self, x, fold_idx) -> np.ndarray:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        fold_idx = np.atleast_1d(np.asarray(fold_idx))
        q = self.propensity_models[0].n_groups
        out = np.empty((x.size, q))
        for k in np.unique(fold_idx):
            mask = fold_idx == k
            out[mask] = self.propensity_models[k].probabilities(x[mask])
        return out


class OracleNuisances:
    """User-supplied nuisance functions, e.g. ground truth for verification.

    `mean_fn(x_array, rank, side)` must return the conditional mean of the raw
    outcome; `propensity_fn(x_array)` a (n, Q) matrix of group probabilities.
    """

    def __init__(self, mean_fn, propensity_fn, n_records: int | None = None):
        self.mean_fn = mean_fn
        self.propensity_fn = propensity_fn
        self._n = n_records

    @property
    def fold_of(self):
        return np.zeros(self._n, dtype=np.int64) if self._n is not None else None

    def cond_mean(self, x, fold_idx, ranks, side):
        x = np.atleast_1d(np.asarray(x, dtype=float))
        ranks = np.broadcast_to(np.atleast_1d(np.asarray(ranks)), x.shape)
        out = np.empty_like(x)
        for r in np.unique(ranks):
            mask = ranks == r
            out[mask] = np.asarray(self.mean_fn(x[mask], int(r), side), dtype=float)
        return out

    def propensity(self, x, fold_idx):
        x = np.atleast_1d(np.asarray(x, dtype=float))
        return np.asarray(self.propensity_fn(x), dtype=float)


def fit_crossfit_nuisances(
    dataset: Dataset,
    folds: FoldAssignment,
    mean_config: LocalPolyConfig | None = None,
    propensity_degree: int = 3,
    clamp_eps: float = 0.01,
) -> CrossfitNuisances:
    """Fit K propensity models and K x Q per-side mean curves, each excluding its fold."""
    mean_config = mean_config or LocalPolyConfig(degree=1)
    design = dataset.design
    mean_fits = []
    prop_models = []
    for k in range(folds.n_folds):
        train = folds.fold_of != k
        fits = {}
        for rank in range(1, design.q + 1):
            cut = design.cutoff_of_rank(rank)
            in_group = train & (dataset.rank == rank)
            sides = {}
            for name, side_mask in (("below", dataset.x < cut), ("above", dataset.x >= cut)):
                sel = in_group & side_mask
                if np.unique(dataset.x[sel]).size >= mean_config.degree + 2:
                    sides[name] = CurveFit(dataset.x[sel], dataset.y[sel], mean_config)
                else:
                    sides[name] = None
            fits[rank] = GroupMeanFit(cut, sides["below"], sides["above"])
        try:
            prop = _fit_propensity_arrays(
                dataset.x[train], dataset.rank[train], design.q,
                basis_degree=propensity_degree, clamp_eps=clamp_eps,
            )
        except EstimationError as exc:
            raise EstimationError(f"fold {k}: {exc}") from exc
        mean_fits.append(fits)
        prop_models.append(prop)
    return CrossfitNuisances(folds, mean_fits, prop_models)


@dataclass(frozen=True)
class DRScores:
    """Per-record doubly-robust scores, one column per group rank.

    gamma1[i, g-1] extrapolates treated outcomes left of group g's cutoff;
    gamma0[i, g-1] extrapolates control outcomes to its right. Both are zero
    outside the extrapolation region of their group.
    """

    gamma1: np.ndarray
    gamma0: np.ndarray

    def __post_init__(self):
        self.gamma1.flags.writeable = False
        self.gamma0.flags.writeable = False


def record_folds(nuisances, n: int) -> np.ndarray:
    """Fold index per record; oracle nuisances without folds count as fold 0."""
    fold_of = getattr(nuisances, "fold_of", None)
    return np.zeros(n, dtype=np.int64) if fold_of is None else fold_of


def interval_index(x: np.ndarray, design) -> np.ndarray:
    """Rank j of the cutoff interval [c_j, c_{j+1}) containing x.

    Intervals are half-open except the topmost, which includes c_Q, so they
    partition [c_1, c_Q]. Only valid for x inside that span.
    """
    cuts = design.sorted_cutoffs
    r = np.searchsorted(cuts, np.asarray(x, dtype=float), side="right")
    return np.minimum(r, design.q - 1)


def compute_dr_scores(dataset: Dataset, nuisances, cost: float = 0.0) -> DRScores:
    """Doubly-robust scores for every record and group under utility y - cost*w."""
    design = dataset.design
    cuts = design.sorted_cutoffs
    q = design.q
    n = len(dataset)
    gamma1 = np.zeros((n, q))
    gamma0 = np.zeros((n, q))
    in_r = (dataset.x >= cuts[0]) & (dataset.x <= cuts[-1])
    sub = np.flatnonzero(in_r)
    if sub.size == 0:
        return DRScores(gamma1, gamma0)
    x = dataset.x[sub]
    y = dataset.y[sub]
    rank = dataset.rank[sub]
    fold_idx = record_folds(nuisances, n)[sub]
    j = interval_index(x, design)
    m_lo = nuisances.cond_mean(x, fold_idx, j, side="above")
    m_hi = nuisances.cond_mean(x, fold_idx, j + 1, side="below")
    e = nuisances.propensity(x, fold_idx)
    rows = np.arange(sub.size)
    e_j = e[rows, j - 1]
    e_jp = e[rows, j]  # rank j+1
    for g in range(2, q + 1):
        active = (j <= g - 1) & (x < cuts[g - 1])
        own = active & (rank == g)
        ref = active & (rank == j)
        vals = np.zeros(sub.size)
        vals[own] = m_lo[own] - cost
        vals[ref] = (e[rows[ref], g - 1] / e_j[ref]) * (y[ref] - m_lo[ref])
        gamma1[sub, g - 1] = vals
    for g in range(1, q):
        active = j >= g
        own = active & (rank == g)
        ref = active & (rank == j + 1)
        vals = np.zeros(sub.size)
        vals[own] = m_hi[own]
        vals[ref] = (e[rows[ref], g - 1] / e_jp[ref]) * (y[ref] - m_hi[ref])
        gamma0[sub, g - 1] = vals
    return DRScores(gamma1, gamma0)


def identified_component(
    dataset: Dataset,
    policy: ThresholdPolicy,
    baseline: ThresholdPolicy,
    utility: UtilityConfig | None = None,
) -> float:
    """Sample mean of the utility where the policy agrees with the baseline."""
    pi = policy.indicator(dataset.x, dataset.rank)
    tilde = baseline.indicator(dataset.x, dataset.rank)
    y = dataset.utility_outcomes(utility)
    return float(np.sum(np.where(pi == tilde, y, 0.0)) / len(dataset))


def dr_component(
    dataset: Dataset,
    policy: ThresholdPolicy,
    baseline: ThresholdPolicy,
    scores: DRScores,
) -> float:
    """Cross-fitted doubly-robust estimate of the identifiable disagreement value."""
    acc = np.zeros(len(dataset))
    for g in range(1, dataset.design.q + 1):
        pi_g = dataset.x >= policy.cutoff_by_rank[g - 1]
        tp_g = dataset.x >= dataset.design.sorted_cutoffs[g - 1]
        acc += np.where(pi_g & ~tp_g, scores.gamma1[:, g - 1], 0.0)
        acc += np.where(~pi_g & tp_g, scores.gamma0[:, g - 1], 0.0)
    return float(np.sum(acc) / len(dataset))


@dataclass(frozen=True)
class ValueBreakdown:
    """The three objective components and their sum."""

    iden: float
    dr: float
    xi2_worst: float

    @property
    def total(self) -> float:
        return self.iden + self.dr + self.xi2_worst


def value_breakdown(
    dataset: Dataset,
    policy: ThresholdPolicy,
    baseline: ThresholdPolicy,
    scores: DRScores,
    bounds,
    utility: UtilityConfig | None = None,
) -> ValueBreakdown:
    """Worst-case empirical objective of a policy, component by component."""
    from .idbounds import worst_case_xi2

    return ValueBreakdown(
        iden=identified_component(dataset, policy, baseline, utility),
        dr=dr_component(dataset, policy, baseline, scores),
        xi2_worst=worst_case_xi2(dataset, policy, baseline, bounds),
    )
