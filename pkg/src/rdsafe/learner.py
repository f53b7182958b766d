"""Worst-case policy learning by per-group grid search, plus sensitivity sweeps.

The empirical objective decomposes record by record, and each record's
contribution depends only on its own group's cutoff, so the joint argmax over
the product grid equals the per-group argmaxes. The fast path precomputes each
record's contribution under treat/no-treat and reduces every candidate to a
prefix-sum lookup.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .core import Dataset, StudyDesign, ThresholdPolicy, UtilityConfig, baseline_policy
from .estimator import (
    DRScores,
    ValueBreakdown,
    compute_dr_scores,
    fit_crossfit_nuisances,
    interval_index,
    make_folds,
    value_breakdown,
)
from .idbounds import (
    BoundModel,
    SmoothnessParams,
    build_bound_model,
    estimate_smoothness,
    fit_all_difference_curves,
)
from .smooth import LocalPolyConfig

# Two candidates within this absolute objective tolerance count as tied and
# the one nearest the baseline cutoff wins.
TIE_TOL = 1e-12


@dataclass(frozen=True)
class CandidateGrid:
    """Sorted, deduplicated candidate cutoffs per group rank."""

    by_rank: dict  # rank -> np.ndarray of candidates

    def for_rank(self, rank: int) -> np.ndarray:
        return self.by_rank[rank]


def candidate_grid(dataset: Dataset | None, design: StudyDesign, mode: str = "observed") -> CandidateGrid:
    """Candidate cutoffs inside [c_1, c_Q].

    Mode "observed" uses the distinct observed x values; "uniform:m" uses m
    equally spaced points. Every group's grid always contains its own baseline
    cutoff and both endpoints c_1 and c_Q.
    """
    lo, hi = design.c_min, design.c_max
    if mode == "observed":
        if dataset is None:
            raise ValueError("mode 'observed' needs a dataset")
        xs = dataset.x
        base = xs[(xs >= lo) & (xs <= hi)]
    elif mode.startswith("uniform"):
        m = _parse_uniform(mode)
        base = np.linspace(lo, hi, m)
    else:
        raise ValueError(f"unknown grid mode {mode!r}; use 'observed' or 'uniform:m'")
    by_rank = {}
    for rank in range(1, design.q + 1):
        cand = np.unique(np.concatenate([base, [lo, hi, design.cutoff_of_rank(rank)]]))
        cand.flags.writeable = False
        by_rank[rank] = cand
    return CandidateGrid(by_rank)


def _parse_uniform(mode: str) -> int:
    # accepted spellings: "uniform:m" and "uniform(m)"
    body = mode[len("uniform"):].strip(":()")
    try:
        m = int(body)
    except ValueError:
        raise ValueError(f"bad uniform grid spec {mode!r}; expected 'uniform:m'") from None
    if m < 2:
        raise ValueError(f"uniform grid needs at least 2 points, got {m}")
    return m


def _record_contributions(dataset: Dataset, rank: int, baseline: ThresholdPolicy,
                          scores: DRScores, bounds: BoundModel,
                          utility: UtilityConfig | None):
    """Per-record objective contributions under pi_i=1 (a) and pi_i=0 (b).

    Covers all records, not just group `rank`: other groups' records enter the
    DR term for this group through the reference-group IPW pieces, but their
    agreement and partially identified terms belong to their own group search.
    """
    design = dataset.design
    n = len(dataset)
    x = dataset.x
    # group-`rank` baseline indicator, applied to every record's x: the DR
    # scores extrapolate group-`rank` outcomes at other groups' records
    tilde = x >= design.cutoff_of_rank(rank)
    y = dataset.utility_outcomes(utility)
    own = dataset.rank == rank
    a = np.zeros(n)
    b = np.zeros(n)
    # agreement term: own-group records where the candidate matches baseline
    a[own & tilde] += y[own & tilde]
    b[own & ~tilde] += y[own & ~tilde]
    # DR disagreement term: all records carry group-`rank` scores
    a += np.where(~tilde, scores.gamma1[:, rank - 1], 0.0)
    b += np.where(tilde, scores.gamma0[:, rank - 1], 0.0)
    # partially identified term: own-group records only, via lower envelopes
    in_r = own & (x >= design.c_min) & (x <= design.c_max)
    idx = np.flatnonzero(in_r)
    if idx.size:
        ref = interval_index(x[idx], design)
        gcol = np.full(idx.size, rank)
        newly_t = ~tilde[idx]
        if newly_t.any():
            sel = idx[newly_t]
            a[sel] += bounds.lower(1, x[sel], gcol[newly_t], ref[newly_t])
        newly_u = tilde[idx]
        if newly_u.any():
            sel = idx[newly_u]
            b[sel] += bounds.lower(0, x[sel], gcol[newly_u], ref[newly_u] + 1)
    return a, b


def _candidate_values(dataset: Dataset, rank: int, candidates: np.ndarray,
                      baseline: ThresholdPolicy, scores: DRScores, bounds: BoundModel,
                      utility: UtilityConfig | None) -> np.ndarray:
    """Objective contribution of group `rank` at each candidate cutoff.

    pi_i = 1(x_i >= c) flips a record from b_i to a_i, so sorting once and
    taking suffix sums of (a - b) evaluates the whole grid in O(n log n).
    """
    a, b = _record_contributions(dataset, rank, baseline, scores, bounds, utility)
    order = np.argsort(dataset.x, kind="stable")
    xs = dataset.x[order]
    diff = (a - b)[order]
    total_b = float(np.sum(b))
    suffix = np.concatenate([np.cumsum(diff[::-1])[::-1], [0.0]])
    pos = np.searchsorted(xs, candidates, side="left")
    return (total_b + suffix[pos]) / len(dataset)


def group_objective(dataset: Dataset, rank: int, candidate: float,
                    baseline: ThresholdPolicy, scores: DRScores, bounds: BoundModel,
                    utility: UtilityConfig | None = None) -> float:
    """Contribution of group `rank` to the worst-case objective at one cutoff."""
    design = dataset.design
    if not design.c_min <= candidate <= design.c_max:
        raise ValueError(
            f"candidate cutoff {candidate} outside [{design.c_min}, {design.c_max}]"
        )
    vals = _candidate_values(dataset, rank, np.array([float(candidate)]),
                             baseline, scores, bounds, utility)
    return float(vals[0])


def _pick(candidates: np.ndarray, values: np.ndarray, baseline_cut: float) -> float:
    best = np.max(values)
    tied = np.flatnonzero(values >= best - TIE_TOL)
    dist = np.abs(candidates[tied] - baseline_cut)
    nearest = tied[dist == dist.min()]
    return float(candidates[nearest].min())


@dataclass(frozen=True)
class LearnerConfig:
    n_folds: int = 5
    seed: int = 0
    grid_mode: str = "observed"
    multiplier: float = 1.0
    utility: UtilityConfig | None = None
    mean_config: LocalPolyConfig | None = None
    curve_config: LocalPolyConfig | None = None
    propensity_degree: int = 3
    clamp_eps: float = 0.01
    lambda_grid_size: int = 50


@dataclass(frozen=True)
class LearnedPolicy:
    policy: ThresholdPolicy
    breakdown: ValueBreakdown
    baseline_breakdown: ValueBreakdown
    objective_tables: dict  # rank -> (candidates, objective values)
    diagnostics: dict

    @property
    def objective_gain(self) -> float:
        return self.breakdown.total - self.baseline_breakdown.total


@dataclass(frozen=True)
class PipelineComponents:
    """Policy-independent pieces fitted once per dataset: nuisances, raw-outcome
    DR scores, difference curves with base smoothness, and the candidate grid."""

    dataset: Dataset
    baseline: ThresholdPolicy
    nuisances: object
    curves: dict
    base_smoothness: SmoothnessParams
    grid: CandidateGrid
    raw_scores: DRScores


def prepare_components(dataset: Dataset, config: LearnerConfig | None = None) -> PipelineComponents:
    config = config or LearnerConfig()
    folds = make_folds(dataset, config.n_folds, config.seed)
    nuisances = fit_crossfit_nuisances(
        dataset, folds, mean_config=config.mean_config,
        propensity_degree=config.propensity_degree, clamp_eps=config.clamp_eps,
    )
    curves = fit_all_difference_curves(dataset, nuisances, config.curve_config)
    base = estimate_smoothness(curves, grid_size=config.lambda_grid_size)
    grid = candidate_grid(dataset, dataset.design, config.grid_mode)
    raw_scores = compute_dr_scores(dataset, nuisances, cost=0.0)
    return PipelineComponents(
        dataset=dataset,
        baseline=baseline_policy(dataset.design),
        nuisances=nuisances,
        curves=curves,
        base_smoothness=base,
        grid=grid,
        raw_scores=raw_scores,
    )


def _lipschitz_diagnostic(dataset: Dataset, bounds: BoundModel) -> float:
    """Empirical width diagnostic: (2/n) sum_i max over pairs of
    lambda_eff * |x_i - anchor cutoff|, an upper bound on how much the
    partially identified term can move the objective."""
    x = dataset.x
    in_r = (x >= dataset.design.c_min) & (x <= dataset.design.c_max)
    xs = x[in_r]
    if xs.size == 0:
        return 0.0
    worst = np.zeros(xs.size)
    for w in (0, 1):
        lam = bounds._lam[w]
        anchor = bounds._anchor[w]
        ok = ~np.isnan(lam)
        for g, gp in zip(*np.nonzero(ok)):
            worst = np.maximum(worst, lam[g, gp] * np.abs(xs - anchor[g, gp]))
    return float(2.0 * np.sum(worst) / len(dataset))


def learn_from_components(components: PipelineComponents,
                          multiplier: float = 1.0,
                          utility: UtilityConfig | None = None) -> LearnedPolicy:
    """Grid search using prefitted nuisances; only M and C vary per call."""
    dataset = components.dataset
    design = dataset.design
    baseline = components.baseline
    cost = utility.cost if utility is not None else 0.0
    scores = (components.raw_scores if cost == 0.0
              else compute_dr_scores(dataset, components.nuisances, cost=cost))
    params = SmoothnessParams(lam=components.base_smoothness.lam, multiplier=multiplier)
    bounds = build_bound_model(dataset, components.nuisances, params, curves=components.curves)
    cutoffs = {}
    tables = {}
    for rank in range(1, design.q + 1):
        cand = components.grid.for_rank(rank)
        vals = _candidate_values(dataset, rank, cand, baseline, scores, bounds, utility)
        cutoffs[design.label_of(rank)] = _pick(cand, vals, design.cutoff_of_rank(rank))
        tables[rank] = (cand, vals)
    policy = ThresholdPolicy(cutoffs, design)
    breakdown = value_breakdown(dataset, policy, baseline, scores, bounds, utility)
    base_breakdown = value_breakdown(dataset, baseline, baseline, scores, bounds, utility)
    return LearnedPolicy(
        policy=policy,
        breakdown=breakdown,
        baseline_breakdown=base_breakdown,
        objective_tables=tables,
        diagnostics={
            "multiplier": multiplier,
            "cost": cost,
            "lambda_base": dict(components.base_smoothness.lam),
            "lipschitz_width": _lipschitz_diagnostic(dataset, bounds),
        },
    )


def learn_policy(dataset: Dataset, config: LearnerConfig | None = None) -> LearnedPolicy:
    """Full pipeline: cross-fit nuisances, bound the unidentified differences,
    and maximize the worst-case objective group by group."""
    config = config or LearnerConfig()
    components = prepare_components(dataset, config)
    return learn_from_components(components, multiplier=config.multiplier,
                                 utility=config.utility)


@dataclass(frozen=True)
class SweepRow:
    group: object
    multiplier: float
    cost: float
    baseline_cutoff: float
    learned_cutoff: float
    change: float
    objective_gain: float


def sensitivity_sweep(dataset: Dataset, multipliers, costs,
                      config: LearnerConfig | None = None,
                      components: PipelineComponents | None = None):
    """Relearn the policy for every (M, C) cell, reusing one set of nuisance
    fits and base smoothness estimates. Rows are ordered by group rank, then
    the position of M and C in the input lists."""
    multipliers = list(multipliers)
    costs = list(costs)
    if not multipliers or not costs:
        raise ValueError("sensitivity sweep needs at least one multiplier and one cost")
    if components is None:
        components = prepare_components(dataset, config or LearnerConfig())
    design = dataset.design
    rows = []
    cells = {}
    for m in multipliers:
        for c in costs:
            cells[(m, c)] = learn_from_components(
                components, multiplier=m, utility=UtilityConfig(cost=c))
    for rank in range(1, design.q + 1):
        label = design.label_of(rank)
        base_cut = design.cutoff_of_rank(rank)
        for m in multipliers:
            for c in costs:
                learned = cells[(m, c)]
                cut = learned.policy.cutoffs[label]
                rows.append(SweepRow(
                    group=label, multiplier=float(m), cost=float(c),
                    baseline_cutoff=base_cut, learned_cutoff=cut,
                    change=cut - base_cut,
                    objective_gain=learned.objective_gain,
                ))
    return rows


def sweep_to_csv(rows) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["group", "M", "C", "baseline_cutoff", "learned_cutoff",
                     "change", "objective_gain"])
    for r in rows:
        writer.writerow([r.group, repr(r.multiplier), repr(r.cost),
                         repr(r.baseline_cutoff), repr(r.learned_cutoff),
                         repr(r.change), repr(r.objective_gain)])
    return out.getvalue()


def objective_tables_csv(learned: LearnedPolicy, design: StudyDesign) -> str:
    """Per-candidate objective curves for plotting."""
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["group", "candidate", "objective"])
    for rank in sorted(learned.objective_tables):
        cand, vals = learned.objective_tables[rank]
        label = design.label_of(rank)
        for c, v in zip(cand, vals):
            writer.writerow([label, repr(float(c)), repr(float(v))])
    return out.getvalue()
