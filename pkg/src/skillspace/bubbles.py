"""Lesson-sequence discrimination on observational traces.

A bubble is a pair of distinct lesson sequences that share a start
lesson and an end assessment, each traversed contiguously by its own
student cohort. The fitted embedding simulates a student's expected
state along each branch and recommends the branch with the higher end
pass probability. The expected-gain metric compares pass rates of
recommended-branch takers against matched non-takers, de-biased with
propensity scores (PCA-reduced full-history features into an L2
logistic model, nearest-neighbor matching with replacement).
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.special import expit

from .estimation import Embedding, refit_students
from .model import EPS_NORM, lesson_update_mean
from .optimize import minimize_bounded
from .traces import Dataset

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CohortMember:
    student_id: str
    result: int  # end-assessment outcome at the traversal
    start_index: int  # position of the start lesson in the student's history
    end_index: int  # position of the end assessment


@dataclass
class Bubble:
    start_lesson: str
    end_assessment: str
    branch_a: tuple[str, ...]
    branch_b: tuple[str, ...]
    cohort_a: list[CohortMember]
    cohort_b: list[CohortMember]

    def key(self) -> tuple:
        return (self.start_lesson, self.end_assessment, self.branch_a, self.branch_b)

    def members(self) -> list[tuple[CohortMember, str]]:
        return [(m, "a") for m in self.cohort_a] + [(m, "b") for m in self.cohort_b]


def mine_bubbles(
    dataset: Dataset,
    min_cohort: int = 10,
    min_branch_len: int = 2,
    require_equal_len: bool = True,
) -> list[Bubble]:
    """Exhaustively enumerate qualifying bubbles, in lexicographic order.

    A student joins the cohort of (start, end, branch) when their history
    contains the start lesson, then exactly the branch lessons in order,
    then the end assessment, with no other lessons interleaved (interleaved
    assessments are allowed and ignored). Students appearing on both sides
    of a branch pair are dropped from that pair; pairs keep both branches
    only if each disjoint cohort clears `min_cohort`.
    """
    table: dict[tuple[str, str], dict[tuple[str, ...], dict[str, CohortMember]]] = {}
    for student in dataset.student_ids:
        history = dataset.histories[student]
        seen: set[tuple] = set()
        for si, start_it in enumerate(history):
            if not start_it.is_lesson:
                continue
            branch: list[str] = []
            for ei in range(si + 1, len(history)):
                it = history[ei]
                if it.is_lesson:
                    branch.append(it.module_id)
                    continue
                key = (start_it.module_id, it.module_id, tuple(branch))
                if key in seen:
                    continue
                seen.add(key)
                table.setdefault((start_it.module_id, it.module_id), {}).setdefault(
                    key[2], {}
                ).setdefault(student, CohortMember(student, int(it.result), si, ei))

    bubbles: list[Bubble] = []
    for (start, end) in sorted(table):
        branches = {
            br: members for br, members in table[(start, end)].items() if len(br) >= min_branch_len
        }
        names = sorted(branches)
        for i in range(len(names)):
            for j in range(i + 1, len(names)):
                a, b = names[i], names[j]
                if require_equal_len and len(a) != len(b):
                    continue
                overlap = set(branches[a]) & set(branches[b])
                cohort_a = [branches[a][s] for s in sorted(branches[a]) if s not in overlap]
                cohort_b = [branches[b][s] for s in sorted(branches[b]) if s not in overlap]
                if len(cohort_a) >= min_cohort and len(cohort_b) >= min_cohort:
                    bubbles.append(Bubble(start, end, a, b, cohort_a, cohort_b))
    return bubbles


def simulate_branch(
    state: np.ndarray,
    branch: Sequence[str],
    end_assessment: str,
    embedding: Embedding,
    gamma_s: float = 0.0,
) -> tuple[np.ndarray, float]:
    """Expected state after the branch lessons, and the end pass probability."""
    s = np.asarray(state, dtype=float)
    for lid in branch:
        if lid not in embedding.lessons:
            raise KeyError(f"unknown lesson {lid!r} in branch")
        s = lesson_update_mean(s, embedding.lessons[lid])
    if end_assessment not in embedding.assessments:
        raise KeyError(f"unknown assessment {end_assessment!r}")
    a = embedding.assessments[end_assessment]
    na = max(float(np.linalg.norm(a.requirements)), EPS_NORM)
    p = float(expit(float(s @ a.requirements) / na - na + gamma_s + a.bias))
    return s, p


@dataclass
class Recommendation:
    branch: str  # "a" or "b"
    p_a: float
    p_b: float
    tie: bool


def recommend(bubble: Bubble, state: np.ndarray, embedding: Embedding, gamma_s: float = 0.0) -> Recommendation:
    """Pick the branch with the higher simulated end pass probability.

    Exact ties go to branch a (branches are stored in lexicographic order)
    and are flagged.
    """
    _, p_a = simulate_branch(state, bubble.branch_a, bubble.end_assessment, embedding, gamma_s)
    _, p_b = simulate_branch(state, bubble.branch_b, bubble.end_assessment, embedding, gamma_s)
    if p_a >= p_b:
        return Recommendation("a", p_a, p_b, tie=p_a == p_b)
    return Recommendation("b", p_a, p_b, tie=False)


# ---------------------------------------------------------------------------
# Features, reduction, propensity
# ---------------------------------------------------------------------------


def student_features(
    dataset: Dataset, students: Optional[Iterable[str]] = None
) -> tuple[np.ndarray, list[str], list[str]]:
    """Full-history {-1, 0, 1} feature matrix over every module.

    Lessons count as passed when completed; assessments carry the first
    attempt's result; untouched modules stay 0.
    """
    rows = sorted(students) if students is not None else dataset.student_ids
    modules = sorted(set(dataset.lesson_ids) | set(dataset.assessment_ids))
    mpos = {m: c for c, m in enumerate(modules)}
    X = np.zeros((len(rows), len(modules)))
    for r, s in enumerate(rows):
        for it in dataset.histories[s]:
            c = mpos[it.module_id]
            if it.is_lesson:
                X[r, c] = 1.0
            elif X[r, c] == 0.0:
                X[r, c] = 1.0 if it.result == 1 else -1.0
    return X, rows, modules


@dataclass
class ReducedFeatures:
    scores: np.ndarray  # (n_students, n_components)
    n_components: int
    explained_variance_ratio: np.ndarray
    degenerate: bool


def reduce_features(
    X: np.ndarray, variance_target: float = 0.8, max_components: int = 1000
) -> ReducedFeatures:
    """Project onto the fewest principal components reaching the variance target.

    Component count is capped at min(max_components, rank). An all-equal-rows
    matrix has no variance to capture: a zero column is passed through with a
    warning.
    """
    X = np.asarray(X, dtype=float)
    if X.shape[0] < 2:
        raise ValueError("feature reduction needs at least 2 students")
    centered = X - X.mean(axis=0)
    u, s, _ = np.linalg.svd(centered, full_matrices=False)
    variance = s**2
    total = float(variance.sum())
    if total <= 1e-12:
        log.warning("feature matrix has zero variance; passing features through as zeros")
        return ReducedFeatures(np.zeros((X.shape[0], 1)), 0, np.zeros(0), True)
    ratios = variance / total
    cumulative = np.cumsum(ratios)
    n = int(np.searchsorted(cumulative, variance_target - 1e-12)) + 1
    rank = int(np.sum(s > s[0] * 1e-10))
    n = max(1, min(n, rank, max_components))
    return ReducedFeatures(u[:, :n] * s[:n], n, ratios[:n], False)


DEFAULT_REG_GRID = (1e-3, 1e-2, 1e-1, 1.0, 10.0)


@dataclass
class PropensityModel:
    weights: np.ndarray
    intercept: float
    regularization: float
    heldout_loglik: dict[float, float]

    def scores(self, Z: np.ndarray) -> np.ndarray:
        return expit(Z @ self.weights + self.intercept)


def _fit_logistic(Z: np.ndarray, y: np.ndarray, reg: float) -> np.ndarray:
    """L2-regularized logistic regression (intercept unpenalized)."""
    n, p = Z.shape

    def nll_grad(params):
        w, b = params[:-1], params[-1]
        z = Z @ w + b
        nll = float(np.sum(np.logaddexp(0.0, np.where(y > 0.5, -z, z)))) + reg * float(w @ w)
        c = expit(z) - y
        return nll, np.r_[Z.T @ c + 2.0 * reg * w, np.sum(c)]

    res = minimize_bounded(nll_grad, np.zeros(p + 1), tol=1e-9, max_iter=500)
    return res.x


def fit_propensity(
    Z: np.ndarray,
    labels: np.ndarray,
    reg_grid: Sequence[float] = DEFAULT_REG_GRID,
    cv_folds: int = 3,
    seed: int = 0,
) -> PropensityModel:
    """Fit the propensity logistic, selecting the L2 weight that maximizes
    average held-out log-likelihood over student folds."""
    Z = np.asarray(Z, dtype=float)
    y = np.asarray(labels, dtype=float)
    n = Z.shape[0]
    heldout: dict[float, float] = {}

    folds = min(cv_folds, n // 2)
    if folds >= 2 and len(reg_grid) > 1:
        rng = np.random.default_rng(np.random.SeedSequence([seed, 3571]))
        order = rng.permutation(n)
        assignments = np.array_split(order, folds)
        for reg in reg_grid:
            lls = []
            for held in assignments:
                mask = np.ones(n, dtype=bool)
                mask[held] = False
                if y[mask].min() == y[mask].max():
                    continue  # degenerate training side
                params = _fit_logistic(Z[mask], y[mask], float(reg))
                z = Z[held] @ params[:-1] + params[-1]
                lls.append(float(np.mean(-np.logaddexp(0.0, np.where(y[held] > 0.5, -z, z)))))
            heldout[float(reg)] = float(np.mean(lls)) if lls else -math.inf
        best_reg = max(sorted(heldout), key=lambda r: heldout[r])
    else:
        best_reg = float(reg_grid[len(reg_grid) // 2])
        heldout[best_reg] = float("nan")

    params = _fit_logistic(Z, y, best_reg)
    return PropensityModel(params[:-1], float(params[-1]), best_reg, heldout)


def match_neighbors(
    propensities: np.ndarray,
    treated: Sequence[int],
    controls: Sequence[int],
    k: Optional[int],
) -> tuple[dict[int, list[int]], bool]:
    """Match each treated row to its k nearest controls by |propensity diff|.

    Matching is with replacement; k=None matches every control. The tie flag
    reports when the cut between selected and rejected neighbors fell on an
    exact distance tie (the stable sort resolves it deterministically).
    """
    controls = list(controls)
    ties = False
    matches: dict[int, list[int]] = {}
    for t in treated:
        if k is None or k >= len(controls):
            matches[t] = list(controls)
            continue
        dist = np.abs(np.asarray([propensities[c] for c in controls]) - propensities[t])
        order = np.argsort(dist, kind="mergesort")
        matches[t] = [controls[int(i)] for i in order[:k]]
        if dist[order[k - 1]] == dist[order[k]]:
            ties = True
    return matches, ties


# ---------------------------------------------------------------------------
# Expected gain
# ---------------------------------------------------------------------------


@dataclass
class BubbleEvaluation:
    """Per-bubble outcomes, propensities, and recommendation bookkeeping."""

    bubble: Bubble
    member_ids: list[str]
    taken: np.ndarray  # "a"/"b" per member
    outcomes: np.ndarray
    recommended: np.ndarray  # "a"/"b" per member
    took_recommended: np.ndarray  # bool
    propensities: np.ndarray
    rate_a: float
    rate_b: float
    propensity_ties: bool
    recommendation_ties: int
    excluded_reason: Optional[str] = None

    @property
    def pass_rate_difference(self) -> float:
        return abs(self.rate_a - self.rate_b)

    def gain_for_k(self, k: Optional[int]) -> Optional[float]:
        """Matched relative gain, or None when E[R] of matches is zero."""
        treated = np.flatnonzero(self.took_recommended)
        controls = np.flatnonzero(~self.took_recommended)
        matches, _ = match_neighbors(self.propensities, treated, controls, k)
        exp_r_prime = float(np.mean(self.outcomes[treated]))
        exp_r = float(np.mean([np.mean(self.outcomes[matches[t]]) for t in treated]))
        if exp_r == 0.0:
            return None
        return (exp_r_prime - exp_r) / exp_r

    def unmatched_gain(self) -> Optional[float]:
        treated = np.flatnonzero(self.took_recommended)
        controls = np.flatnonzero(~self.took_recommended)
        exp_r_prime = float(np.mean(self.outcomes[treated]))
        exp_r = float(np.mean(self.outcomes[controls]))
        if exp_r == 0.0:
            return None
        return (exp_r_prime - exp_r) / exp_r


def evaluate_bubble(
    bubble: Bubble,
    dataset: Dataset,
    embedding: Embedding,
    reduced_rows: dict[str, np.ndarray],
    eval_students: Optional[set[str]] = None,
    reg_grid: Sequence[float] = DEFAULT_REG_GRID,
    seed: int = 0,
    refit_restarts: int = 1,
) -> BubbleEvaluation:
    """Recommend per member, fit propensities, and package the bubble's data.

    Member states at the bubble entry are refit on their history up to and
    including the start lesson, with module parameters frozen.
    """
    members = [(m, side) for m, side in bubble.members()
               if eval_students is None or m.student_id in eval_students]
    placeholder = lambda reason: BubbleEvaluation(
        bubble, [], np.zeros(0), np.zeros(0), np.zeros(0), np.zeros(0, dtype=bool),
        np.zeros(0), float("nan"), float("nan"), False, 0, excluded_reason=reason,
    )
    if not members:
        return placeholder("no evaluated members")

    prefixes = {
        m.student_id: dataset.histories[m.student_id][: m.start_index + 1] for m, _ in members
    }
    refit = refit_students(embedding, prefixes, seed=seed, restarts=refit_restarts)

    ids, taken, outcomes, rec, took_rec, ties = [], [], [], [], [], 0
    for m, side in members:
        student = refit.students[m.student_id]
        state = student.states[-1]
        r = recommend(bubble, state, embedding, gamma_s=student.bias)
        ids.append(m.student_id)
        taken.append(side)
        outcomes.append(m.result)
        rec.append(r.branch)
        took_rec.append(r.branch == side)
        ties += int(r.tie)

    taken = np.array(taken)
    outcomes = np.array(outcomes, dtype=float)
    rec = np.array(rec)
    took_rec = np.array(took_rec, dtype=bool)
    rate_a = float(np.mean(outcomes[taken == "a"])) if np.any(taken == "a") else float("nan")
    rate_b = float(np.mean(outcomes[taken == "b"])) if np.any(taken == "b") else float("nan")

    if took_rec.all() or not took_rec.any():
        return BubbleEvaluation(
            bubble, ids, taken, outcomes, rec, took_rec, np.zeros(len(ids)),
            rate_a, rate_b, False, ties,
            excluded_reason="single-class recommended-vs-not labels",
        )

    Z = np.array([reduced_rows[s] for s in ids])
    model = fit_propensity(Z, took_rec.astype(float), reg_grid=reg_grid, seed=seed)
    propensities = model.scores(Z)
    prop_ties = bool(np.unique(propensities).size < propensities.size)

    return BubbleEvaluation(
        bubble, ids, taken, outcomes, rec, took_rec, propensities,
        rate_a, rate_b, prop_ties, ties,
    )


@dataclass
class GainCurveRow:
    k: Optional[int]
    threshold: float
    gain: float
    se: float
    n_bubbles: int
    n_zero_rate_excluded: int


@dataclass
class GainReport:
    """Expected gain across bubbles, matched and unmatched, with the
    pass-rate-difference threshold curve per neighbor count."""

    evaluations: list[BubbleEvaluation]
    k_values: Sequence[Optional[int]]
    thresholds: Sequence[float]
    rows: list[GainCurveRow] = field(default_factory=list)
    unmatched_rows: list[GainCurveRow] = field(default_factory=list)
    n_excluded_single_class: int = 0

    def __post_init__(self):
        usable = [ev for ev in self.evaluations if ev.excluded_reason is None]
        self.n_excluded_single_class = sum(
            1 for ev in self.evaluations if ev.excluded_reason is not None
        )
        if not usable:
            log.warning("expected gain: no bubbles survived evaluation")
        for k in self.k_values:
            for th in self.thresholds:
                kept = [ev for ev in usable if ev.pass_rate_difference >= th]
                gains = []
                zero_excluded = 0
                for ev in kept:
                    g = ev.gain_for_k(k)
                    if g is None:
                        zero_excluded += 1
                    else:
                        gains.append(g)
                self.rows.append(self._row(k, th, gains, zero_excluded))
        for th in self.thresholds:
            kept = [ev for ev in usable if ev.pass_rate_difference >= th]
            gains, zero_excluded = [], 0
            for ev in kept:
                g = ev.unmatched_gain()
                if g is None:
                    zero_excluded += 1
                else:
                    gains.append(g)
            self.unmatched_rows.append(self._row(None, th, gains, zero_excluded))

    @staticmethod
    def _row(k: Optional[int], threshold: float, gains: list[float], zero_excluded: int) -> GainCurveRow:
        if gains:
            arr = np.asarray(gains)
            se = float(arr.std(ddof=1) / math.sqrt(arr.size)) if arr.size > 1 else 0.0
            return GainCurveRow(k, float(threshold), float(arr.mean()), se, int(arr.size), zero_excluded)
        return GainCurveRow(k, float(threshold), float("nan"), float("nan"), 0, zero_excluded)

    def to_csv(self, path: str) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["matching", "k", "threshold", "gain", "se", "n_bubbles", "n_zero_rate_excluded"])
            for r in self.rows:
                w.writerow(["matched", "all" if r.k is None else r.k, r.threshold,
                            f"{r.gain:.6f}", f"{r.se:.6f}", r.n_bubbles, r.n_zero_rate_excluded])
            for r in self.unmatched_rows:
                w.writerow(["unmatched", "", r.threshold,
                            f"{r.gain:.6f}", f"{r.se:.6f}", r.n_bubbles, r.n_zero_rate_excluded])

    def gain_at(self, k: Optional[int], threshold: float = 0.0) -> GainCurveRow:
        for r in self.rows:
            if r.k == k and r.threshold == threshold:
                return r
        raise KeyError((k, threshold))

    def unmatched_at(self, threshold: float = 0.0) -> GainCurveRow:
        for r in self.unmatched_rows:
            if r.threshold == threshold:
                return r
        raise KeyError(threshold)


def expected_gain(
    dataset: Dataset,
    embedding: Embedding,
    bubbles: Sequence[Bubble],
    eval_students: Optional[Iterable[str]] = None,
    k_values: Sequence[Optional[int]] = (1,),
    thresholds: Sequence[float] = (0.0,),
    variance_target: float = 0.8,
    max_components: int = 1000,
    reg_grid: Sequence[float] = DEFAULT_REG_GRID,
    seed: int = 0,
    refit_restarts: int = 1,
) -> GainReport:
    """Evaluate bubbles and aggregate the matched expected-gain metric."""
    eval_set = set(eval_students) if eval_students is not None else None
    X, row_ids, _ = student_features(dataset)
    reduced = reduce_features(X, variance_target=variance_target, max_components=max_components)
    reduced_rows = {s: reduced.scores[i] for i, s in enumerate(row_ids)}

    evaluations = [
        evaluate_bubble(
            b, dataset, embedding, reduced_rows, eval_set,
            reg_grid=reg_grid, seed=seed, refit_restarts=refit_restarts,
        )
        for b in bubbles
    ]
    return GainReport(evaluations=evaluations, k_values=list(k_values), thresholds=list(thresholds))


def run_bubble_pipeline(
    dataset: Dataset,
    hyper,
    embed_fraction: float = 0.7,
    seed: int = 0,
    min_cohort: int = 10,
    min_branch_len: int = 2,
    k_values: Sequence[Optional[int]] = (1,),
    thresholds: Sequence[float] = (0.0,),
):
    """Full protocol: embed modules on one split, evaluate bubbles on the rest."""
    from . import estimation
    from .traces import split_students

    embed_students, eval_students = split_students(dataset, [embed_fraction, 1.0 - embed_fraction], seed=seed)
    embedding = estimation.fit(dataset.subset(embed_students), hyper)
    bubbles = mine_bubbles(dataset, min_cohort=min_cohort, min_branch_len=min_branch_len)
    report = expected_gain(
        dataset, embedding, bubbles, eval_students=eval_students,
        k_values=k_values, thresholds=thresholds, seed=seed,
    )
    return embedding, bubbles, report
