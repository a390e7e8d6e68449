"""Offline prediction evaluation.

The validation protocol follows the replay convention: each fold trains
jointly on the full histories of the training students and the truncated
histories of the validation students, then scores the assessment
interactions immediately following the truncations. Validation AUC is
averaged over independent restarts to damp initialization sensitivity;
cross-fold spread gives the standard error.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Optional, Sequence

import numpy as np
from scipy import stats

from . import estimation
from .irt import assessment_records, fit_irt, refit_irt_students
from .model import Hyperparameters
from .traces import Dataset, Interaction, fold_assignments, split_students, truncate_for_validation

log = logging.getLogger(__name__)


class UndefinedAUCError(ValueError):
    """AUC needs at least one positive and one negative label."""


def auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Area under the ROC curve as the tie-corrected Mann-Whitney statistic.

    Equals P(score+ > score-) + 0.5 P(tie) over all positive-negative pairs;
    computed via average ranks, which reproduces the all-pairs count exactly
    (rank sums stay half-integers, hence exact in floating point).
    """
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be 1-d arrays of equal length")
    n = scores.size
    n_pos = int(np.sum(labels == 1))
    n_neg = n - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAUCError("labels contain a single class; AUC is undefined")

    order = np.argsort(scores, kind="mergesort")
    sorted_scores = scores[order]
    new_group = np.r_[True, sorted_scores[1:] != sorted_scores[:-1]]
    group_id = np.cumsum(new_group) - 1
    first_rank = np.flatnonzero(new_group) + 1
    group_size = np.bincount(group_id)
    avg_rank = first_rank + (group_size - 1) / 2.0
    ranks = np.empty(n)
    ranks[order] = avg_rank[group_id]

    rank_sum_pos = float(np.sum(ranks[np.asarray(labels) == 1]))
    u = rank_sum_pos - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def path_entropy(dataset: Dataset) -> float:
    """Entropy (bits) of the first-order module-transition chain.

    Rows of the empirical transition matrix are weighted by the visit
    distribution over source modules (share of outgoing transitions).
    No observed transitions yields 0.
    """
    counts: dict[str, dict[str, int]] = {}
    total = 0
    for student in dataset.student_ids:
        h = dataset.histories[student]
        for a, b in zip(h, h[1:]):
            row = counts.setdefault(a.module_id, {})
            row[b.module_id] = row.get(b.module_id, 0) + 1
            total += 1
    if total == 0:
        return 0.0
    entropy = 0.0
    for row in counts.values():
        n_row = sum(row.values())
        weight = n_row / total
        h_row = -sum((c / n_row) * math.log2(c / n_row) for c in row.values())
        entropy += weight * h_row
    return entropy


class HeldOutPoint(NamedTuple):
    student_id: str
    assessment_id: str
    timestep: int  # lessons completed before the held-out run
    label: int


def _derived_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def _flip_results(histories: dict[str, list[Interaction]], flip_prob: float, seed: int):
    """Independently invert each assessment result with probability flip_prob."""
    if flip_prob <= 0:
        return histories
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))
    out = {}
    for s in sorted(histories):
        new_h = []
        for it in histories[s]:
            if it.is_assessment and rng.random() < flip_prob:
                it = Interaction(it.student_id, it.module_id, it.kind, it.order_key, 1 - it.result)
            new_h.append(it)
        out[s] = new_h
    return out


@dataclass
class FoldResult:
    """One fold of the replay protocol, restart-averaged."""

    auc_per_restart: list[float]
    points: list[HeldOutPoint]
    scores_per_restart: list[np.ndarray]
    cold_start_points: int = 0
    skipped: bool = False

    @property
    def auc_mean(self) -> float:
        return float(np.mean(self.auc_per_restart)) if self.auc_per_restart else float("nan")


def _assemble_fold(
    dataset: Dataset,
    train_students: Sequence[str],
    val_students: Sequence[str],
    depth: Optional[int] = None,
) -> tuple[dict[str, list[Interaction]], list[HeldOutPoint], dict[str, list[Interaction]]]:
    """Joint training histories plus held-out points for the validation students."""
    trunc = truncate_for_validation(dataset, mode="last-assessment", students=val_students)
    histories: dict[str, list[Interaction]] = {
        s: list(dataset.histories[s]) for s in train_students
    }
    points: list[HeldOutPoint] = []
    prefixes: dict[str, list[Interaction]] = {}
    for s in sorted(val_students):
        if s in trunc.skipped_students or s not in trunc.training_histories:
            histories[s] = list(dataset.histories[s])  # no assessments to hold out
            continue
        prefix = trunc.training_histories[s]
        if depth is not None:
            prefix = _clip_depth(prefix, depth)
        histories[s] = prefix
        prefixes[s] = prefix
        t = sum(1 for it in prefix if it.is_lesson)
        for it in trunc.held_out[s]:
            points.append(HeldOutPoint(s, it.module_id, t, int(it.result)))
    return histories, points, prefixes


def _clip_depth(prefix: list[Interaction], depth: int) -> list[Interaction]:
    """Keep the most recent `depth` lessons plus everything after that cut."""
    total_lessons = sum(1 for it in prefix if it.is_lesson)
    if depth >= total_lessons:
        return prefix
    cutoff = total_lessons - depth  # keep lessons with index > cutoff
    kept = []
    seen_lessons = 0
    for it in prefix:
        if it.is_lesson:
            seen_lessons += 1
            if seen_lessons > cutoff:
                kept.append(it)
        elif seen_lessons >= cutoff:
            kept.append(it)
    return kept


def _evaluate_fold(
    dataset: Dataset,
    train_students: Sequence[str],
    val_students: Sequence[str],
    hyper: Hyperparameters,
    restarts: int,
    seed_parts: tuple[int, ...],
    flip_prob: float = 0.0,
    flip_seed: int = 0,
    depth: Optional[int] = None,
) -> FoldResult:
    histories, points, _ = _assemble_fold(dataset, train_students, val_students, depth=depth)
    if not points:
        return FoldResult([], [], [], skipped=True)
    labels = np.array([p.label for p in points])
    if labels.min() == labels.max():
        log.warning("fold skipped: held-out labels are single-class")
        return FoldResult([], points, [], skipped=True)

    histories = _flip_results(histories, flip_prob, flip_seed)
    joint = Dataset(histories=histories)

    aucs, score_sets = [], []
    cold = 0
    for r in range(restarts):
        h = hyper.replace(seed=_derived_seed(hyper.seed, *seed_parts, r), restarts=1)
        emb = estimation.fit(joint, h)
        scores = np.empty(len(points))
        cold = 0
        for i, p in enumerate(points):
            if p.assessment_id not in emb.assessments:
                cold += 1
            scores[i] = emb.pass_probability(p.student_id, p.assessment_id, p.timestep)
        aucs.append(auc(scores, labels))
        score_sets.append(scores)
    if cold:
        log.warning("fold scored %d held-out points with cold-start assessments", cold)
    return FoldResult(aucs, points, score_sets, cold_start_points=cold)


def _evaluate_fold_irt(
    dataset: Dataset,
    train_students: Sequence[str],
    val_students: Sequence[str],
    kind: str,
    regularization: float,
    seed_parts: tuple[int, ...],
    base_seed: int,
    restarts: int = 1,
) -> FoldResult:
    histories, points, prefixes = _assemble_fold(dataset, train_students, val_students)
    if not points:
        return FoldResult([], [], [], skipped=True)
    labels = np.array([p.label for p in points])
    if labels.min() == labels.max():
        log.warning("fold skipped: held-out labels are single-class")
        return FoldResult([], points, [], skipped=True)

    train_records = assessment_records({s: dataset.histories[s] for s in train_students})
    prefix_records = assessment_records(prefixes)
    aucs, score_sets = [], []
    for r in range(restarts):
        seed = _derived_seed(base_seed, *seed_parts, r)
        params = fit_irt(kind, train_records, regularization=regularization, seed=seed)
        # validation abilities refit on truncated prefixes with items frozen;
        # students with empty prefixes fall back to cold-start zeros
        refit = refit_irt_students(params, prefix_records, seed=seed)
        scores = np.array([refit.predict(p.student_id, p.assessment_id) for p in points])
        aucs.append(auc(scores, labels))
        score_sets.append(scores)
    return FoldResult(aucs, points, score_sets)


@dataclass
class GridPointReport:
    sigma2: float
    beta: float
    fold_aucs: list[float]
    mean_auc: float
    se_auc: float
    n_folds_used: int


@dataclass
class CrossValidationReport:
    """Validation AUC per (sigma2, beta) grid point, plus the selected point."""

    rows: list[GridPointReport]
    best_sigma2: float
    best_beta: float
    folds: list[list[str]]
    seed: int
    test_auc: Optional[float] = None

    def to_csv(self, path: str) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["sigma2", "beta", "mean_auc", "se_auc", "n_folds_used", "fold_aucs"])
            for r in self.rows:
                w.writerow(
                    [r.sigma2, r.beta, f"{r.mean_auc:.6f}", f"{r.se_auc:.6f}", r.n_folds_used,
                     ";".join(f"{a:.6f}" for a in r.fold_aucs)]
                )

    def summary(self) -> dict:
        return {
            "best_sigma2": self.best_sigma2,
            "best_beta": self.best_beta,
            "test_auc": self.test_auc,
            "seed": self.seed,
            "rows": [
                {"sigma2": r.sigma2, "beta": r.beta, "mean_auc": r.mean_auc, "se_auc": r.se_auc}
                for r in self.rows
            ],
        }


def _mean_se(values: list[float]) -> tuple[float, float]:
    if not values:
        return float("nan"), float("nan")
    arr = np.asarray(values)
    se = float(arr.std(ddof=1) / math.sqrt(arr.size)) if arr.size > 1 else 0.0
    return float(arr.mean()), se


DEFAULT_SIGMA2_GRID = (0.1, 0.25, 0.5, 1.0)
DEFAULT_BETA_GRID = (1e-6, 1e-4, 1e-2, 1.0)


def cross_validate(
    dataset: Dataset,
    sigma2_grid: Sequence[float] = DEFAULT_SIGMA2_GRID,
    beta_grid: Sequence[float] = DEFAULT_BETA_GRID,
    folds: int = 10,
    hyper: Optional[Hyperparameters] = None,
    restarts: int = 2,
    seed: int = 0,
    test_fraction: Optional[float] = None,
) -> CrossValidationReport:
    """Grid-search (sigma2, beta) by k-fold truncated-history validation AUC.

    Folds partition students; each grid point sees identical folds and fit
    seeds, so comparisons are paired. When `test_fraction` is given, that
    share of students is carved off first and scored once with the selected
    grid point.
    """
    hyper = hyper or Hyperparameters()
    test_students: list[str] = []
    cv_dataset = dataset
    if test_fraction:
        rest, test_students = split_students(
            dataset, [1.0 - test_fraction, test_fraction], seed=_derived_seed(seed, 999983)
        )
        cv_dataset = dataset.subset(rest)
    fold_sets = fold_assignments(cv_dataset, folds, seed=seed)
    all_students = set(cv_dataset.student_ids)

    rows: list[GridPointReport] = []
    for sigma2 in sigma2_grid:
        for beta in beta_grid:
            point_hyper = hyper.replace(sigma2=float(sigma2), beta=float(beta), seed=seed)
            fold_aucs = []
            for f, val in enumerate(fold_sets):
                train = sorted(all_students - set(val))
                res = _evaluate_fold(
                    cv_dataset, train, val, point_hyper, restarts, seed_parts=(f,)
                )
                if not res.skipped:
                    fold_aucs.append(res.auc_mean)
            mean, se = _mean_se(fold_aucs)
            rows.append(GridPointReport(float(sigma2), float(beta), fold_aucs, mean, se, len(fold_aucs)))

    scored = [r for r in rows if not math.isnan(r.mean_auc)]
    best = max(scored, key=lambda r: r.mean_auc) if scored else rows[0]
    report = CrossValidationReport(
        rows=rows, best_sigma2=best.sigma2, best_beta=best.beta, folds=fold_sets, seed=seed
    )
    if test_students:
        test_hyper = hyper.replace(sigma2=best.sigma2, beta=best.beta, seed=seed)
        res = _evaluate_fold(dataset, cv_dataset.student_ids, test_students, test_hyper, restarts, seed_parts=(folds,))
        report.test_auc = res.auc_mean if not res.skipped else None
    return report


LESION_VARIANTS = (
    ("NNN", dict(use_lessons=False, use_prereqs=False, use_bias=False)),
    ("NNY", dict(use_lessons=False, use_prereqs=False, use_bias=True)),
    ("YNN", dict(use_lessons=True, use_prereqs=False, use_bias=False)),
    ("YNY", dict(use_lessons=True, use_prereqs=False, use_bias=True)),
    ("YYN", dict(use_lessons=True, use_prereqs=True, use_bias=False)),
    ("YYY", dict(use_lessons=True, use_prereqs=True, use_bias=True)),
)
BASELINE_KINDS = ("1pl", "2pl", "mirt")


@dataclass
class LesionRow:
    label: str
    use_lessons: Optional[bool]
    use_prereqs: Optional[bool]
    use_bias: Optional[bool]
    fold_aucs: list[float]
    mean_auc: float
    se_auc: float
    test_auc: Optional[float] = None


@dataclass
class LesionReport:
    rows: list[LesionRow]
    folds: list[list[str]]
    seed: int

    def row(self, label: str) -> LesionRow:
        for r in self.rows:
            if r.label == label:
                return r
        raise KeyError(label)

    def to_csv(self, path: str) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["model", "lessons", "prereqs", "bias", "val_auc_mean", "val_auc_se", "n_folds", "test_auc", "fold_aucs"])
            for r in self.rows:
                flag = lambda v: "" if v is None else ("Y" if v else "N")
                w.writerow(
                    [r.label, flag(r.use_lessons), flag(r.use_prereqs), flag(r.use_bias),
                     f"{r.mean_auc:.6f}", f"{r.se_auc:.6f}", len(r.fold_aucs),
                     "" if r.test_auc is None else f"{r.test_auc:.6f}",
                     ";".join(f"{a:.6f}" for a in r.fold_aucs)]
                )


def lesion_grid(
    dataset: Dataset,
    folds: int = 10,
    hyper: Optional[Hyperparameters] = None,
    irt_regularization: float = 1e-2,
    restarts: int = 2,
    seed: int = 0,
    variants: Sequence[str] = tuple(label for label, _ in LESION_VARIANTS),
    baselines: Sequence[str] = BASELINE_KINDS,
    test_fraction: Optional[float] = None,
) -> LesionReport:
    """Validation AUC for the six embedding variants and three IRT baselines.

    All rows share fold assignments and fit seeds so row comparisons are
    paired across folds.
    """
    hyper = hyper or Hyperparameters()
    test_students: list[str] = []
    cv_dataset = dataset
    if test_fraction:
        rest, test_students = split_students(dataset, [1.0 - test_fraction, test_fraction], seed=_derived_seed(seed, 999983))
        cv_dataset = dataset.subset(rest)
    fold_sets = fold_assignments(cv_dataset, folds, seed=seed)
    all_students = set(cv_dataset.student_ids)
    wanted = set(variants)

    rows: list[LesionRow] = []
    for label, flags in LESION_VARIANTS:
        if label not in wanted:
            continue
        row_hyper = hyper.replace(seed=seed, **flags)
        fold_aucs = []
        for f, val in enumerate(fold_sets):
            train = sorted(all_students - set(val))
            res = _evaluate_fold(cv_dataset, train, val, row_hyper, restarts, seed_parts=(f,))
            if not res.skipped:
                fold_aucs.append(res.auc_mean)
        mean, se = _mean_se(fold_aucs)
        test_auc = None
        if test_students:
            res = _evaluate_fold(dataset, cv_dataset.student_ids, test_students, row_hyper, restarts, seed_parts=(folds,))
            test_auc = res.auc_mean if not res.skipped else None
        rows.append(LesionRow(f"embedding-{label}", flags["use_lessons"], flags["use_prereqs"], flags["use_bias"], fold_aucs, mean, se, test_auc))

    for kind in baselines:
        fold_aucs = []
        for f, val in enumerate(fold_sets):
            train = sorted(all_students - set(val))
            res = _evaluate_fold_irt(cv_dataset, train, val, kind, irt_regularization, seed_parts=(f,), base_seed=seed)
            if not res.skipped:
                fold_aucs.append(res.auc_mean)
        mean, se = _mean_se(fold_aucs)
        test_auc = None
        if test_students:
            res = _evaluate_fold_irt(dataset, cv_dataset.student_ids, test_students, kind, irt_regularization, seed_parts=(folds,), base_seed=seed)
            test_auc = res.auc_mean if not res.skipped else None
        rows.append(LesionRow(f"irt-{kind}", None, None, None, fold_aucs, mean, se, test_auc))
    return LesionReport(rows=rows, folds=fold_sets, seed=seed)


def paired_t_test(fold_aucs_a: Sequence[float], fold_aucs_b: Sequence[float]) -> tuple[float, float]:
    """Paired t-test over per-fold AUCs; returns (statistic, p-value)."""
    if len(fold_aucs_a) != len(fold_aucs_b):
        raise ValueError("paired t-test needs equal-length fold AUC lists")
    res = stats.ttest_rel(fold_aucs_a, fold_aucs_b)
    return float(res.statistic), float(res.pvalue)


@dataclass
class HoldoutReport:
    """Single 80/20-style truncated-history evaluation, restart-averaged."""

    auc_per_restart: list[float]
    points: list[HeldOutPoint]
    scores_per_restart: list[np.ndarray]
    train_students: list[str]
    val_students: list[str]
    cold_start_points: int = 0

    @property
    def auc_mean(self) -> float:
        return float(np.mean(self.auc_per_restart))

    @property
    def auc_se(self) -> float:
        return _mean_se(self.auc_per_restart)[1]


def evaluate_holdout(
    dataset: Dataset,
    hyper: Optional[Hyperparameters] = None,
    holdout_fraction: float = 0.2,
    restarts: int = 2,
    seed: int = 0,
    flip_prob: float = 0.0,
    depth: Optional[int] = None,
    train_subsample: Optional[int] = None,
    flip_seed: Optional[int] = None,
) -> HoldoutReport:
    """Hold out a student fraction, truncate them, joint-fit, and score.

    `flip_prob` symmetrically flips training assessment results (validation
    labels untouched); `depth` clips validation prefixes to the most recent
    lessons; `train_subsample` keeps only the first n shuffled full-history
    training students. Fit seeds do not depend on these knobs, so level 0 /
    full-depth / full-size reproduce the unmodified protocol exactly.
    """
    hyper = hyper or Hyperparameters()
    train, val = split_students(dataset, [1.0 - holdout_fraction, holdout_fraction], seed=seed)
    if train_subsample is not None and train_subsample < len(train):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 104729]))
        order = rng.permutation(len(train))
        train = sorted(train[i] for i in order[:train_subsample])
    res = _evaluate_fold(
        dataset, train, val, hyper.replace(seed=hyper.seed), restarts,
        seed_parts=(0,), flip_prob=flip_prob,
        flip_seed=seed if flip_seed is None else flip_seed, depth=depth,
    )
    if res.skipped:
        raise UndefinedAUCError("holdout produced no scoreable points (empty or single-class)")
    return HoldoutReport(
        auc_per_restart=res.auc_per_restart,
        points=res.points,
        scores_per_restart=res.scores_per_restart,
        train_students=list(train),
        val_students=list(val),
        cold_start_points=res.cold_start_points,
    )


@dataclass
class SweepRow:
    level: float
    auc_mean: float
    auc_se: float
    n_points: int


@dataclass
class SweepReport:
    kind: str
    rows: list[SweepRow]
    seed: int

    def to_csv(self, path: str) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["level", "auc_mean", "auc_se", "n_points"])
            for r in self.rows:
                w.writerow([r.level, f"{r.auc_mean:.6f}", f"{r.auc_se:.6f}", r.n_points])

    def plot_data(self) -> list[tuple[float, float, float]]:
        """Figure-style (x, y, stderr) triples."""
        return [(r.level, r.auc_mean, r.auc_se) for r in self.rows]


SWEEP_KINDS = ("noise", "depth", "training-size", "history-length")


def sensitivity_sweep(
    dataset: Dataset,
    kind: str,
    levels: Sequence[float],
    hyper: Optional[Hyperparameters] = None,
    holdout_fraction: float = 0.2,
    restarts: int = 2,
    seed: int = 0,
    flip_seed: Optional[int] = None,
) -> SweepReport:
    """Rebuild the training condition per level and report validation AUC.

    noise: flip each training result with probability level.
    depth: keep only the most recent `level` lessons of validation prefixes.
    training-size: keep `level` full-history training students (nested subsets).
    history-length: one protocol run, AUC bucketed by validation prefix length
    (levels are inclusive upper edges).
    """
    if kind not in SWEEP_KINDS:
        raise ValueError(f"unknown sweep kind {kind!r}; expected one of {SWEEP_KINDS}")
    hyper = hyper or Hyperparameters()
    rows: list[SweepRow] = []

    if kind == "history-length":
        report = evaluate_holdout(dataset, hyper, holdout_fraction, restarts, seed)
        edges = sorted(float(l) for l in levels)
        lower = -math.inf
        for edge in edges:
            idx = [i for i, p in enumerate(report.points) if lower < p.timestep <= edge]
            lower = edge
            if not idx:
                rows.append(SweepRow(edge, float("nan"), float("nan"), 0))
                continue
            labels = np.array([report.points[i].label for i in idx])
            if labels.min() == labels.max():
                log.warning("history-length bucket <=%s has single-class labels; skipped", edge)
                rows.append(SweepRow(edge, float("nan"), float("nan"), len(idx)))
                continue
            aucs = [auc(s[idx], labels) for s in report.scores_per_restart]
            mean, se = _mean_se(aucs)
            rows.append(SweepRow(edge, mean, se, len(idx)))
        return SweepReport(kind=kind, rows=rows, seed=seed)

    for level in levels:
        kwargs = {}
        if kind == "noise":
            kwargs["flip_prob"] = float(level)
            kwargs["flip_seed"] = flip_seed
        elif kind == "depth":
            kwargs["depth"] = int(level)
        elif kind == "training-size":
            kwargs["train_subsample"] = int(level)
        report = evaluate_holdout(dataset, hyper, holdout_fraction, restarts, seed, **kwargs)
        mean, se = _mean_se(report.auc_per_restart)
        rows.append(SweepRow(float(level), mean, se, len(report.points)))
    return SweepReport(kind=kind, rows=rows, seed=seed)
