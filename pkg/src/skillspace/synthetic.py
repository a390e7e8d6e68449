"""Synthetic fixtures and trace-corpus simulation.

Two families live here: small named-student scenario fixtures with
qualitative recovery assertions (fit the fixture, then check orderings
and geometry of the recovered embedding), and generative ground-truth
models that sample full trace corpora for oracle tests (simulate,
refit, compare against the generator's own predictions).

Scenario fixtures replicate each named student's history across clones
so module-interaction thresholds can be cleared; they are built as
unfiltered datasets because their narratives need repeated assessment
attempts, which first-attempt deduplication would discard.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import expit

from .estimation import Embedding
from .model import (
    EPS_NORM,
    AssessmentParams,
    Hyperparameters,
    LessonParams,
    lesson_update_mean,
)
from .traces import ASSESSMENT, LESSON, Dataset, Interaction

log = logging.getLogger(__name__)

SCENARIO_NAMES = ("simple", "independent-skills", "lesson-gains", "prerequisites")
DEFAULT_CLONES = 10


def _cosine(u: np.ndarray, v: np.ndarray) -> float:
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu < EPS_NORM or nv < EPS_NORM:
        return 0.0
    return float(u @ v / (nu * nv))


@dataclass
class AssertionResult:
    description: str
    passed: bool
    detail: str


@dataclass
class Scenario:
    """A named fixture plus the qualitative assertions its fit must satisfy."""

    name: str
    interactions: list[Interaction]
    hyper: Hyperparameters
    clones: int
    checks: list[Callable[["Scenario", Embedding], AssertionResult]] = field(default_factory=list)

    def dataset(self) -> Dataset:
        histories: dict[str, list[Interaction]] = {}
        for it in self.interactions:
            histories.setdefault(it.student_id, []).append(it)
        for h in histories.values():
            h.sort(key=lambda it: it.order_key)
        return Dataset(histories=histories)

    def clone_ids(self, student: str) -> list[str]:
        return [f"{student}-{c:02d}" for c in range(self.clones)]

    def mean_pass_probability(self, emb: Embedding, student: str, assessment: str, t: int) -> float:
        return float(
            np.mean([emb.pass_probability(cid, assessment, t) for cid in self.clone_ids(student)])
        )

    def mean_gain_norm(self, emb: Embedding, student: str) -> float:
        """Average magnitude of the state change across the first lesson."""
        norms = []
        for cid in self.clone_ids(student):
            states = emb.students[cid].states
            norms.append(float(np.linalg.norm(states[1] - states[0])))
        return float(np.mean(norms))

    def check(self, emb: Embedding) -> list[AssertionResult]:
        return [chk(self, emb) for chk in self.checks]


def _clone_histories(
    base: dict[str, list[tuple[str, str, Optional[int]]]], clones: int
) -> list[Interaction]:
    out = []
    for student in sorted(base):
        for c in range(clones):
            sid = f"{student}-{c:02d}"
            for key, (module, kind, result) in enumerate(base[student], start=1):
                out.append(Interaction(sid, module, kind, key, result))
    return out


def _check_simple(sc: Scenario, emb: Embedding) -> AssertionResult:
    p0 = sc.mean_pass_probability(emb, "alice", "A1", 0)
    p1 = sc.mean_pass_probability(emb, "alice", "A1", 1)
    return AssertionResult(
        "pass probability on A1 rises after completing L1",
        p1 > p0,
        f"p(t=0)={p0:.3f}, p(after L1)={p1:.3f}",
    )


def _check_independent_axes(sc: Scenario, emb: Embedding) -> AssertionResult:
    cos = _cosine(emb.assessments["A1"].requirements, emb.assessments["A2"].requirements)
    return AssertionResult(
        "requirement vectors of A1 and A2 sit on near-independent axes",
        cos < 0.5,
        f"cosine={cos:.3f}",
    )


def _check_gain_axes(sc: Scenario, emb: Embedding) -> AssertionResult:
    cos = _cosine(emb.lessons["L1"].gains, emb.lessons["L2"].gains)
    return AssertionResult(
        "gain vectors of L1 and L2 are near-orthogonal",
        cos < 0.5,
        f"cosine={cos:.3f}",
    )


def _check_prereq_gain(sc: Scenario, emb: Embedding) -> AssertionResult:
    gains = {s: sc.mean_gain_norm(emb, s) for s in ("mclovin", "fogell", "evan", "seth")}
    others = {s: g for s, g in gains.items() if s != "mclovin"}
    ok = all(gains["mclovin"] > g for g in others.values())
    return AssertionResult(
        "only the student meeting the prerequisites realizes the largest gain",
        ok,
        ", ".join(f"{s}={g:.3f}" for s, g in gains.items()),
    )


def _check_prereq_crossing(sc: Scenario, emb: Embedding) -> AssertionResult:
    probs = {s: sc.mean_pass_probability(emb, s, "A3", 1) for s in ("mclovin", "fogell", "evan", "seth")}
    ok = probs["mclovin"] > 0.5 and all(p < 0.5 for s, p in probs.items() if s != "mclovin")
    return AssertionResult(
        "only the prerequisite-satisfying student crosses 0.5 on the final assessment",
        ok,
        ", ".join(f"{s}={p:.3f}" for s, p in probs.items()),
    )


def scenario(name: str, clones: int = DEFAULT_CLONES) -> Scenario:
    """Build one of the four named fixtures with its recovery assertions."""
    if name not in SCENARIO_NAMES:
        raise ValueError(f"unknown scenario {name!r}; expected one of {SCENARIO_NAMES}")

    base_four = {
        "fogell": [("A1", ASSESSMENT, 0), ("A2", ASSESSMENT, 0)],
        "mclovin": [("A1", ASSESSMENT, 1), ("A2", ASSESSMENT, 1)],
        "evan": [("A1", ASSESSMENT, 0), ("A2", ASSESSMENT, 1)],
        "seth": [("A1", ASSESSMENT, 1), ("A2", ASSESSMENT, 0)],
    }
    hyper = Hyperparameters(
        d=2, beta=1e-4, sigma2=0.5, use_lessons=True, use_prereqs=False, use_bias=False,
        tol=1e-6, max_iter=500, restarts=3, seed=7,
    )

    if name == "simple":
        base = {"alice": [("A1", ASSESSMENT, 0), ("L1", LESSON, None), ("A1", ASSESSMENT, 1)]}
        checks = [_check_simple]
    elif name == "independent-skills":
        base = base_four
        hyper = hyper.replace(use_lessons=False)
        checks = [_check_independent_axes]
    elif name == "lesson-gains":
        base = dict(base_four)
        base["slater"] = [
            ("A1", ASSESSMENT, 0), ("A2", ASSESSMENT, 1), ("L1", LESSON, None),
            ("A1", ASSESSMENT, 1), ("A2", ASSESSMENT, 1),
        ]
        base["michaels"] = [
            ("A1", ASSESSMENT, 1), ("A2", ASSESSMENT, 0), ("L2", LESSON, None),
            ("A1", ASSESSMENT, 1), ("A2", ASSESSMENT, 1),
        ]
        checks = [_check_gain_axes]
    else:  # prerequisites
        base = {
            s: history + [("A3", ASSESSMENT, 0), ("L1", LESSON, None), ("A3", ASSESSMENT, 1 if s == "mclovin" else 0)]
            for s, history in base_four.items()
        }
        hyper = hyper.replace(use_prereqs=True)
        checks = [_check_prereq_gain, _check_prereq_crossing]

    return Scenario(
        name=name,
        interactions=_clone_histories(base, clones),
        hyper=hyper,
        clones=clones,
        checks=checks,
    )


def fit_scenario(sc: Scenario) -> tuple[Embedding, list[AssertionResult]]:
    from . import estimation

    emb = estimation.fit(sc.dataset(), sc.hyper)
    return emb, sc.check(emb)


# ---------------------------------------------------------------------------
# Generative ground truth and trace simulation
# ---------------------------------------------------------------------------


@dataclass
class PathPolicy:
    """How simulated students pick their next lesson.

    uniform: i.i.d. uniform over lessons each timestep.
    preference: each student favors lessons aligned with a private axis,
    weighting by exp(concentration * alignment).
    shuffle: each student completes every lesson exactly once in random
    order (horizon is then the lesson count).
    """

    kind: str = "uniform"
    concentration: float = 2.0

    def __post_init__(self):
        if self.kind not in ("uniform", "preference", "shuffle"):
            raise ValueError(f"unknown policy kind {self.kind!r}")


@dataclass
class GroundTruth:
    """Generating parameters plus the sampling knobs for trace simulation."""

    d: int
    sigma2: float
    lessons: dict[str, LessonParams]
    assessments: dict[str, AssessmentParams]
    policy: PathPolicy = field(default_factory=PathPolicy)
    init_low: float = 0.0
    init_high: float = 1.0
    student_bias_sd: float = 0.0
    assess_prob: float = 0.5
    assess_burst: int = 2
    use_bias: bool = False

    def pass_probability(self, state: np.ndarray, assessment_id: str, gamma_s: float = 0.0) -> float:
        a = self.assessments[assessment_id]
        na = max(float(np.linalg.norm(a.requirements)), EPS_NORM)
        return float(expit(float(state @ a.requirements) / na - na + gamma_s + a.bias))

    def expected_state_after(self, state: np.ndarray, lesson_ids: Sequence[str]) -> np.ndarray:
        s = np.asarray(state, dtype=float)
        for lid in lesson_ids:
            s = lesson_update_mean(s, self.lessons[lid])
        return s

    def matched_hyper(self, **overrides) -> Hyperparameters:
        """Hyperparameters matching the generator's structure."""
        base = Hyperparameters(
            d=self.d,
            sigma2=max(self.sigma2, 1e-3),
            beta=1e-4,
            use_lessons=bool(self.lessons),
            use_prereqs=bool(self.lessons) and any(l.prereqs is not None for l in self.lessons.values()),
            use_bias=self.use_bias,
        )
        return base.replace(**overrides) if overrides else base


@dataclass
class SimulationResult:
    interactions: list[Interaction]
    true_states: dict[str, np.ndarray]  # (T+1, d)s indexed by lesson count
    true_bias: dict[str, float]
    clipped: dict[str, np.ndarray]  # per-lesson-step flag: any coordinate clipped to 0

    def dataset(self, filter_config=None) -> Dataset:
        from .traces import FilterConfig, filter_dataset

        return filter_dataset(self.interactions, filter_config or FilterConfig())


def _draw_assessments(
    gt: GroundTruth, rng: np.random.Generator, unattempted: list[str]
) -> list[str]:
    if not unattempted or rng.random() >= gt.assess_prob:
        return []
    count = min(int(rng.integers(1, gt.assess_burst + 1)), len(unattempted))
    picks = rng.choice(len(unattempted), size=count, replace=False)
    return [unattempted[int(i)] for i in sorted(picks)]


def simulate(gt: GroundTruth, n_students: int, horizon: int, seed: int = 0) -> SimulationResult:
    """Sample a trace corpus from the generative model; deterministic given seed.

    Per student: initial state uniform on [init_low, init_high]^d, then per
    timestep one policy-drawn lesson (state updated by the Gaussian
    transition, negative coordinates clipped to zero and flagged) and an
    optional burst of assessments graded from the current state. Timestep 0
    may carry assessments before any lesson.
    """
    if n_students < 1 or horizon < 1:
        raise ValueError("n_students and horizon must be >= 1")
    lesson_ids = sorted(gt.lessons)
    assessment_ids = sorted(gt.assessments)
    gain_dirs = (
        np.array([gt.lessons[l].gains / max(np.linalg.norm(gt.lessons[l].gains), EPS_NORM) for l in lesson_ids])
        if lesson_ids
        else np.zeros((0, gt.d))
    )

    interactions: list[Interaction] = []
    true_states: dict[str, np.ndarray] = {}
    true_bias: dict[str, float] = {}
    clipped: dict[str, np.ndarray] = {}

    seeds = np.random.SeedSequence(seed).spawn(n_students)
    width = len(str(max(n_students - 1, 1)))
    for i in range(n_students):
        rng = np.random.default_rng(seeds[i])
        sid = f"sim{i:0{width}d}"
        state = rng.uniform(gt.init_low, gt.init_high, size=gt.d)
        gamma = float(rng.normal(0.0, gt.student_bias_sd)) if gt.student_bias_sd > 0 else 0.0

        sequence = None
        weights = None
        if not lesson_ids:
            steps = 0
        elif gt.policy.kind == "shuffle":
            sequence = [lesson_ids[int(j)] for j in rng.permutation(len(lesson_ids))]
            steps = len(sequence)
        else:
            steps = horizon
            if gt.policy.kind == "preference":
                axis = int(rng.integers(gt.d))
                weights = np.exp(gt.policy.concentration * gain_dirs[:, axis])
                weights = weights / weights.sum()

        states = [state.copy()]
        flags = []
        unattempted = list(assessment_ids)
        order_key = 0

        def grade(asmts, current_state):
            nonlocal order_key
            for aid in asmts:
                order_key += 1
                p = gt.pass_probability(current_state, aid, gamma)
                result = int(rng.random() < p)
                interactions.append(Interaction(sid, aid, ASSESSMENT, order_key, result))
                unattempted.remove(aid)

        grade(_draw_assessments(gt, rng, unattempted), state)
        for t in range(1, steps + 1):
            if sequence is not None:
                lid = sequence[t - 1]
            elif gt.policy.kind == "preference":
                lid = lesson_ids[int(rng.choice(len(lesson_ids), p=weights))]
            else:
                lid = lesson_ids[int(rng.integers(len(lesson_ids)))]
            order_key += 1
            interactions.append(Interaction(sid, lid, LESSON, order_key))
            mean = lesson_update_mean(state, gt.lessons[lid])
            if gt.sigma2 > 0:
                state = mean + rng.normal(0.0, math.sqrt(gt.sigma2), size=gt.d)
            else:
                state = mean.copy()
            was_clipped = bool(np.any(state < 0))
            state = np.maximum(state, 0.0)
            flags.append(was_clipped)
            states.append(state.copy())
            grade(_draw_assessments(gt, rng, unattempted), state)

        true_states[sid] = np.array(states)
        true_bias[sid] = gamma
        clipped[sid] = np.array(flags, dtype=bool)

    return SimulationResult(
        interactions=interactions, true_states=true_states, true_bias=true_bias, clipped=clipped
    )


# ---------------------------------------------------------------------------
# Oracle corpus builders
# ---------------------------------------------------------------------------


def random_ground_truth(
    d: int = 2,
    n_lessons: int = 8,
    n_assessments: int = 100,
    seed: int = 0,
    sigma2: float = 0.1,
    gain_scale: float = 0.45,
    max_req_norm: float = 5.0,
    with_bias: bool = False,
) -> GroundTruth:
    """Axis-structured generator: lessons teach mostly one skill, assessments
    require mostly one skill at difficulties spanning the trajectory range.

    Assessments are dense and outcomes strongly geometry-determined so the
    MAP objective favors structured trajectories over the flat degenerate
    optimum that dominates when results carry little signal.
    """
    rng = np.random.default_rng(seed)
    lessons = {}
    for k in range(n_lessons):
        axis = k % d
        g = np.abs(rng.normal(0.0, 0.03, size=d))
        g[axis] += gain_scale * (1.0 + 0.5 * rng.random())
        lessons[f"L{k:02d}"] = LessonParams(gains=g)
    assessments = {}
    for j in range(n_assessments):
        axis = j % d
        direction = np.abs(rng.normal(0.0, 0.05, size=d))
        direction[axis] += 1.0
        direction /= np.linalg.norm(direction)
        norm = rng.uniform(0.5, max_req_norm)
        bias = float(rng.normal(0.0, 1.0)) if with_bias else 0.0
        assessments[f"A{j:02d}"] = AssessmentParams(requirements=direction * norm, bias=bias)
    return GroundTruth(
        d=d,
        sigma2=sigma2,
        lessons=lessons,
        assessments=assessments,
        policy=PathPolicy(kind="preference", concentration=3.0),
        init_low=0.0,
        init_high=1.0,
        student_bias_sd=0.5 if with_bias else 0.0,
        assess_prob=0.9,
        assess_burst=3,
        use_bias=with_bias,
    )


def bias_dominated_ground_truth(seed: int = 0, n_lessons: int = 6, n_assessments: int = 12) -> GroundTruth:
    """Outcomes driven almost entirely by bias scalars; embeddings are tiny."""
    rng = np.random.default_rng(seed)
    lessons = {
        f"L{k:02d}": LessonParams(gains=np.abs(rng.normal(0.0, 0.02, size=2)))
        for k in range(n_lessons)
    }
    assessments = {}
    for j in range(n_assessments):
        direction = np.abs(rng.normal(0.0, 1.0, size=2)) + 0.1
        direction /= np.linalg.norm(direction)
        assessments[f"A{j:02d}"] = AssessmentParams(
            requirements=direction * 0.15, bias=float(rng.normal(0.0, 2.5))
        )
    return GroundTruth(
        d=2,
        sigma2=0.05,
        lessons=lessons,
        assessments=assessments,
        policy=PathPolicy(kind="uniform"),
        init_low=0.0,
        init_high=0.2,
        student_bias_sd=3.0,
        assess_prob=0.7,
        assess_burst=2,
        use_bias=True,
    )


@dataclass
class BubbleSpec:
    start_lesson: str
    end_assessment: str
    branch_a: tuple[str, ...]
    branch_b: tuple[str, ...]


@dataclass
class ConfoundedBubbleCorpus:
    """Planted two-branch bubbles with a type confounder driving both
    branch choice and outcomes.

    Strong students mostly take the weaker branch yet still pass, so the
    raw branch comparison understates the true branch effect; matching on
    pre-bubble signal (the type-revealing probe assessments) recovers it.
    Post-bubble lessons are drawn from a pool that includes the other
    branch's lessons, so full-history features do not linearly separate
    branch membership.
    """

    interactions: list[Interaction]
    lessons: dict[str, LessonParams]
    assessments: dict[str, AssessmentParams]
    bubble_specs: list[BubbleSpec]
    student_type: dict[str, str]  # "strong" | "weak"
    entry_state: dict[str, np.ndarray]  # true state after the start lesson
    taken_branch: dict[str, str]  # "a" | "b"
    bubble_of: dict[str, int]

    def dataset(self, filter_config=None) -> Dataset:
        from .traces import FilterConfig, filter_dataset

        return filter_dataset(self.interactions, filter_config or FilterConfig())

    def hyper(self, **overrides) -> Hyperparameters:
        base = Hyperparameters(
            d=2, sigma2=0.25, beta=1e-4, use_lessons=True, use_prereqs=False, use_bias=False
        )
        return base.replace(**overrides) if overrides else base

    def true_pass_probability(self, student_id: str, branch: str) -> float:
        spec = self.bubble_specs[self.bubble_of[student_id]]
        lessons = spec.branch_a if branch == "a" else spec.branch_b
        state = np.asarray(self.entry_state[student_id], dtype=float)
        for lid in lessons:
            state = lesson_update_mean(state, self.lessons[lid])
        a = self.assessments[spec.end_assessment]
        na = max(float(np.linalg.norm(a.requirements)), EPS_NORM)
        return float(expit(float(state @ a.requirements) / na - na + a.bias))

    def true_recommendation(self, student_id: str) -> str:
        return "a" if self.true_pass_probability(student_id, "a") >= self.true_pass_probability(student_id, "b") else "b"

    def true_gain(self, students: Optional[Sequence[str]] = None) -> float:
        """Planted estimand: expected relative gain over students who took
        their truly better branch, bubble-averaged, from true probabilities."""
        chosen = set(students) if students is not None else set(self.student_type)
        gains = []
        for b, _ in enumerate(self.bubble_specs):
            treated = [
                s for s in sorted(chosen)
                if self.bubble_of.get(s) == b and self.taken_branch[s] == self.true_recommendation(s)
            ]
            if not treated:
                continue
            rec = [self.true_pass_probability(s, self.true_recommendation(s)) for s in treated]
            alt = [
                self.true_pass_probability(s, "b" if self.true_recommendation(s) == "a" else "a")
                for s in treated
            ]
            denom = float(np.mean(alt))
            if denom > 0:
                gains.append((float(np.mean(rec)) - denom) / denom)
        return float(np.mean(gains))


def confounded_bubble_corpus(
    seed: int = 0,
    n_bubbles: int = 2,
    students_per_bubble: int = 240,
    strong_branch_b_rate: float = 0.8,
    weak_branch_a_rate: float = 0.8,
    transition_sd: float = 0.05,
) -> ConfoundedBubbleCorpus:
    """Construct the planted-bubble corpus used by the pipeline oracle tests."""
    lessons: dict[str, LessonParams] = {}
    assessments: dict[str, AssessmentParams] = {}
    specs: list[BubbleSpec] = []
    for b in range(n_bubbles):
        lessons[f"B{b}-start"] = LessonParams(gains=np.array([0.3, 0.3]))
        for i in range(2):
            lessons[f"B{b}-a{i}"] = LessonParams(gains=np.array([1.2, 0.0]))
            lessons[f"B{b}-b{i}"] = LessonParams(gains=np.array([0.0, 1.2]))
            lessons[f"B{b}-x{i}"] = LessonParams(gains=np.array([0.1, 0.1]))
        assessments[f"B{b}-pre0"] = AssessmentParams(requirements=np.array([1.5, 0.0]))
        assessments[f"B{b}-pre1"] = AssessmentParams(requirements=np.array([1.5, 0.0]))
        assessments[f"B{b}-end"] = AssessmentParams(requirements=np.array([2.0, 0.0]))
        specs.append(
            BubbleSpec(
                start_lesson=f"B{b}-start",
                end_assessment=f"B{b}-end",
                branch_a=(f"B{b}-a0", f"B{b}-a1"),
                branch_b=(f"B{b}-b0", f"B{b}-b1"),
            )
        )

    interactions: list[Interaction] = []
    student_type: dict[str, str] = {}
    entry_state: dict[str, np.ndarray] = {}
    taken_branch: dict[str, str] = {}
    bubble_of: dict[str, int] = {}

    def pass_prob(state: np.ndarray, aid: str) -> float:
        a = assessments[aid]
        na = max(float(np.linalg.norm(a.requirements)), EPS_NORM)
        return float(expit(float(state @ a.requirements) / na - na + a.bias))

    seeds = np.random.SeedSequence(seed).spawn(n_bubbles * students_per_bubble)
    idx = 0
    for b, spec in enumerate(specs):
        for i in range(students_per_bubble):
            rng = np.random.default_rng(seeds[idx])
            idx += 1
            sid = f"stu{b}{i:03d}"
            strong = i % 2 == 0
            student_type[sid] = "strong" if strong else "weak"
            bubble_of[sid] = b
            base = np.array([3.0, 0.3]) if strong else np.array([0.3, 0.3])
            state = base + rng.uniform(0.0, 0.2, size=2)

            if strong:
                branch = "b" if rng.random() < strong_branch_b_rate else "a"
            else:
                branch = "a" if rng.random() < weak_branch_a_rate else "b"
            taken_branch[sid] = branch

            key = 0
            for aid in (f"B{b}-pre0", f"B{b}-pre1"):
                key += 1
                interactions.append(
                    Interaction(sid, aid, ASSESSMENT, key, int(rng.random() < pass_prob(state, aid)))
                )

            def take(lid: str, state: np.ndarray) -> np.ndarray:
                mean = lesson_update_mean(state, lessons[lid])
                nxt = mean + rng.normal(0.0, transition_sd, size=2)
                return np.maximum(nxt, 0.0)

            key += 1
            interactions.append(Interaction(sid, spec.start_lesson, LESSON, key))
            state = take(spec.start_lesson, state)
            entry_state[sid] = state.copy()

            branch_lessons = spec.branch_a if branch == "a" else spec.branch_b
            for lid in branch_lessons:
                key += 1
                interactions.append(Interaction(sid, lid, LESSON, key))
                state = take(lid, state)

            end = spec.end_assessment
            key += 1
            interactions.append(
                Interaction(sid, end, ASSESSMENT, key, int(rng.random() < pass_prob(state, end)))
            )

            # post-bubble catch-up: two draws from the other branch plus electives
            other = spec.branch_b if branch == "a" else spec.branch_a
            pool = list(other) + [f"B{b}-x0", f"B{b}-x1"]
            picks = rng.choice(len(pool), size=2, replace=False)
            for j in sorted(picks):
                key += 1
                interactions.append(Interaction(sid, pool[int(j)], LESSON, key))
                state = take(pool[int(j)], state)

    return ConfoundedBubbleCorpus(
        interactions=interactions,
        lessons=lessons,
        assessments=assessments,
        bubble_specs=specs,
        student_type=student_type,
        entry_state=entry_state,
        taken_branch=taken_branch,
        bubble_of=bubble_of,
    )


@dataclass
class PrereqCorpus:
    """Phased corpus whose held-out outcomes hinge on prerequisite gating.

    Each student warms up, completes a variable number of foundation
    lessons (teaching skill 0, anchored by skill-0 assessments), then runs
    an unanchored streak of advanced lessons whose skill-1 gains are gated
    hard on skill 0, and finally attempts one skill-1 assessment. That
    final attempt is what last-assessment truncation holds out, so
    predicting it requires extrapolating the advanced streak: an ungated
    learning model adds the same expected gain for every student, while
    the gated model scales it by the student's foundation level.
    """

    interactions: list[Interaction]
    lessons: dict[str, LessonParams]
    assessments: dict[str, AssessmentParams]

    def dataset(self, filter_config=None) -> Dataset:
        from .traces import FilterConfig, filter_dataset

        return filter_dataset(self.interactions, filter_config or FilterConfig())

    def hyper(self, **overrides) -> Hyperparameters:
        base = Hyperparameters(
            d=2, sigma2=0.25, beta=0.1, use_lessons=True, use_prereqs=True, use_bias=False,
            tol=1e-5, max_iter=2000,
        )
        return base.replace(**overrides) if overrides else base


def prereq_dominated_corpus(
    seed: int = 0,
    n_students: int = 300,
    n_advanced: int = 3,
    transition_sd: float = 0.05,
) -> PrereqCorpus:
    rng_master = np.random.default_rng(seed)
    lessons = {
        f"W{k}": LessonParams(gains=np.array([0.3, 0.0]), prereqs=np.array([0.1, 0.05]))
        for k in range(3)
    }
    for k in range(3):
        lessons[f"F{k}"] = LessonParams(gains=np.array([1.6, 0.0]), prereqs=np.array([0.15, 0.1]))
        lessons[f"V{k}"] = LessonParams(gains=np.array([0.0, 1.5]), prereqs=np.array([3.2, 0.0]))
    assessments = {}
    skill0_items, skill1_items = [], []
    for j in range(12):
        rnd = rng_master.random()
        if j < 4:
            direction = np.array([1.0, 0.05 * (1 + rnd)])
            norm = 0.8 + (3.0 - 0.8) * rng_master.random()
            skill0_items.append(f"A{j:02d}")
        else:
            direction = np.array([0.05 * (1 + rnd), 1.0])
            norm = 1.2 + (4.0 - 1.2) * rng_master.random()
            skill1_items.append(f"A{j:02d}")
        direction = direction / np.linalg.norm(direction)
        assessments[f"A{j:02d}"] = AssessmentParams(requirements=direction * norm)

    def pass_prob(state, aid):
        a = assessments[aid]
        na = max(float(np.linalg.norm(a.requirements)), EPS_NORM)
        return float(expit(float(state @ a.requirements) / na - na))

    interactions: list[Interaction] = []
    seeds = np.random.SeedSequence(seed).spawn(n_students)
    for i in range(n_students):
        rng = np.random.default_rng(seeds[i])
        sid = f"stu{i:03d}"
        state = rng.uniform(0.0, 0.4, size=2)
        key = 0
        anchors = list(skill0_items)

        def emit_assessment(aid):
            nonlocal key
            key += 1
            interactions.append(
                Interaction(sid, aid, ASSESSMENT, key, int(rng.random() < pass_prob(state, aid)))
            )

        def emit_lesson(lid):
            nonlocal key, state
            key += 1
            interactions.append(Interaction(sid, lid, LESSON, key))
            mean = lesson_update_mean(state, lessons[lid])
            state = np.maximum(mean + rng.normal(0.0, transition_sd, size=2), 0.0)

        emit_assessment(anchors.pop(int(rng.integers(len(anchors)))))
        # foundation count and gated-lesson count vary independently, so
        # neither skill-0 level nor lesson count alone predicts the final
        # outcome; only their gated interaction does
        n_foundation = int(rng.integers(0, 4))
        foundation = ["W0", "W1", "W2"] + [f"F{k}" for k in range(n_foundation)]
        for lid in foundation:
            emit_lesson(lid)
            if anchors and rng.random() < 0.6:
                emit_assessment(anchors.pop(int(rng.integers(len(anchors)))))
        n_v = int(rng.integers(2, n_advanced + 2))
        start = int(rng.integers(3))
        for j in range(n_v):
            emit_lesson(f"V{(start + j) % 3}")
        emit_assessment(skill1_items[int(rng.integers(len(skill1_items)))])

    return PrereqCorpus(interactions=interactions, lessons=lessons, assessments=assessments)
