"""Core skill-space model: domain types and the pure per-interaction math.

Students, lessons, and assessments live in a shared d-dimensional
non-negative skill space. An assessment is passed with probability
logistic(delta), where delta compares the student's skill projection
onto the assessment's requirement direction against the requirement
norm, plus unbounded student/assessment bias scalars. Completing a
lesson shifts the student's state by the lesson's gain vector, scaled
by a logistic prerequisite gate when the lesson carries prerequisites,
plus isotropic Gaussian noise.

All functions here are pure and operate on single interactions; the
estimation module assembles them (vectorized) into the full objective.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import expit

# Norm floor below which requirement/prerequisite vectors make delta
# numerically meaningless. Pure operations reject such vectors; the
# estimation module clips norms up to this value instead so optimizer
# iterates stay differentiable.
EPS_NORM = 1e-6


class DegenerateModuleError(ValueError):
    """Requirement or prerequisite vector has norm below EPS_NORM."""


def _as_skill_array(values, name: str = "skill vector") -> np.ndarray:
    v = np.asarray(values, dtype=float)
    if v.ndim != 1 or v.size < 1:
        raise ValueError(f"{name} must be a 1-d array with at least one entry, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError(f"{name} must be finite")
    if np.any(v < 0):
        raise ValueError(f"{name} must be entrywise non-negative")
    return v


def check_skill_vector(values, d: Optional[int] = None, name: str = "skill vector") -> np.ndarray:
    """Validate a latent skill vector (non-negative, finite, optionally of dimension d)."""
    v = _as_skill_array(values, name)
    if d is not None and v.size != d:
        raise ValueError(f"{name} has dimension {v.size}, expected {d}")
    return v


@dataclass
class AssessmentParams:
    """Requirement vector plus an unbounded easiness bias."""

    requirements: np.ndarray
    bias: float = 0.0

    def __post_init__(self):
        self.requirements = check_skill_vector(self.requirements, name="assessment requirements")
        self.bias = float(self.bias)


@dataclass
class LessonParams:
    """Gain vector plus optional prerequisite vector (absent = ungated update)."""

    gains: np.ndarray
    prereqs: Optional[np.ndarray] = None

    def __post_init__(self):
        self.gains = check_skill_vector(self.gains, name="lesson gains")
        if self.prereqs is not None:
            self.prereqs = check_skill_vector(self.prereqs, self.gains.size, name="lesson prereqs")


@dataclass
class StudentParams:
    """Per-timestep skill states (T+1 rows for T lessons) plus an unbounded bias."""

    states: np.ndarray
    bias: float = 0.0

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float)
        if self.states.ndim != 2:
            raise ValueError(f"student states must be a (T+1, d) array, got shape {self.states.shape}")
        for row in self.states:
            check_skill_vector(row, name="student state")
        self.bias = float(self.bias)

    @property
    def n_timesteps(self) -> int:
        return self.states.shape[0] - 1

    def state(self, t: int) -> np.ndarray:
        return self.states[t]


@dataclass
class Hyperparameters:
    """Model and optimizer configuration.

    use_lessons=False collapses each student to a single static state and
    drops all transition terms; use_prereqs requires use_lessons;
    use_bias=False pins both bias scalars at zero and removes them from
    the parameter vector.
    """

    d: int = 2
    beta: float = 1e-4
    sigma2: float = 0.5
    use_lessons: bool = True
    use_prereqs: bool = True
    use_bias: bool = True
    max_iter: int = 1000
    tol: float = 1e-3
    restarts: int = 3
    memory: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.d < 1:
            raise ValueError("embedding dimension d must be >= 1")
        if self.beta < 0:
            raise ValueError("regularization weight beta must be >= 0")
        if self.sigma2 <= 0:
            raise ValueError("transition variance sigma2 must be > 0")
        if self.tol <= 0:
            raise ValueError("relative tolerance must be > 0")
        if self.use_prereqs and not self.use_lessons:
            raise ValueError("use_prereqs requires use_lessons")
        if self.max_iter < 1 or self.restarts < 1 or self.memory < 1:
            raise ValueError("max_iter, restarts, and memory must be >= 1")

    def replace(self, **kwargs) -> "Hyperparameters":
        from dataclasses import replace

        return replace(self, **kwargs)


def _checked_norm(v: np.ndarray, what: str) -> float:
    n = float(np.linalg.norm(v))
    if n < EPS_NORM:
        raise DegenerateModuleError(f"{what} has norm {n:.3g} < {EPS_NORM:g}")
    return n


def _check_dims(s: np.ndarray, v: np.ndarray):
    if s.shape != v.shape:
        raise ValueError(f"dimension mismatch: {s.shape} vs {v.shape}")


def delta_assessment(s: np.ndarray, a: AssessmentParams, gamma_s: float = 0.0) -> float:
    """Signed margin of student s against assessment a: projection minus difficulty plus biases."""
    s = np.asarray(s, dtype=float)
    _check_dims(s, a.requirements)
    na = _checked_norm(a.requirements, "assessment requirements")
    return float(s @ a.requirements / na - na + gamma_s + a.bias)


def pass_probability(s: np.ndarray, a: AssessmentParams, gamma_s: float = 0.0) -> float:
    """Bernoulli pass probability logistic(delta_assessment(s, a, gamma_s))."""
    return float(expit(delta_assessment(s, a, gamma_s)))


def prereq_gate(s: np.ndarray, q: np.ndarray) -> float:
    """Logistic gate on how fully a lesson's gains are realized; bias-free by construction."""
    s = np.asarray(s, dtype=float)
    q = np.asarray(q, dtype=float)
    _check_dims(s, q)
    nq = _checked_norm(q, "lesson prereqs")
    return float(expit(s @ q / nq - nq))


def lesson_update_mean(s: np.ndarray, lesson: LessonParams) -> np.ndarray:
    """Expected post-lesson state: s + gains, gated by the prerequisite logistic when present."""
    s = np.asarray(s, dtype=float)
    _check_dims(s, lesson.gains)
    if lesson.prereqs is None:
        return s + lesson.gains
    return s + lesson.gains * prereq_gate(s, lesson.prereqs)


def lesson_transition_loglik(
    s_next: np.ndarray, s_prev: np.ndarray, lesson: LessonParams, sigma2: float
) -> float:
    """Log density of s_next under the isotropic Gaussian centered at lesson_update_mean."""
    if sigma2 <= 0:
        raise ValueError("sigma2 must be > 0")
    s_next = np.asarray(s_next, dtype=float)
    s_prev = np.asarray(s_prev, dtype=float)
    _check_dims(s_next, s_prev)
    mean = lesson_update_mean(s_prev, lesson)
    d = s_prev.size
    resid = s_next - mean
    return float(-0.5 * d * math.log(2 * math.pi * sigma2) - resid @ resid / (2 * sigma2))


def assessment_loglik(result: int, s: np.ndarray, a: AssessmentParams, gamma_s: float = 0.0) -> float:
    """Bernoulli log-likelihood of a pass/fail result."""
    if result not in (0, 1):
        raise ValueError(f"result must be 0 or 1, got {result!r}")
    delta = delta_assessment(s, a, gamma_s)
    # log(expit(x)) = -log(1 + exp(-x)), numerically stable in both tails
    if result == 1:
        return float(-np.logaddexp(0.0, -delta))
    return float(-np.logaddexp(0.0, delta))


# ---------------------------------------------------------------------------
# Analytic gradients. Each mirrors the value function above and returns
# partials with respect to every contributing parameter. The quotient-rule
# terms through ||a|| and ||q|| are included: both the projection numerator
# and the -||.|| difficulty term move with the vector.
# ---------------------------------------------------------------------------


@dataclass
class DeltaGrad:
    """Partials of delta_assessment."""

    wrt_s: np.ndarray
    wrt_a: np.ndarray
    wrt_gamma_s: float
    wrt_gamma_a: float


def delta_assessment_grad(s: np.ndarray, a: AssessmentParams, gamma_s: float = 0.0) -> DeltaGrad:
    s = np.asarray(s, dtype=float)
    _check_dims(s, a.requirements)
    av = a.requirements
    na = _checked_norm(av, "assessment requirements")
    wrt_s = av / na
    wrt_a = s / na - (s @ av) / na**3 * av - av / na
    return DeltaGrad(wrt_s=wrt_s, wrt_a=wrt_a, wrt_gamma_s=1.0, wrt_gamma_a=1.0)


def pass_probability_grad(s: np.ndarray, a: AssessmentParams, gamma_s: float = 0.0) -> DeltaGrad:
    """Chain rule through the logistic: p(1-p) times the delta partials."""
    p = pass_probability(s, a, gamma_s)
    g = delta_assessment_grad(s, a, gamma_s)
    c = p * (1.0 - p)
    return DeltaGrad(wrt_s=c * g.wrt_s, wrt_a=c * g.wrt_a, wrt_gamma_s=c, wrt_gamma_a=c)


def assessment_loglik_grad(
    result: int, s: np.ndarray, a: AssessmentParams, gamma_s: float = 0.0
) -> DeltaGrad:
    """d loglik / d theta = (result - p) * d delta / d theta."""
    if result not in (0, 1):
        raise ValueError(f"result must be 0 or 1, got {result!r}")
    p = pass_probability(s, a, gamma_s)
    g = delta_assessment_grad(s, a, gamma_s)
    c = result - p
    return DeltaGrad(wrt_s=c * g.wrt_s, wrt_a=c * g.wrt_a, wrt_gamma_s=c, wrt_gamma_a=c)


@dataclass
class MeanJacobian:
    """Jacobians of lesson_update_mean (rows index mean coordinates)."""

    wrt_s: np.ndarray
    wrt_gains: np.ndarray
    wrt_prereqs: Optional[np.ndarray] = None


def lesson_update_mean_grad(s: np.ndarray, lesson: LessonParams) -> MeanJacobian:
    s = np.asarray(s, dtype=float)
    _check_dims(s, lesson.gains)
    d = s.size
    eye = np.eye(d)
    if lesson.prereqs is None:
        return MeanJacobian(wrt_s=eye.copy(), wrt_gains=eye.copy())
    q = lesson.prereqs
    nq = _checked_norm(q, "lesson prereqs")
    g = prereq_gate(s, q)
    gg = g * (1.0 - g)
    dgate_ds = gg * q / nq
    dgate_dq = gg * (s / nq - (s @ q) / nq**3 * q - q / nq)
    return MeanJacobian(
        wrt_s=eye + np.outer(lesson.gains, dgate_ds),
        wrt_gains=g * eye,
        wrt_prereqs=np.outer(lesson.gains, dgate_dq),
    )


@dataclass
class TransitionGrad:
    """Partials of lesson_transition_loglik."""

    wrt_s_next: np.ndarray
    wrt_s_prev: np.ndarray
    wrt_gains: np.ndarray
    wrt_prereqs: Optional[np.ndarray] = None


def lesson_transition_loglik_grad(
    s_next: np.ndarray, s_prev: np.ndarray, lesson: LessonParams, sigma2: float
) -> TransitionGrad:
    if sigma2 <= 0:
        raise ValueError("sigma2 must be > 0")
    s_next = np.asarray(s_next, dtype=float)
    s_prev = np.asarray(s_prev, dtype=float)
    _check_dims(s_next, s_prev)
    mean = lesson_update_mean(s_prev, lesson)
    e = (s_next - mean) / sigma2
    jac = lesson_update_mean_grad(s_prev, lesson)
    wrt_prereqs = None if jac.wrt_prereqs is None else e @ jac.wrt_prereqs
    return TransitionGrad(
        wrt_s_next=-e,
        wrt_s_prev=e @ jac.wrt_s,
        wrt_gains=e @ jac.wrt_gains,
        wrt_prereqs=wrt_prereqs,
    )
