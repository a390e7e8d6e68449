"""Regularized MAP estimation of the full embedding.

The objective over a dataset is the sum of assessment Bernoulli
log-likelihoods and lesson-transition Gaussian log-densities, minus
beta times the sum of squared L2 norms of every embedding vector
(per-timestep student states, lesson gains, prerequisites, assessment
requirements). Bias scalars are neither regularized nor bounded; all
embedding coordinates carry a lower bound of zero. Maximization runs
a bounded limited-memory quasi-Newton with random restarts, keeping
the best restart by final objective.

Evaluation is vectorized: interactions are compiled once into index
arrays, and each objective/gradient call is a handful of gathers,
elementwise kernels, and bincount scatters.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np
from scipy.special import expit

from .model import (
    EPS_NORM,
    AssessmentParams,
    Hyperparameters,
    LessonParams,
    StudentParams,
)
from .optimize import MinimizeResult, minimize_bounded
from .traces import Dataset, Interaction, assign_timesteps

log = logging.getLogger(__name__)


class FitError(RuntimeError):
    """Every restart failed; carries per-restart diagnostics."""

    def __init__(self, message: str, diagnostics: list[dict]):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass
class ParameterIndex:
    """Bijective map between model parameters and a flat vector.

    Layout order: student states (all timesteps of student 0, then 1, ...),
    lesson gains, lesson prereqs, assessment requirements, student biases,
    assessment biases. Blocks that a lesion variant disables are absent.
    """

    students: list[str]
    lessons: list[str]
    assessments: list[str]
    d: int
    use_lessons: bool
    use_prereqs: bool
    use_bias: bool
    include_modules: bool
    state_rows: np.ndarray  # rows per student (T_i + 1)
    state_start: np.ndarray  # first state row of each student

    def __post_init__(self):
        self.n_state_rows = int(self.state_rows.sum())
        d = self.d
        offset = self.n_state_rows * d
        if self.include_modules and self.use_lessons:
            self.gains_base = offset
            offset += len(self.lessons) * d
        else:
            self.gains_base = None
        if self.include_modules and self.use_prereqs:
            self.prereqs_base = offset
            offset += len(self.lessons) * d
        else:
            self.prereqs_base = None
        if self.include_modules:
            self.reqs_base = offset
            offset += len(self.assessments) * d
        else:
            self.reqs_base = None
        self.n_embedding = offset
        if self.use_bias:
            self.sbias_base = offset
            offset += len(self.students)
            if self.include_modules:
                self.abias_base = offset
                offset += len(self.assessments)
            else:
                self.abias_base = None
        else:
            self.sbias_base = None
            self.abias_base = None
        self.size = offset
        self.student_pos = {s: i for i, s in enumerate(self.students)}
        self.lesson_pos = {m: k for k, m in enumerate(self.lessons)}
        self.assessment_pos = {m: j for j, m in enumerate(self.assessments)}

    @classmethod
    def build(
        cls,
        histories: dict[str, list[Interaction]],
        hyper: Hyperparameters,
        lessons: Sequence[str],
        assessments: Sequence[str],
        include_modules: bool = True,
    ) -> "ParameterIndex":
        students = sorted(histories)
        if hyper.use_lessons:
            rows = np.array(
                [1 + sum(1 for it in histories[s] if it.is_lesson) for s in students], dtype=int
            )
        else:
            rows = np.ones(len(students), dtype=int)
        start = np.concatenate([[0], np.cumsum(rows)[:-1]]) if students else np.zeros(0, dtype=int)
        return cls(
            students=students,
            lessons=sorted(lessons) if hyper.use_lessons else [],
            assessments=sorted(assessments),
            d=hyper.d,
            use_lessons=hyper.use_lessons,
            use_prereqs=hyper.use_prereqs,
            use_bias=hyper.use_bias,
            include_modules=include_modules,
            state_rows=rows,
            state_start=start.astype(int),
        )

    # -- flat offset lookups ------------------------------------------------

    def state_offset(self, student_id: str, t: int, coord: int) -> int:
        i = self.student_pos[student_id]
        if not 0 <= t < self.state_rows[i]:
            raise IndexError(f"timestep {t} out of range for student {student_id}")
        if not 0 <= coord < self.d:
            raise IndexError(f"coordinate {coord} out of range")
        return (int(self.state_start[i]) + t) * self.d + coord

    def gain_offset(self, lesson_id: str, coord: int) -> int:
        if self.gains_base is None:
            raise KeyError("lesson gains are not part of this parameter vector")
        return self.gains_base + self.lesson_pos[lesson_id] * self.d + coord

    def prereq_offset(self, lesson_id: str, coord: int) -> int:
        if self.prereqs_base is None:
            raise KeyError("lesson prereqs are not part of this parameter vector")
        return self.prereqs_base + self.lesson_pos[lesson_id] * self.d + coord

    def req_offset(self, assessment_id: str, coord: int) -> int:
        if self.reqs_base is None:
            raise KeyError("assessment requirements are not part of this parameter vector")
        return self.reqs_base + self.assessment_pos[assessment_id] * self.d + coord

    def student_bias_offset(self, student_id: str) -> int:
        if self.sbias_base is None:
            raise KeyError("bias terms are not part of this parameter vector")
        return self.sbias_base + self.student_pos[student_id]

    def assessment_bias_offset(self, assessment_id: str) -> int:
        if self.abias_base is None:
            raise KeyError("assessment bias terms are not part of this parameter vector")
        return self.abias_base + self.assessment_pos[assessment_id]

    def all_offsets(self) -> Iterator[int]:
        """Enumerate the flat offset of every addressable parameter once."""
        for s in self.students:
            i = self.student_pos[s]
            for t in range(int(self.state_rows[i])):
                for c in range(self.d):
                    yield self.state_offset(s, t, c)
        if self.gains_base is not None:
            for m in self.lessons:
                for c in range(self.d):
                    yield self.gain_offset(m, c)
        if self.prereqs_base is not None:
            for m in self.lessons:
                for c in range(self.d):
                    yield self.prereq_offset(m, c)
        if self.reqs_base is not None:
            for m in self.assessments:
                for c in range(self.d):
                    yield self.req_offset(m, c)
        if self.sbias_base is not None:
            for s in self.students:
                yield self.student_bias_offset(s)
        if self.abias_base is not None:
            for m in self.assessments:
                yield self.assessment_bias_offset(m)

    def lower_bounds(self) -> np.ndarray:
        lb = np.zeros(self.size)
        if self.sbias_base is not None:
            lb[self.sbias_base :] = -np.inf
        return lb


@dataclass
class FrozenModules:
    """Module parameters held fixed during a student-only refit."""

    gains: Optional[np.ndarray]
    prereqs: Optional[np.ndarray]
    reqs: np.ndarray
    abias: np.ndarray


class Problem:
    """Compiled objective for a set of histories under given hyperparameters.

    When `frozen` is provided, module parameters come from it and the
    parameter vector covers only student states and biases.
    """

    def __init__(
        self,
        histories: dict[str, list[Interaction]],
        hyper: Hyperparameters,
        lessons: Sequence[str],
        assessments: Sequence[str],
        frozen: Optional[FrozenModules] = None,
    ):
        self.hyper = hyper
        self.frozen = frozen
        self.index = ParameterIndex.build(
            histories, hyper, lessons, assessments, include_modules=frozen is None
        )
        idx = self.index

        asm_row, asm_item, asm_student, asm_result = [], [], [], []
        les_prev, les_lesson = [], []
        for s in idx.students:
            i = idx.student_pos[s]
            base = int(idx.state_start[i])
            timesteps = assign_timesteps(histories[s])
            for it, t in zip(histories[s], timesteps):
                if it.is_assessment:
                    row = base + (t if hyper.use_lessons else 0)
                    asm_row.append(row)
                    asm_item.append(idx.assessment_pos[it.module_id])
                    asm_student.append(i)
                    asm_result.append(float(it.result))
                elif hyper.use_lessons:
                    les_prev.append(base + t - 1)
                    les_lesson.append(idx.lesson_pos[it.module_id])

        self.asm_row = np.array(asm_row, dtype=int)
        self.asm_item = np.array(asm_item, dtype=int)
        self.asm_student = np.array(asm_student, dtype=int)
        self.asm_result = np.array(asm_result, dtype=float)
        self.les_prev = np.array(les_prev, dtype=int)
        self.les_lesson = np.array(les_lesson, dtype=int)
        # forward evaluation order of the transition chains, for initialization
        self._les_forward = np.argsort(self.les_prev, kind="mergesort")

    def random_init(self, rng: np.random.Generator) -> np.ndarray:
        """Random starting point with zero transition residuals.

        Free entities (initial states, gains, prereqs, requirements) draw
        i.i.d. uniform on [0, 1]; biases start at 0. Later states are
        forward-propagated through the expected learning updates, which
        keeps the transition terms off the optimizer's critical path at
        small sigma2 (i.i.d. state initialization collapses into the flat
        zero-gain basin there).
        """
        idx = self.index
        x0 = np.zeros(idx.size)
        x0[: idx.n_embedding] = rng.uniform(0.0, 1.0, size=idx.n_embedding)
        if not (idx.use_lessons and self.les_prev.size):
            return x0
        d = idx.d
        states = x0[: idx.n_state_rows * d].reshape(idx.n_state_rows, d)
        if self.frozen is not None:
            gains, prereqs = self.frozen.gains, self.frozen.prereqs
        else:
            gains = x0[idx.gains_base : idx.gains_base + len(idx.lessons) * d].reshape(-1, d)
            prereqs = (
                x0[idx.prereqs_base : idx.prereqs_base + len(idx.lessons) * d].reshape(-1, d)
                if idx.prereqs_base is not None
                else None
            )
        for i in self._les_forward:
            prev = self.les_prev[i]
            k = self.les_lesson[i]
            if prereqs is not None:
                q = prereqs[k]
                nq = max(float(np.linalg.norm(q)), EPS_NORM)
                gate = float(expit(float(states[prev] @ q) / nq - nq))
            else:
                gate = 1.0
            states[prev + 1] = states[prev] + gains[k] * gate
        return x0

    # -- views ---------------------------------------------------------------

    def _unpack_views(self, x: np.ndarray):
        idx = self.index
        d = idx.d
        states = x[: idx.n_state_rows * d].reshape(idx.n_state_rows, d)
        if self.frozen is not None:
            gains = self.frozen.gains
            prereqs = self.frozen.prereqs
            reqs = self.frozen.reqs
            abias = self.frozen.abias
        else:
            gains = (
                x[idx.gains_base : idx.gains_base + len(idx.lessons) * d].reshape(-1, d)
                if idx.gains_base is not None
                else None
            )
            prereqs = (
                x[idx.prereqs_base : idx.prereqs_base + len(idx.lessons) * d].reshape(-1, d)
                if idx.prereqs_base is not None
                else None
            )
            reqs = x[idx.reqs_base : idx.reqs_base + len(idx.assessments) * d].reshape(-1, d)
            abias = (
                x[idx.abias_base : idx.abias_base + len(idx.assessments)]
                if idx.abias_base is not None
                else np.zeros(len(idx.assessments))
            )
        sbias = (
            x[idx.sbias_base : idx.sbias_base + len(idx.students)]
            if idx.sbias_base is not None
            else np.zeros(len(idx.students))
        )
        return states, gains, prereqs, reqs, sbias, abias

    @staticmethod
    def _scatter_rows(grad_mat: np.ndarray, rows: np.ndarray, values: np.ndarray):
        # bincount per coordinate beats np.add.at for these sizes
        n = grad_mat.shape[0]
        for c in range(grad_mat.shape[1]):
            grad_mat[:, c] += np.bincount(rows, weights=values[:, c], minlength=n)

    def value_and_grad(self, x: np.ndarray) -> tuple[float, np.ndarray]:
        """Return (objective, gradient) of the to-be-maximized MAP objective."""
        idx = self.index
        d = idx.d
        hyper = self.hyper
        states, gains, prereqs, reqs, sbias, abias = self._unpack_views(x)
        grad = np.zeros_like(x)
        g_states = grad[: idx.n_state_rows * d].reshape(idx.n_state_rows, d)

        total = 0.0

        # assessment result terms
        if self.asm_row.size:
            req_norm_raw = np.linalg.norm(reqs, axis=1)
            req_norm = np.maximum(req_norm_raw, EPS_NORM)
            clipped_req = req_norm_raw < EPS_NORM

            s_rows = states[self.asm_row]
            a_rows = reqs[self.asm_item]
            na = req_norm[self.asm_item]
            proj = np.einsum("ij,ij->i", s_rows, a_rows) / na
            delta = proj - na + sbias[self.asm_student] + abias[self.asm_item]
            r = self.asm_result
            total += float(np.sum(-np.logaddexp(0.0, np.where(r > 0.5, -delta, delta))))

            c = r - expit(delta)
            self._scatter_rows(g_states, self.asm_row, c[:, None] * a_rows / na[:, None])

            if self.frozen is None:
                n_j = len(idx.assessments)
                sum_c = np.bincount(self.asm_item, weights=c, minlength=n_j)
                sum_cs = np.empty((n_j, d))
                for col in range(d):
                    sum_cs[:, col] = np.bincount(
                        self.asm_item, weights=c * s_rows[:, col], minlength=n_j
                    )
                g_reqs = grad[idx.reqs_base : idx.reqs_base + n_j * d].reshape(n_j, d)
                norm_j = req_norm
                # d/da of s.a/||a|| - ||a||, aggregated per assessment
                full = (
                    sum_cs / norm_j[:, None]
                    - (np.einsum("ij,ij->i", sum_cs, reqs) / norm_j**3)[:, None] * reqs
                    - sum_c[:, None] * reqs / norm_j[:, None]
                )
                if clipped_req.any():
                    full[clipped_req] = sum_cs[clipped_req] / EPS_NORM
                g_reqs += full
                if idx.abias_base is not None:
                    grad[idx.abias_base : idx.abias_base + n_j] += sum_c
            if idx.sbias_base is not None:
                grad[idx.sbias_base : idx.sbias_base + len(idx.students)] += np.bincount(
                    self.asm_student, weights=c, minlength=len(idx.students)
                )

        # lesson transition terms
        if self.les_prev.size:
            sigma2 = hyper.sigma2
            prev_rows = self.les_prev
            next_rows = prev_rows + 1
            s_prev = states[prev_rows]
            s_next = states[next_rows]
            l_rows = gains[self.les_lesson]

            if prereqs is not None:
                q_norm_raw = np.linalg.norm(prereqs, axis=1)
                q_norm = np.maximum(q_norm_raw, EPS_NORM)
                clipped_q = q_norm_raw < EPS_NORM
                q_rows = prereqs[self.les_lesson]
                nq = q_norm[self.les_lesson]
                gate = expit(np.einsum("ij,ij->i", s_prev, q_rows) / nq - nq)
            else:
                gate = np.ones(prev_rows.size)

            mean = s_prev + l_rows * gate[:, None]
            resid = s_next - mean
            total += float(
                -0.5 * prev_rows.size * d * math.log(2 * math.pi * sigma2)
                - np.sum(resid * resid) / (2 * sigma2)
            )

            e = resid / sigma2
            self._scatter_rows(g_states, next_rows, -e)
            el = np.einsum("ij,ij->i", e, l_rows)
            if prereqs is not None:
                gate_slope = gate * (1.0 - gate)
                d_prev = e + (el * gate_slope / nq)[:, None] * q_rows
            else:
                d_prev = e
            self._scatter_rows(g_states, prev_rows, d_prev)

            if self.frozen is None:
                n_k = len(idx.lessons)
                g_gains = grad[idx.gains_base : idx.gains_base + n_k * d].reshape(n_k, d)
                self._scatter_rows_by(g_gains, self.les_lesson, gate[:, None] * e)
                if prereqs is not None:
                    c2 = el * gate_slope
                    sum_c2 = np.bincount(self.les_lesson, weights=c2, minlength=n_k)
                    sum_c2s = np.empty((n_k, d))
                    for col in range(d):
                        sum_c2s[:, col] = np.bincount(
                            self.les_lesson, weights=c2 * s_prev[:, col], minlength=n_k
                        )
                    g_prereqs = grad[idx.prereqs_base : idx.prereqs_base + n_k * d].reshape(n_k, d)
                    full_q = (
                        sum_c2s / q_norm[:, None]
                        - (np.einsum("ij,ij->i", sum_c2s, prereqs) / q_norm**3)[:, None] * prereqs
                        - sum_c2[:, None] * prereqs / q_norm[:, None]
                    )
                    if clipped_q.any():
                        full_q[clipped_q] = sum_c2s[clipped_q] / EPS_NORM
                    g_prereqs += full_q

        # L2 penalty on embedding coordinates (never on biases)
        beta = hyper.beta
        if beta > 0 and idx.n_embedding:
            emb = x[: idx.n_embedding]
            total -= beta * float(emb @ emb)
            grad[: idx.n_embedding] -= 2.0 * beta * emb

        return total, grad

    # alias used where a distinct name reads better
    def _scatter_rows_by(self, grad_mat, rows, values):
        self._scatter_rows(grad_mat, rows, values)

    def neg_value_and_grad(self, x: np.ndarray) -> tuple[float, np.ndarray]:
        v, g = self.value_and_grad(x)
        return -v, -g


@dataclass
class Embedding:
    """A fitted model: all parameters plus convergence metadata."""

    students: dict[str, StudentParams]
    lessons: dict[str, LessonParams]
    assessments: dict[str, AssessmentParams]
    hyper: Hyperparameters
    objective: float
    restart_objectives: list[float] = field(default_factory=list)
    restart_iterations: list[int] = field(default_factory=list)
    restart_converged: list[bool] = field(default_factory=list)
    cold_start_assessments: int = 0

    @property
    def converged(self) -> bool:
        """True if the winning restart satisfied the relative-change rule."""
        if not self.restart_objectives:
            return True
        best = int(np.argmax(self.restart_objectives))
        return self.restart_converged[best]

    def state_of(self, student_id: str, t: int) -> np.ndarray:
        states = self.students[student_id].states
        if not self.hyper.use_lessons:
            return states[0]
        return states[min(t, states.shape[0] - 1)]

    def pass_probability(self, student_id: str, assessment_id: str, t: int = 0) -> float:
        """Predicted pass probability; unknown assessments fall back to the bias-only score."""
        student = self.students[student_id]
        if assessment_id not in self.assessments:
            # cold start: no requirement vector, score from the student bias alone
            return float(expit(student.bias))
        a = self.assessments[assessment_id]
        s = self.state_of(student_id, t)
        na = max(float(np.linalg.norm(a.requirements)), EPS_NORM)
        delta = float(s @ a.requirements) / na - na + student.bias + a.bias
        return float(expit(delta))


def _unpack_embedding(
    x: np.ndarray,
    problem: Problem,
    objective: float,
    restart_objectives: list[float],
    restart_iterations: list[int],
    restart_converged: list[bool],
) -> Embedding:
    idx = problem.index
    d = idx.d
    states, gains, prereqs, reqs, sbias, abias = problem._unpack_views(x)
    students = {}
    for s in idx.students:
        i = idx.student_pos[s]
        lo = int(idx.state_start[i])
        hi = lo + int(idx.state_rows[i])
        students[s] = StudentParams(states=states[lo:hi].copy(), bias=float(sbias[i]))
    lessons = {}
    if idx.use_lessons and gains is not None:
        for m in idx.lessons:
            k = idx.lesson_pos[m]
            lessons[m] = LessonParams(
                gains=gains[k].copy(),
                prereqs=prereqs[k].copy() if prereqs is not None else None,
            )
    assessments = {}
    for m in idx.assessments:
        j = idx.assessment_pos[m]
        assessments[m] = AssessmentParams(requirements=reqs[j].copy(), bias=float(abias[j]))
    return Embedding(
        students=students,
        lessons=lessons,
        assessments=assessments,
        hyper=problem.hyper,
        objective=objective,
        restart_objectives=restart_objectives,
        restart_iterations=restart_iterations,
        restart_converged=restart_converged,
    )


def pack_embedding(embedding: Embedding, problem: Problem) -> np.ndarray:
    """Inverse of unpacking: flatten an Embedding onto a Problem's layout."""
    idx = problem.index
    x = np.zeros(idx.size)
    d = idx.d
    states = x[: idx.n_state_rows * d].reshape(idx.n_state_rows, d)
    for s in idx.students:
        i = idx.student_pos[s]
        lo = int(idx.state_start[i])
        hi = lo + int(idx.state_rows[i])
        states[lo:hi] = embedding.students[s].states
        if idx.sbias_base is not None:
            x[idx.sbias_base + i] = embedding.students[s].bias
    if idx.gains_base is not None:
        for m in idx.lessons:
            k = idx.lesson_pos[m]
            x[idx.gains_base + k * d : idx.gains_base + (k + 1) * d] = embedding.lessons[m].gains
            if idx.prereqs_base is not None:
                x[idx.prereqs_base + k * d : idx.prereqs_base + (k + 1) * d] = embedding.lessons[
                    m
                ].prereqs
    if idx.reqs_base is not None:
        for m in idx.assessments:
            j = idx.assessment_pos[m]
            x[idx.reqs_base + j * d : idx.reqs_base + (j + 1) * d] = embedding.assessments[
                m
            ].requirements
            if idx.abias_base is not None:
                x[idx.abias_base + j] = embedding.assessments[m].bias
    return x


def objective_and_gradient(
    x: np.ndarray, dataset: Dataset, hyper: Hyperparameters
) -> tuple[float, np.ndarray]:
    """The maximized MAP objective and its exact gradient at x."""
    problem = Problem(dataset.histories, hyper, dataset.lesson_ids, dataset.assessment_ids)
    if x.shape != (problem.index.size,):
        raise ValueError(f"parameter vector has size {x.size}, layout expects {problem.index.size}")
    return problem.value_and_grad(np.asarray(x, dtype=float))


def make_problem(dataset: Dataset, hyper: Hyperparameters) -> Problem:
    return Problem(dataset.histories, hyper, dataset.lesson_ids, dataset.assessment_ids)


def _restart_seeds(seed: int, n: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def fit(dataset: Dataset, hyper: Hyperparameters) -> Embedding:
    """MAP-fit the embedding, keeping the best of `hyper.restarts` random restarts."""
    if dataset.n_students == 0:
        raise ValueError("cannot fit an empty dataset")
    problem = make_problem(dataset, hyper)
    lb = problem.index.lower_bounds()

    best_x, best_obj = None, -np.inf
    objectives: list[float] = []
    iterations: list[int] = []
    converged: list[bool] = []
    diagnostics: list[dict] = []
    for rng in _restart_seeds(hyper.seed, hyper.restarts):
        x0 = problem.random_init(rng)
        res = minimize_bounded(
            problem.neg_value_and_grad,
            x0,
            lower_bounds=lb,
            tol=hyper.tol,
            max_iter=hyper.max_iter,
            memory=hyper.memory,
        )
        obj = -res.fun
        objectives.append(obj)
        iterations.append(res.n_iterations)
        converged.append(res.converged)
        diagnostics.append(
            {"objective": obj, "iterations": res.n_iterations, "converged": res.converged, "message": res.message}
        )
        if np.isfinite(obj) and obj > best_obj:
            best_obj, best_x = obj, res.x

    if best_x is None:
        raise FitError("all restarts failed to produce a finite objective", diagnostics)
    if not converged[int(np.argmax(objectives))]:
        log.warning("fit: best restart stopped before meeting the relative-change tolerance")
    return _unpack_embedding(best_x, problem, best_obj, objectives, iterations, converged)


@dataclass
class RefitResult:
    students: dict[str, StudentParams]
    objective: float
    dropped_interactions: int
    converged: bool


def refit_students(
    embedding: Embedding,
    histories: dict[str, list[Interaction]],
    seed: int = 0,
    restarts: int = 1,
    drop_unknown: bool = True,
) -> RefitResult:
    """Re-estimate trajectories and biases for new histories with modules frozen.

    Module parameters come from `embedding` and are not touched. Interactions
    referencing modules the embedding does not know are dropped (counted) when
    `drop_unknown`, otherwise raise KeyError.
    """
    hyper = embedding.hyper
    lesson_ids = sorted(embedding.lessons)
    assessment_ids = sorted(embedding.assessments)

    dropped = 0
    cleaned: dict[str, list[Interaction]] = {}
    for s, h in histories.items():
        kept = []
        for it in h:
            if it.is_lesson:
                if not hyper.use_lessons:
                    kept.append(it)  # no objective terms under a static-state model
                elif it.module_id in embedding.lessons:
                    kept.append(it)
                else:
                    dropped += 1
            elif it.module_id in embedding.assessments:
                kept.append(it)
            else:
                dropped += 1
        cleaned[s] = kept
    if dropped and not drop_unknown:
        raise KeyError(f"{dropped} interactions reference modules unknown to the embedding")

    d = hyper.d
    frozen = FrozenModules(
        gains=np.array([embedding.lessons[m].gains for m in lesson_ids]).reshape(len(lesson_ids), d)
        if hyper.use_lessons
        else None,
        prereqs=np.array([embedding.lessons[m].prereqs for m in lesson_ids]).reshape(
            len(lesson_ids), d
        )
        if hyper.use_prereqs
        else None,
        reqs=np.array([embedding.assessments[m].requirements for m in assessment_ids]).reshape(
            len(assessment_ids), d
        ),
        abias=np.array([embedding.assessments[m].bias for m in assessment_ids]),
    )
    problem = Problem(cleaned, hyper, lesson_ids, assessment_ids, frozen=frozen)
    lb = problem.index.lower_bounds()

    best_x, best_obj, best_converged = None, -np.inf, False
    for rng in _restart_seeds(seed, restarts):
        x0 = problem.random_init(rng)
        res = minimize_bounded(
            problem.neg_value_and_grad,
            x0,
            lower_bounds=lb,
            tol=hyper.tol,
            max_iter=hyper.max_iter,
            memory=hyper.memory,
        )
        if np.isfinite(res.fun) and -res.fun > best_obj:
            best_obj, best_x, best_converged = -res.fun, res.x, res.converged
    if best_x is None:
        raise FitError("student refit failed on all restarts", [])

    idx = problem.index
    states, _, _, _, sbias, _ = problem._unpack_views(best_x)
    out = {}
    for s in idx.students:
        i = idx.student_pos[s]
        lo = int(idx.state_start[i])
        hi = lo + int(idx.state_rows[i])
        out[s] = StudentParams(states=states[lo:hi].copy(), bias=float(sbias[i]))
    return RefitResult(
        students=out, objective=best_obj, dropped_interactions=dropped, converged=best_converged
    )
