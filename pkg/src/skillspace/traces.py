"""Access-trace ingestion: parsing, filtering, timesteps, and splits.

Trace files are UTF-8 CSV with header ``student_id,module_id,kind,order_key,result``
where kind is ``lesson`` or ``assessment``, order_key is an integer giving the
per-student ordering, and result is ``1``/``0`` for assessments and empty for
lessons.

Filtering applies first-attempt deduplication for assessments, then drops
students with too few lesson interactions and modules touched by too few
distinct students, iterating to a fixed point. Timesteps count completed
lessons: a student's n-th lesson carries t = n, and an assessment carries the
number of lessons completed strictly before it.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from typing import IO, Iterable, Iterator, Optional, Sequence, Union

import numpy as np

log = logging.getLogger(__name__)

LESSON = "lesson"
ASSESSMENT = "assessment"

TRACE_HEADER = ["student_id", "module_id", "kind", "order_key", "result"]


class TraceFormatError(ValueError):
    """Trace stream header does not match the documented format."""


@dataclass(frozen=True)
class Interaction:
    """One timestamped student-module event."""

    student_id: str
    module_id: str
    kind: str
    order_key: int
    result: Optional[int] = None

    def __post_init__(self):
        if self.kind not in (LESSON, ASSESSMENT):
            raise ValueError(f"kind must be '{LESSON}' or '{ASSESSMENT}', got {self.kind!r}")
        if (self.result is not None) != (self.kind == ASSESSMENT):
            raise ValueError("result must be present iff kind is assessment")
        if self.result is not None and self.result not in (0, 1):
            raise ValueError(f"result must be 0 or 1, got {self.result!r}")

    @property
    def is_lesson(self) -> bool:
        return self.kind == LESSON

    @property
    def is_assessment(self) -> bool:
        return self.kind == ASSESSMENT


@dataclass(frozen=True)
class MalformedRow:
    line_number: int
    reason: str
    raw: str


def parse_traces(source: Union[str, IO[str]]) -> tuple[list[Interaction], list[MalformedRow]]:
    """Parse a trace stream into interactions plus an error report of rejected rows.

    `source` is a path or an open text stream. Rows are returned in file order;
    malformed rows are collected, not raised.
    """
    if isinstance(source, str):
        with open(source, "r", encoding="utf-8", newline="") as fh:
            return parse_traces(fh)
    reader = csv.reader(source)
    try:
        header = next(reader)
    except StopIteration:
        raise TraceFormatError("empty stream: missing header")
    if [h.strip() for h in header] != TRACE_HEADER:
        raise TraceFormatError(f"header mismatch: expected {TRACE_HEADER}, got {header}")

    interactions: list[Interaction] = []
    errors: list[MalformedRow] = []
    for line_number, row in enumerate(reader, start=2):
        raw = ",".join(row)
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != 5:
            errors.append(MalformedRow(line_number, f"expected 5 fields, got {len(row)}", raw))
            continue
        student_id, module_id, kind, order_key, result = (c.strip() for c in row)
        if not student_id or not module_id:
            errors.append(MalformedRow(line_number, "empty student_id or module_id", raw))
            continue
        try:
            order = int(order_key)
        except ValueError:
            errors.append(MalformedRow(line_number, f"order_key not an integer: {order_key!r}", raw))
            continue
        if kind == LESSON:
            if result:
                errors.append(MalformedRow(line_number, "lesson row carries a result", raw))
                continue
            parsed_result = None
        elif kind == ASSESSMENT:
            if result not in ("0", "1"):
                errors.append(MalformedRow(line_number, f"assessment result must be 0 or 1, got {result!r}", raw))
                continue
            parsed_result = int(result)
        else:
            errors.append(MalformedRow(line_number, f"unknown kind {kind!r}", raw))
            continue
        interactions.append(Interaction(student_id, module_id, kind, order, parsed_result))
    return interactions, errors


def write_traces(interactions: Iterable[Interaction], target: Union[str, IO[str]]) -> None:
    """Write interactions in the documented CSV trace format."""
    if isinstance(target, str):
        with open(target, "w", encoding="utf-8", newline="") as fh:
            write_traces(interactions, fh)
        return
    writer = csv.writer(target, lineterminator="\n")
    writer.writerow(TRACE_HEADER)
    for it in interactions:
        writer.writerow(
            [it.student_id, it.module_id, it.kind, it.order_key, "" if it.result is None else it.result]
        )


@dataclass(frozen=True)
class FilterConfig:
    """Thresholds for dataset filtering; `none()` disables everything."""

    dedup_assessments: bool = True
    min_student_lessons: int = 5
    min_module_students: int = 5

    @staticmethod
    def none() -> "FilterConfig":
        return FilterConfig(dedup_assessments=False, min_student_lessons=0, min_module_students=0)


def _sort_history(events: list[tuple[int, Interaction]]) -> list[Interaction]:
    # stable sort by order_key keeps file order among ties
    return [it for _, it in sorted(events, key=lambda pair: pair[1].order_key)]


def _dedup_first_attempt(history: list[Interaction]) -> list[Interaction]:
    seen: set[str] = set()
    out = []
    for it in history:
        if it.is_assessment:
            if it.module_id in seen:
                continue
            seen.add(it.module_id)
        out.append(it)
    return out


@dataclass
class Dataset:
    """Filtered, timestep-assigned per-student interaction histories.

    `histories` maps student id to the ordered interaction list; `timesteps`
    holds the parallel timestep assignment. Instances are treated as
    immutable after construction.
    """

    histories: dict[str, list[Interaction]]
    timesteps: dict[str, list[int]] = field(default_factory=dict)
    lesson_ids: list[str] = field(default_factory=list)
    assessment_ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.timesteps:
            self.timesteps = {s: assign_timesteps(h) for s, h in self.histories.items()}
        if not self.lesson_ids or not self.assessment_ids:
            lessons, assessments = set(), set()
            for history in self.histories.values():
                for it in history:
                    (lessons if it.is_lesson else assessments).add(it.module_id)
            self.lesson_ids = sorted(lessons)
            self.assessment_ids = sorted(assessments)

    @property
    def student_ids(self) -> list[str]:
        return sorted(self.histories)

    @property
    def n_students(self) -> int:
        return len(self.histories)

    @property
    def n_interactions(self) -> int:
        return sum(len(h) for h in self.histories.values())

    def interactions(self) -> Iterator[tuple[str, Interaction, int]]:
        """Yield (student_id, interaction, timestep) over all histories, students sorted."""
        for student in self.student_ids:
            for it, t in zip(self.histories[student], self.timesteps[student]):
                yield student, it, t

    def assessment_interactions(self) -> Iterator[tuple[str, Interaction, int]]:
        for student, it, t in self.interactions():
            if it.is_assessment:
                yield student, it, t

    def n_lessons_of(self, student: str) -> int:
        return sum(1 for it in self.histories[student] if it.is_lesson)

    def subset(self, students: Iterable[str]) -> "Dataset":
        """Dataset restricted to the given students; module registries are recomputed."""
        keep = set(students)
        return Dataset(histories={s: list(h) for s, h in self.histories.items() if s in keep})

    def flat_interactions(self) -> list[Interaction]:
        out = []
        for student in self.student_ids:
            out.extend(self.histories[student])
        return out


def assign_timesteps(history: Sequence[Interaction]) -> list[int]:
    """Lesson n carries t = n; an assessment carries the count of lessons strictly before it."""
    ts = []
    lessons_done = 0
    for it in history:
        if it.is_lesson:
            lessons_done += 1
            ts.append(lessons_done)
        else:
            ts.append(lessons_done)
    return ts


def filter_dataset(
    interactions: Iterable[Interaction],
    config: FilterConfig = FilterConfig(),
) -> Dataset:
    """Build a Dataset: dedup first attempts, then iterate both thresholds to a fixed point.

    Students are thresholded first, then modules, repeating until stable
    (removing a student can push a module below threshold and vice versa).
    An everything-filtered outcome is a warning, not an error.
    """
    by_student: dict[str, list[tuple[int, Interaction]]] = {}
    for idx, it in enumerate(interactions):
        by_student.setdefault(it.student_id, []).append((idx, it))

    histories = {s: _sort_history(evts) for s, evts in by_student.items()}
    if config.dedup_assessments:
        histories = {s: _dedup_first_attempt(h) for s, h in histories.items()}

    while True:
        changed = False
        # students below the lesson-interaction threshold
        drop_students = [
            s
            for s, h in histories.items()
            if sum(1 for it in h if it.is_lesson) < config.min_student_lessons
        ]
        if drop_students:
            changed = True
            for s in drop_students:
                del histories[s]
        # modules touched by too few distinct students
        module_students: dict[str, set[str]] = {}
        for s, h in histories.items():
            for it in h:
                module_students.setdefault(it.module_id, set()).add(s)
        drop_modules = {
            m for m, studs in module_students.items() if len(studs) < config.min_module_students
        }
        if drop_modules:
            changed = True
            histories = {
                s: [it for it in h if it.module_id not in drop_modules] for s, h in histories.items()
            }
        if not changed:
            break

    histories = {s: h for s, h in histories.items() if h}
    if not histories:
        log.warning("filter_dataset: every interaction was filtered out")
    return Dataset(histories=histories)


def dataset_from_traces(path: str, config: FilterConfig = FilterConfig()) -> tuple[Dataset, list[MalformedRow]]:
    interactions, errors = parse_traces(path)
    if errors:
        log.warning("parse_traces: rejected %d malformed rows", len(errors))
    return filter_dataset(interactions, config), errors


@dataclass
class TruncationResult:
    """Per-student training prefixes and the held-out assessment interactions."""

    training_histories: dict[str, list[Interaction]]
    held_out: dict[str, list[Interaction]]
    skipped_students: list[str]


def truncate_for_validation(
    dataset: Dataset,
    mode: str = "last-assessment",
    seed: int = 0,
    students: Optional[Iterable[str]] = None,
) -> TruncationResult:
    """Split each student's history into a training prefix and held-out assessments.

    mode 'last-assessment' truncates just before the student's final assessment
    interaction; mode 'random' truncates before a uniformly chosen one. The
    held-out set is the contiguous run of assessment interactions starting at
    the truncation point; everything strictly before is the training prefix.
    Students with no assessment interaction are skipped with a warning.
    """
    if mode not in ("last-assessment", "random"):
        raise ValueError(f"unknown truncation mode {mode!r}")
    rng = np.random.default_rng(seed)
    chosen = dataset.student_ids if students is None else sorted(students)

    training: dict[str, list[Interaction]] = {}
    held_out: dict[str, list[Interaction]] = {}
    skipped: list[str] = []
    for student in chosen:
        history = dataset.histories[student]
        assessment_positions = [i for i, it in enumerate(history) if it.is_assessment]
        if not assessment_positions:
            skipped.append(student)
            continue
        if mode == "last-assessment":
            cut = assessment_positions[-1]
        else:
            cut = int(rng.choice(assessment_positions))
        run_end = cut
        while run_end < len(history) and history[run_end].is_assessment:
            run_end += 1
        training[student] = history[:cut]
        held_out[student] = history[cut:run_end]
    if skipped:
        log.warning("truncate_for_validation: %d students had no assessments and were skipped", len(skipped))
    return TruncationResult(training_histories=training, held_out=held_out, skipped_students=skipped)


def split_students(dataset: Dataset, fractions: Sequence[float], seed: int = 0) -> list[list[str]]:
    """Deterministic disjoint partition of student ids by the given fractions.

    Sizes follow largest-remainder rounding so e.g. (0.8, 0.2) on 10 students
    gives exactly 8 and 2.
    """
    fractions = [float(f) for f in fractions]
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {fractions}")
    students = dataset.student_ids
    rng = np.random.default_rng(seed)
    order = [students[i] for i in rng.permutation(len(students))]

    n = len(students)
    quotas = [f * n for f in fractions]
    sizes = [int(q) for q in quotas]
    remainders = sorted(range(len(fractions)), key=lambda i: quotas[i] - sizes[i], reverse=True)
    for i in remainders[: n - sum(sizes)]:
        sizes[i] += 1

    parts: list[list[str]] = []
    start = 0
    for size in sizes:
        parts.append(sorted(order[start : start + size]))
        start += size
    return parts


def fold_assignments(dataset: Dataset, folds: int, seed: int = 0) -> list[list[str]]:
    """Partition students into k near-equal folds, deterministic given seed."""
    if folds < 2:
        raise ValueError("folds must be >= 2")
    return split_students(dataset, [1.0 / folds] * folds, seed=seed)
