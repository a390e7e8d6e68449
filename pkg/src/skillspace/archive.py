"""Self-describing model archives.

A fitted model is stored as a single uncompressed .npz file. The first
entry, ``header``, is a JSON document with the format version, the model
kind, and the ordered list of array fields; the remaining entries follow
that order. Saving is byte-deterministic for identical inputs, which the
reproducibility contract relies on.

Embedding field order: header, hyper, student_ids, lesson_ids,
assessment_ids, state_counts, states, student_biases, lesson_gains,
lesson_prereqs, assessment_reqs, assessment_biases, objective,
restart_objectives, restart_iterations, restart_converged.

IRT field order: header, kind, regularization, student_ids, item_ids,
abilities, difficulties, discriminabilities, factors, offsets, objective.
"""

from __future__ import annotations

import dataclasses
import io
import json
from typing import Union

import numpy as np

from .estimation import Embedding
from .model import AssessmentParams, Hyperparameters, LessonParams, StudentParams

FORMAT_VERSION = 1


def _header(model_kind: str, fields: list[str]) -> np.ndarray:
    doc = {"format_version": FORMAT_VERSION, "model_kind": model_kind, "fields": fields}
    return np.array(json.dumps(doc, sort_keys=True))


def save_embedding(embedding: Embedding, path: str) -> None:
    students = sorted(embedding.students)
    lessons = sorted(embedding.lessons)
    assessments = sorted(embedding.assessments)
    d = embedding.hyper.d

    state_counts = np.array([embedding.students[s].states.shape[0] for s in students], dtype=np.int64)
    states = (
        np.concatenate([embedding.students[s].states for s in students])
        if students
        else np.zeros((0, d))
    )
    arrays = {
        "hyper": np.array(json.dumps(dataclasses.asdict(embedding.hyper), sort_keys=True)),
        "student_ids": np.array(students, dtype=str),
        "lesson_ids": np.array(lessons, dtype=str),
        "assessment_ids": np.array(assessments, dtype=str),
        "state_counts": state_counts,
        "states": states,
        "student_biases": np.array([embedding.students[s].bias for s in students]),
        "lesson_gains": np.array([embedding.lessons[m].gains for m in lessons]).reshape(len(lessons), d),
        "lesson_prereqs": (
            np.array([embedding.lessons[m].prereqs for m in lessons]).reshape(len(lessons), d)
            if embedding.hyper.use_prereqs
            else np.zeros((0, d))
        ),
        "assessment_reqs": np.array(
            [embedding.assessments[m].requirements for m in assessments]
        ).reshape(len(assessments), d),
        "assessment_biases": np.array([embedding.assessments[m].bias for m in assessments]),
        "objective": np.array(embedding.objective),
        "restart_objectives": np.array(embedding.restart_objectives),
        "restart_iterations": np.array(embedding.restart_iterations, dtype=np.int64),
        "restart_converged": np.array(embedding.restart_converged, dtype=bool),
    }
    with open(path, "wb") as fh:
        np.savez(fh, header=_header("embedding", list(arrays)), **arrays)


def load_embedding(path: str) -> Embedding:
    with np.load(path, allow_pickle=False) as data:
        header = json.loads(str(data["header"]))
        if header.get("model_kind") != "embedding":
            raise ValueError(f"archive holds a {header.get('model_kind')!r} model, not an embedding")
        if header.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported archive format version {header.get('format_version')!r}")
        hyper = Hyperparameters(**json.loads(str(data["hyper"])))
        students = [str(s) for s in data["student_ids"]]
        lessons = [str(m) for m in data["lesson_ids"]]
        assessments = [str(m) for m in data["assessment_ids"]]
        counts = data["state_counts"]
        states = data["states"]
        sbias = data["student_biases"]
        gains = data["lesson_gains"]
        prereqs = data["lesson_prereqs"]
        reqs = data["assessment_reqs"]
        abias = data["assessment_biases"]

        student_params = {}
        row = 0
        for i, s in enumerate(students):
            n = int(counts[i])
            student_params[s] = StudentParams(states=states[row : row + n].copy(), bias=float(sbias[i]))
            row += n
        lesson_params = {
            m: LessonParams(
                gains=gains[k].copy(),
                prereqs=prereqs[k].copy() if hyper.use_prereqs else None,
            )
            for k, m in enumerate(lessons)
        }
        assessment_params = {
            m: AssessmentParams(requirements=reqs[j].copy(), bias=float(abias[j]))
            for j, m in enumerate(assessments)
        }
        return Embedding(
            students=student_params,
            lessons=lesson_params,
            assessments=assessment_params,
            hyper=hyper,
            objective=float(data["objective"]),
            restart_objectives=[float(v) for v in data["restart_objectives"]],
            restart_iterations=[int(v) for v in data["restart_iterations"]],
            restart_converged=[bool(v) for v in data["restart_converged"]],
        )


def save_irt(params, path: str) -> None:
    """Store IRT baseline parameters in the shared container with a model-kind tag."""
    arrays = {
        "kind": np.array(params.kind),
        "regularization": np.array(params.regularization),
        "student_ids": np.array(params.student_ids, dtype=str),
        "item_ids": np.array(params.item_ids, dtype=str),
        "abilities": np.asarray(params.abilities),
        "difficulties": np.asarray(params.difficulties),
        "discriminabilities": np.asarray(params.discriminabilities),
        "factors": np.asarray(params.factors),
        "offsets": np.asarray(params.offsets),
        "objective": np.array(params.objective),
    }
    with open(path, "wb") as fh:
        np.savez(fh, header=_header(f"irt-{params.kind}", list(arrays)), **arrays)


def load_irt(path: str):
    from .irt import IrtParams

    with np.load(path, allow_pickle=False) as data:
        header = json.loads(str(data["header"]))
        kind = header.get("model_kind", "")
        if not kind.startswith("irt-"):
            raise ValueError(f"archive holds a {kind!r} model, not an IRT baseline")
        return IrtParams(
            kind=str(data["kind"]),
            student_ids=[str(s) for s in data["student_ids"]],
            item_ids=[str(m) for m in data["item_ids"]],
            abilities=data["abilities"].copy(),
            difficulties=data["difficulties"].copy(),
            discriminabilities=data["discriminabilities"].copy(),
            factors=data["factors"].copy(),
            offsets=data["offsets"].copy(),
            regularization=float(data["regularization"]),
            objective=float(data["objective"]),
        )


def load_model(path: str) -> Union[Embedding, "IrtParams"]:
    """Load either container, dispatching on the header's model kind."""
    with np.load(path, allow_pickle=False) as data:
        header = json.loads(str(data["header"]))
    kind = header.get("model_kind", "")
    if kind == "embedding":
        return load_embedding(path)
    if kind.startswith("irt-"):
        return load_irt(path)
    raise ValueError(f"unknown model kind {kind!r} in archive")
