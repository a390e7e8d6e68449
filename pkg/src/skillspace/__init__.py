"""Latent skill-space embedding of students, lessons, and assessments.

Fits joint trajectories/gain/requirement vectors from access traces,
benchmarks against IRT models, evaluates predictions offline, and
discriminates lesson sequences via bubble mining with propensity matching.
"""

from .model import (
    EPS_NORM,
    AssessmentParams,
    DegenerateModuleError,
    Hyperparameters,
    LessonParams,
    StudentParams,
    assessment_loglik,
    delta_assessment,
    lesson_transition_loglik,
    lesson_update_mean,
    pass_probability,
    prereq_gate,
)
from .traces import (
    ASSESSMENT,
    LESSON,
    Dataset,
    FilterConfig,
    Interaction,
    TraceFormatError,
    filter_dataset,
    parse_traces,
    split_students,
    truncate_for_validation,
    write_traces,
)
from .estimation import (
    Embedding,
    FitError,
    ParameterIndex,
    fit,
    make_problem,
    objective_and_gradient,
    refit_students,
)

__version__ = "0.1.0"

__all__ = [
    "EPS_NORM",
    "ASSESSMENT",
    "LESSON",
    "AssessmentParams",
    "Dataset",
    "DegenerateModuleError",
    "Embedding",
    "FilterConfig",
    "FitError",
    "Hyperparameters",
    "Interaction",
    "LessonParams",
    "ParameterIndex",
    "StudentParams",
    "TraceFormatError",
    "assessment_loglik",
    "delta_assessment",
    "filter_dataset",
    "fit",
    "lesson_transition_loglik",
    "lesson_update_mean",
    "make_problem",
    "objective_and_gradient",
    "parse_traces",
    "pass_probability",
    "prereq_gate",
    "refit_students",
    "split_students",
    "truncate_for_validation",
    "write_traces",
    "__version__",
]
