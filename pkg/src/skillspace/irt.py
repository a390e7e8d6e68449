"""IRT benchmark models: 1PL (Rasch), 2PL, and two-dimensional MIRT.

All three are MAP-fit on assessment interactions only, maximizing the
Bernoulli log-likelihood minus a single shared L2 weight on every
parameter, with the same relative-change convergence rule as the
embedding. Parameters are unbounded. Unseen students or items at
prediction time fall back to prior-mean (zero) parameters.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.special import expit

from .optimize import minimize_bounded

log = logging.getLogger(__name__)

MIRT_DIM = 2

AssessmentRecord = tuple[str, str, int]  # (student_id, item_id, result)


@dataclass
class IrtParams:
    """Fitted parameters for one of the three baseline kinds."""

    kind: str  # "1pl" | "2pl" | "mirt"
    student_ids: list[str]
    item_ids: list[str]
    abilities: np.ndarray  # (S,) for 1pl/2pl; unused for mirt
    difficulties: np.ndarray  # (J,) for 1pl/2pl; unused for mirt
    discriminabilities: np.ndarray  # (J,) for 2pl; unused otherwise
    factors: np.ndarray  # (S + J, MIRT_DIM) for mirt: students then items
    offsets: np.ndarray  # (J,) for mirt
    regularization: float = 0.0
    objective: float = 0.0
    _student_pos: dict = field(default_factory=dict, repr=False)
    _item_pos: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.kind not in ("1pl", "2pl", "mirt"):
            raise ValueError(f"unknown IRT kind {self.kind!r}")
        self._student_pos = {s: i for i, s in enumerate(self.student_ids)}
        self._item_pos = {m: j for j, m in enumerate(self.item_ids)}

    # -- parameter lookups with cold-start fallbacks --------------------------

    def theta(self, student_id: str) -> float:
        i = self._student_pos.get(student_id)
        return 0.0 if i is None else float(self.abilities[i])

    def beta(self, item_id: str) -> float:
        j = self._item_pos.get(item_id)
        return 0.0 if j is None else float(self.difficulties[j])

    def alpha(self, item_id: str) -> float:
        j = self._item_pos.get(item_id)
        return 0.0 if j is None else float(self.discriminabilities[j])

    def student_factor(self, student_id: str) -> np.ndarray:
        i = self._student_pos.get(student_id)
        return np.zeros(MIRT_DIM) if i is None else self.factors[i]

    def item_factor(self, item_id: str) -> np.ndarray:
        j = self._item_pos.get(item_id)
        return np.zeros(MIRT_DIM) if j is None else self.factors[len(self.student_ids) + j]

    def mu(self, item_id: str) -> float:
        j = self._item_pos.get(item_id)
        return 0.0 if j is None else float(self.offsets[j])

    def predict(self, student_id: str, item_id: str) -> float:
        if self.kind == "1pl":
            return predict_1pl(self, student_id, item_id)
        if self.kind == "2pl":
            return predict_2pl(self, student_id, item_id)
        return predict_mirt(self, student_id, item_id)


def predict_1pl(params: IrtParams, student_id: str, item_id: str) -> float:
    """Rasch pass probability logistic(theta - beta)."""
    return float(expit(params.theta(student_id) - params.beta(item_id)))


def predict_2pl(params: IrtParams, student_id: str, item_id: str) -> float:
    """Pass probability logistic(alpha * (theta - beta))."""
    return float(expit(params.alpha(item_id) * (params.theta(student_id) - params.beta(item_id))))


def predict_mirt(params: IrtParams, student_id: str, item_id: str) -> float:
    """Pass probability logistic(u . v + mu)."""
    u = params.student_factor(student_id)
    v = params.item_factor(item_id)
    return float(expit(u @ v + params.mu(item_id)))


def _index_records(
    records: Sequence[AssessmentRecord],
) -> tuple[list[str], list[str], np.ndarray, np.ndarray, np.ndarray]:
    students = sorted({r[0] for r in records})
    items = sorted({r[1] for r in records})
    spos = {s: i for i, s in enumerate(students)}
    jpos = {m: j for j, m in enumerate(items)}
    si = np.array([spos[r[0]] for r in records], dtype=int)
    ij = np.array([jpos[r[1]] for r in records], dtype=int)
    y = np.array([float(r[2]) for r in records])
    return students, items, si, ij, y


def _bernoulli_ll(z: np.ndarray, y: np.ndarray) -> float:
    return float(np.sum(-np.logaddexp(0.0, np.where(y > 0.5, -z, z))))


def fit_irt(
    kind: str,
    records: Sequence[AssessmentRecord],
    regularization: float = 1e-2,
    seed: int = 0,
    restarts: int = 1,
    tol: float = 1e-3,
    max_iter: int = 1000,
) -> IrtParams:
    """MAP-fit a baseline on (student, item, result) records."""
    if kind not in ("1pl", "2pl", "mirt"):
        raise ValueError(f"unknown IRT kind {kind!r}")
    if not records:
        raise ValueError("cannot fit IRT on an empty record set")
    students, items, si, ij, y = _index_records(records)
    S, J = len(students), len(items)
    reg = float(regularization)

    if kind == "1pl":
        size = S + J
    elif kind == "2pl":
        size = S + 2 * J
    else:
        size = (S + J) * MIRT_DIM + J

    def value_and_grad(x):
        g = np.zeros_like(x)
        if kind in ("1pl", "2pl"):
            theta = x[:S]
            beta = x[S : S + J]
            if kind == "2pl":
                alpha = x[S + J :]
                diff = theta[si] - beta[ij]
                z = alpha[ij] * diff
            else:
                z = theta[si] - beta[ij]
            ll = _bernoulli_ll(z, y)
            c = y - expit(z)
            if kind == "2pl":
                ca = c * alpha[ij]
                g[:S] += np.bincount(si, weights=ca, minlength=S)
                g[S : S + J] -= np.bincount(ij, weights=ca, minlength=J)
                g[S + J :] += np.bincount(ij, weights=c * diff, minlength=J)
            else:
                g[:S] += np.bincount(si, weights=c, minlength=S)
                g[S : S + J] -= np.bincount(ij, weights=c, minlength=J)
        else:
            u = x[: S * MIRT_DIM].reshape(S, MIRT_DIM)
            v = x[S * MIRT_DIM : (S + J) * MIRT_DIM].reshape(J, MIRT_DIM)
            mu = x[(S + J) * MIRT_DIM :]
            z = np.einsum("ij,ij->i", u[si], v[ij]) + mu[ij]
            ll = _bernoulli_ll(z, y)
            c = y - expit(z)
            gu = g[: S * MIRT_DIM].reshape(S, MIRT_DIM)
            gv = g[S * MIRT_DIM : (S + J) * MIRT_DIM].reshape(J, MIRT_DIM)
            for col in range(MIRT_DIM):
                gu[:, col] += np.bincount(si, weights=c * v[ij, col], minlength=S)
                gv[:, col] += np.bincount(ij, weights=c * u[si, col], minlength=J)
            g[(S + J) * MIRT_DIM :] += np.bincount(ij, weights=c, minlength=J)
        ll -= reg * float(x @ x)
        g -= 2.0 * reg * x
        return -ll, -g

    best_x, best_obj = None, -np.inf
    for seq in np.random.SeedSequence(seed).spawn(restarts):
        rng = np.random.default_rng(seq)
        x0 = rng.normal(0.0, 0.5, size=size)
        if kind == "2pl":
            x0[S + J :] = 1.0 + rng.normal(0.0, 0.1, size=J)  # discriminability near 1
        res = minimize_bounded(value_and_grad, x0, tol=tol, max_iter=max_iter)
        if np.isfinite(res.fun) and -res.fun > best_obj:
            best_obj, best_x = -res.fun, res.x

    if best_x is None:
        raise RuntimeError("IRT fit failed on all restarts")

    x = best_x
    zero_s = np.zeros(S)
    zero_j = np.zeros(J)
    if kind == "1pl":
        return IrtParams(
            kind, students, items, x[:S], x[S:], zero_j.copy(), np.zeros((S + J, MIRT_DIM)), zero_j.copy(),
            regularization=reg, objective=best_obj,
        )
    if kind == "2pl":
        return IrtParams(
            kind, students, items, x[:S], x[S : S + J], x[S + J :], np.zeros((S + J, MIRT_DIM)),
            zero_j.copy(), regularization=reg, objective=best_obj,
        )
    factors = x[: (S + J) * MIRT_DIM].reshape(S + J, MIRT_DIM)
    return IrtParams(
        kind, students, items, zero_s.copy(), zero_j.copy(), zero_j.copy(), factors,
        x[(S + J) * MIRT_DIM :], regularization=reg, objective=best_obj,
    )


def refit_irt_students(
    params: IrtParams,
    records: Sequence[AssessmentRecord],
    seed: int = 0,
    tol: float = 1e-3,
    max_iter: int = 1000,
) -> IrtParams:
    """Re-estimate ability parameters on new records with item parameters frozen.

    Mirrors the embedding's validation-time student refit: only the listed
    students' abilities (or factors) move; records for items the model has
    never seen are dropped.
    """
    kept = [r for r in records if r[1] in params._item_pos]
    students = sorted({r[0] for r in records})
    spos = {s: i for i, s in enumerate(students)}
    reg = params.regularization
    S = len(students)

    if not students:
        return params

    if kept:
        si = np.array([spos[r[0]] for r in kept], dtype=int)
        jv = np.array([params._item_pos[r[1]] for r in kept], dtype=int)
        y = np.array([float(r[2]) for r in kept])

    if params.kind in ("1pl", "2pl"):
        beta = params.difficulties
        alpha = params.discriminabilities

        def value_and_grad(x):
            g = np.zeros_like(x)
            ll = 0.0
            if kept:
                if params.kind == "2pl":
                    z = alpha[jv] * (x[si] - beta[jv])
                    mult = alpha[jv]
                else:
                    z = x[si] - beta[jv]
                    mult = 1.0
                ll = _bernoulli_ll(z, y)
                g += np.bincount(si, weights=(y - expit(z)) * mult, minlength=S)
            ll -= reg * float(x @ x)
            g -= 2.0 * reg * x
            return -ll, -g

        res = minimize_bounded(value_and_grad, np.zeros(S), tol=tol, max_iter=max_iter)
        merged = dict(zip(params.student_ids, (float(a) for a in params.abilities)))
        merged.update({s: float(res.x[spos[s]]) for s in students})
        out_students = sorted(merged)
        final = np.array([merged[s] for s in out_students])
        return IrtParams(
            params.kind, out_students, params.item_ids, final, params.difficulties.copy(),
            params.discriminabilities.copy(), params.factors.copy(), params.offsets.copy(),
            regularization=reg, objective=float(-res.fun),
        )

    # mirt: optimize student factors with item factors and offsets frozen
    v = params.factors[len(params.student_ids) :]
    mu = params.offsets

    def value_and_grad(x):
        u = x.reshape(S, MIRT_DIM)
        g = np.zeros_like(u)
        ll = 0.0
        if kept:
            z = np.einsum("ij,ij->i", u[si], v[jv]) + mu[jv]
            ll = _bernoulli_ll(z, y)
            c = y - expit(z)
            for col in range(MIRT_DIM):
                g[:, col] += np.bincount(si, weights=c * v[jv, col], minlength=S)
        ll -= reg * float(x @ x)
        g = g.ravel() - 2.0 * reg * x
        return -ll, -g

    res = minimize_bounded(value_and_grad, np.zeros(S * MIRT_DIM), tol=tol, max_iter=max_iter)
    u_new = res.x.reshape(S, MIRT_DIM)
    merged_u = {s: params.factors[i] for i, s in enumerate(params.student_ids)}
    merged_u.update({s: u_new[spos[s]] for s in students})
    out_students = sorted(merged_u)
    factors = np.concatenate([np.array([merged_u[s] for s in out_students]), v])
    return IrtParams(
        params.kind, out_students, params.item_ids, np.zeros(len(out_students)),
        params.difficulties.copy(), params.discriminabilities.copy(), factors, params.offsets.copy(),
        regularization=reg, objective=float(-res.fun),
    )


def assessment_records(histories: dict, restrict_students: Optional[Iterable[str]] = None) -> list[AssessmentRecord]:
    """Flatten (student, item, result) records out of interaction histories."""
    keep = None if restrict_students is None else set(restrict_students)
    out = []
    for s in sorted(histories):
        if keep is not None and s not in keep:
            continue
        for it in histories[s]:
            if it.is_assessment:
                out.append((s, it.module_id, int(it.result)))
    return out
