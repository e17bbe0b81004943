"""Candidate-set enumeration, late-fusion scoring and Pareto selection.

A candidate is a sorted tuple of ``(modality_index, model_index)`` cells of
the application matrix. Scores are maximized: ``eval`` is majority-vote
accuracy and ``div`` maps the mean pairwise correlation of member
correctness vectors onto [0, 1] as ``(1 - rho_bar) / 2``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .unimodal import PredictionMatrix

Cell = tuple[int, int]
Candidate = tuple[Cell, ...]


class SelectionError(ValueError):
    pass


@dataclass(frozen=True)
class ApplicationMatrix:
    modalities: tuple[str, ...]
    models: tuple[str, ...]
    cells: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        object.__setattr__(self, "modalities", tuple(self.modalities))
        object.__setattr__(self, "models", tuple(self.models))
        cells = tuple(tuple(int(v) for v in row) for row in self.cells)
        object.__setattr__(self, "cells", cells)
        if len(cells) != len(self.modalities) or any(len(r) != len(self.models) for r in cells):
            raise SelectionError("cells must be an m x n matrix")
        if any(v not in (0, 1) for r in cells for v in r):
            raise SelectionError("cells must be binary")
        if self.s < 1:
            raise SelectionError("application matrix has no active cell")

    @classmethod
    def full(cls, modalities: Sequence[str], models: Sequence[str]) -> "ApplicationMatrix":
        return cls(tuple(modalities), tuple(models), tuple((1,) * len(models) for _ in modalities))

    @property
    def s(self) -> int:
        return sum(map(sum, self.cells))

    def active(self) -> list[Cell]:
        return [(i, j) for i, row in enumerate(self.cells) for j, v in enumerate(row) if v]

    def name(self, cell: Cell) -> tuple[str, str]:
        return self.modalities[cell[0]], self.models[cell[1]]

    def to_dict(self) -> dict:
        return {"modalities": list(self.modalities), "models": list(self.models),
                "cells": [list(r) for r in self.cells]}


def enumerate_candidates(theta: ApplicationMatrix, max_size: int | None = None) -> list[Candidate]:
    """All subsets of active cells with ``2 <= size <= min(s, max_size)``.

    Ordered by size, then lexicographically.
    """
    cells = theta.active()
    if len(cells) < 2:
        raise SelectionError(f"need at least 2 active models, have {len(cells)}")
    top = len(cells) if max_size is None else min(len(cells), max_size)
    return [c for h in range(2, top + 1) for c in itertools.combinations(cells, h)]


# ---------------------------------------------------------------- voting


def vote(crisp: np.ndarray, soft: np.ndarray | None = None, n_classes: int | None = None) -> np.ndarray:
    """Vectorized majority vote over members.

    ``crisp`` is (members, N) class indices, ``soft`` optionally (members, N, c).
    Ties between modes go to the largest summed soft score, then the lowest class.
    """
    crisp = np.asarray(crisp, dtype=int)
    if crisp.ndim == 1:
        crisp = crisp[:, None]
    c = n_classes or (soft.shape[-1] if soft is not None else int(crisp.max()) + 1)
    counts = np.zeros((crisp.shape[1], c), dtype=int)
    for row in crisp:
        counts[np.arange(crisp.shape[1]), row] += 1
    tied = counts == counts.max(axis=1, keepdims=True)
    if soft is None:
        return np.argmax(tied, axis=1)
    # sort along members before summing so the total does not depend on member order
    sums = np.sort(np.asarray(soft, dtype=float), axis=0).sum(axis=0)
    return np.argmax(np.where(tied, sums, -np.inf), axis=1)


def majority_vote(crisp_labels: Sequence[int], soft_scores: Sequence[Sequence[float]] | None = None) -> int:
    """Mode of the members' labels with the soft-score tie-break."""
    crisp = np.asarray(crisp_labels, dtype=int)[:, None]
    if soft_scores is None:
        return int(vote(crisp)[0])
    soft = np.asarray(soft_scores, dtype=float)[:, None, :]
    return int(vote(crisp, soft)[0])


def _members(candidate: Candidate, predictions: Mapping[Cell, PredictionMatrix]) -> list[PredictionMatrix]:
    pms = []
    for cell in candidate:
        if cell not in predictions:
            raise SelectionError(f"no prediction matrix for member {cell}")
        pms.append(predictions[cell])
    ref = pms[0].instance_ids
    for pm in pms[1:]:
        if pm.instance_ids != ref:
            raise SelectionError(f"instance ids of {pm.key} are not aligned with {pms[0].key}")
    return pms


def eval_accuracy(candidate: Candidate, predictions: Mapping[Cell, PredictionMatrix], labels) -> float:
    pms = _members(candidate, predictions)
    labels = np.asarray(labels, dtype=int)
    if len(labels) != len(pms[0].instance_ids):
        raise SelectionError("labels are not aligned with the predictions")
    pred = vote(np.stack([p.crisp_labels for p in pms]), np.stack([p.scores for p in pms]))
    return float(np.mean(pred == labels))


def _contingency(u: np.ndarray, v: np.ndarray) -> tuple[int, int, int, int]:
    n11 = int(np.sum(u & v))
    n00 = int(np.sum(~u & ~v))
    n10 = int(np.sum(u & ~v))
    n01 = int(np.sum(~u & v))
    return n11, n00, n10, n01


def pairwise_rho(u, v) -> float:
    """Correlation between two correctness vectors (1 = correct).

    With a zero denominator, identical vectors give 1 and anything else 0.
    """
    u = np.asarray(u).astype(bool)
    v = np.asarray(v).astype(bool)
    if u.shape != v.shape or u.ndim != 1 or u.size == 0:
        raise SelectionError("correctness vectors must be 1-D, nonempty and of equal length")
    n11, n00, n10, n01 = _contingency(u, v)
    den = (n11 + n10) * (n01 + n00) * (n11 + n01) * (n10 + n00)
    if den == 0:
        return 1.0 if np.array_equal(u, v) else 0.0
    return (n11 * n00 - n01 * n10) / math.sqrt(den)


def _mean_rho(rhos: Sequence[float]) -> float:
    return math.fsum(rhos) / len(rhos)


def diversity(candidate: Candidate, predictions: Mapping[Cell, PredictionMatrix], labels) -> float:
    if len(candidate) < 2:
        raise SelectionError("diversity needs at least two members")
    pms = _members(candidate, predictions)
    labels = np.asarray(labels, dtype=int)
    correct = [p.crisp_labels == labels for p in pms]
    rhos = [pairwise_rho(a, b) for a, b in itertools.combinations(correct, 2)]
    return (1.0 - _mean_rho(rhos)) / 2.0


@dataclass
class ScoredCandidate:
    candidate: Candidate
    eval_score: float
    div_score: float
    per_fold_eval: list[float] = field(default_factory=list)
    per_fold_div: list[float] = field(default_factory=list)

    @property
    def objective(self) -> float:
        return distance_to_ideal(self.eval_score, self.div_score)

    @property
    def point(self) -> tuple[float, float]:
        return self.eval_score, self.div_score


def distance_to_ideal(eval_score: float, div_score: float) -> float:
    return (eval_score - 1.0) ** 2 + (div_score - 1.0) ** 2


class _FoldCache:
    """Per-fold correctness vectors and pairwise rho, computed once per cell pair."""

    def __init__(self, predictions: Mapping[Cell, PredictionMatrix], labels):
        self.predictions = predictions
        self.labels = np.asarray(labels, dtype=int)
        self._rho: dict[tuple[Cell, Cell], float] = {}

    def correct(self, cell: Cell) -> np.ndarray:
        return self.predictions[cell].crisp_labels == self.labels

    def rho(self, a: Cell, b: Cell) -> float:
        key = (a, b) if a <= b else (b, a)
        if key not in self._rho:
            self._rho[key] = pairwise_rho(self.correct(key[0]), self.correct(key[1]))
        return self._rho[key]

    def div(self, candidate: Candidate) -> float:
        _members(candidate, self.predictions)
        return (1.0 - _mean_rho([self.rho(a, b) for a, b in itertools.combinations(candidate, 2)])) / 2.0


def score_candidates(candidates: Sequence[Candidate],
                     per_fold_predictions: Mapping[str, Mapping[Cell, PredictionMatrix]],
                     labels: Mapping[str, Sequence[int]]) -> list[ScoredCandidate]:
    """Score every candidate per fold and average over folds, keeping input order."""
    if not per_fold_predictions:
        raise SelectionError("no folds to score")
    folds = sorted(per_fold_predictions)
    caches = {}
    for f in folds:
        if f not in labels:
            raise SelectionError(f"no labels for fold {f!r}")
        caches[f] = _FoldCache(per_fold_predictions[f], labels[f])
    out = []
    for cand in candidates:
        for f in folds:
            missing = [c for c in cand if c not in per_fold_predictions[f]]
            if missing:
                raise SelectionError(f"fold {f!r} has no predictions for members {missing}")
        evals = [eval_accuracy(cand, per_fold_predictions[f], labels[f]) for f in folds]
        divs = [caches[f].div(cand) for f in folds]
        out.append(ScoredCandidate(tuple(cand), math.fsum(evals) / len(evals),
                                   math.fsum(divs) / len(divs), evals, divs))
    return out


def dominates(a: tuple[float, float], b: tuple[float, float]) -> bool:
    return a[0] >= b[0] and a[1] >= b[1] and (a[0] > b[0] or a[1] > b[1])


def pareto_front(points: Sequence[ScoredCandidate]) -> list[ScoredCandidate]:
    """Non-dominated points under maximization of (eval, div); duplicates are kept.

    Sweep in O(n log n): walk eval levels from high to low and keep the points
    of each level that reach the level's best div, provided no higher level
    already reached that div. Output keeps the input order.
    """
    if not points:
        raise SelectionError("pareto_front of an empty set")
    order = sorted(range(len(points)), key=lambda i: -points[i].eval_score)
    keep = set()
    best_higher = -math.inf
    for _, grp in itertools.groupby(order, key=lambda i: points[i].eval_score):
        grp = list(grp)
        top = max(points[i].div_score for i in grp)
        if top > best_higher:
            keep.update(i for i in grp if points[i].div_score == top)
        best_higher = max(best_higher, top)
    return [p for i, p in enumerate(points) if i in keep]


def select_gamma_star(front: Sequence[ScoredCandidate]) -> ScoredCandidate:
    """Front point closest to the ideal (1, 1); ties go to fewer members, then lexicographic order."""
    if not front:
        raise SelectionError("cannot select from an empty front")
    return min(front, key=lambda p: (p.objective, len(p.candidate), p.candidate))


@dataclass
class SelectionResult:
    theta: ApplicationMatrix
    scored: list[ScoredCandidate]
    front: list[ScoredCandidate]
    best: ScoredCandidate

    def member_names(self) -> list[tuple[str, str]]:
        return [self.theta.name(c) for c in self.best.candidate]

    def to_dict(self) -> dict:
        def enc(p: ScoredCandidate) -> dict:
            return {"members": [list(self.theta.name(c)) for c in p.candidate],
                    "eval": p.eval_score, "div": p.div_score, "objective": p.objective,
                    "per_fold_eval": p.per_fold_eval, "per_fold_div": p.per_fold_div}
        return {"theta": self.theta.to_dict(), "n_candidates": len(self.scored),
                "front": [enc(p) for p in self.front], "gamma_star": enc(self.best)}

    def to_rows(self) -> list[list]:
        front = {id(p) for p in self.front}
        rows = [["members", "size", "eval", "div", "objective", "on_front", "gamma_star",
                 "per_fold_eval", "per_fold_div"]]
        for p in self.scored:
            rows.append([";".join(f"{m}/{a}" for m, a in (self.theta.name(c) for c in p.candidate)),
                         len(p.candidate), repr(p.eval_score), repr(p.div_score), repr(p.objective),
                         int(id(p) in front), int(p is self.best),
                         " ".join(map(repr, p.per_fold_eval)), " ".join(map(repr, p.per_fold_div))])
        return rows


def optimize(theta: ApplicationMatrix,
             per_fold_predictions: Mapping[str, Mapping[Cell, PredictionMatrix]],
             labels: Mapping[str, Sequence[int]], max_size: int | None = None) -> SelectionResult:
    """Enumerate, score, take the front and pick Gamma* in one call."""
    scored = score_candidates(enumerate_candidates(theta, max_size), per_fold_predictions, labels)
    front = pareto_front(scored)
    return SelectionResult(theta, scored, front, select_gamma_star(front))
