"""Counterfactual objectives, scenario-constrained proximity, and ranking.

All four objectives are minimized: validity (distance of the prediction to
the target speed), proximity (L1 feature distance in natural units),
sparsity (number of changed genes), and plausibility (mean distance to the
k nearest observed feature rows). Scenario constraints reshape proximity by
multiplying penalized gene contributions by a weight, either always
(weighting constraints) or only when the change runs against a required
direction (directional constraints).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError

SPARSITY_TOLERANCE = 1e-9
DEFAULT_K_NEAREST = 3
DEFAULT_WEIGHTS = (1.0, 0.2, 0.2, 0.6)


@dataclass(frozen=True)
class GeneLayout:
    """Gene index -> (segment id, feature name), plus tied-equality groups."""

    entries: tuple[tuple[str, str], ...]
    tied_groups: tuple[tuple[int, ...], ...] = ()

    def __post_init__(self):
        size = len(self.entries)
        seen: set[int] = set()
        for group in self.tied_groups:
            if len(group) < 2:
                raise ConfigError("tied groups need at least two genes")
            for idx in group:
                if not 0 <= idx < size:
                    raise ConfigError(f"tied gene index {idx} out of range")
                if idx in seen:
                    raise ConfigError(f"gene {idx} appears in more than one tied group")
                seen.add(idx)

    def __len__(self) -> int:
        return len(self.entries)


@dataclass(frozen=True)
class EditableVector:
    """A full assignment of the mutable features across editable segments."""

    values: np.ndarray
    layout: GeneLayout

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.shape != (len(self.layout),):
            raise ValueError(f"expected {len(self.layout)} genes, got shape {values.shape}")
        for group in self.layout.tied_groups:
            if not np.all(values[list(group)] == values[group[0]]):
                raise ValueError(f"tied genes {group} hold unequal values")
        object.__setattr__(self, "values", values)


def _check_layouts(a: EditableVector, b: EditableVector) -> None:
    if a.layout is not b.layout and a.layout != b.layout:
        raise ValueError("editable vectors have different layouts")


@dataclass(frozen=True)
class ObjectiveVector:
    validity: float
    proximity: float
    sparsity: int
    plausibility: float

    def __post_init__(self):
        for name in ("validity", "proximity", "sparsity", "plausibility"):
            if getattr(self, name) < 0:
                raise ValueError(f"objective {name} must be non-negative")

    def as_tuple(self) -> tuple[float, float, int, float]:
        return (self.validity, self.proximity, self.sparsity, self.plausibility)


@dataclass(frozen=True)
class EvaluationWeights:
    validity: float = DEFAULT_WEIGHTS[0]
    proximity: float = DEFAULT_WEIGHTS[1]
    sparsity: float = DEFAULT_WEIGHTS[2]
    plausibility: float = DEFAULT_WEIGHTS[3]

    def __post_init__(self):
        values = self.as_tuple()
        if any(v < 0 for v in values):
            raise ValueError("weights must be non-negative")
        if not any(v > 0 for v in values):
            raise ValueError("at least one weight must be positive")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.validity, self.proximity, self.sparsity, self.plausibility)


@dataclass(frozen=True)
class ScenarioConstraint:
    """Soft penalty on gene changes; `direction` is None for weighting kind."""

    kind: str
    genes: tuple[int, ...]
    penalty: float = 100.0
    direction: str | None = None

    def __post_init__(self):
        if self.kind not in ("directional", "weighting"):
            raise ConfigError(f"unknown constraint kind {self.kind!r}")
        if self.kind == "directional" and self.direction not in ("increase", "decrease"):
            raise ConfigError("directional constraints need direction 'increase' or 'decrease'")
        if self.kind == "weighting" and self.direction is not None:
            raise ConfigError("weighting constraints take no direction")
        if self.penalty <= 1:
            raise ConfigError("constraint penalty must exceed 1")
        if not self.genes:
            raise ConfigError("constraint gene set is empty")


def validate_constraints(constraints: Sequence[ScenarioConstraint], gene_count: int) -> None:
    directions: dict[int, str] = {}
    for constraint in constraints:
        for gene in constraint.genes:
            if not 0 <= gene < gene_count:
                raise ConfigError(f"constraint references gene {gene}, but only {gene_count} exist")
            if constraint.kind == "directional":
                prior = directions.get(gene)
                if prior is not None and prior != constraint.direction:
                    raise ConfigError(f"conflicting directional constraints on gene {gene}")
                directions[gene] = constraint.direction  # type: ignore[assignment]


@dataclass(frozen=True)
class ObservedFeatureSet:
    """Reference rows for plausibility; one row per corpus segment."""

    rows: np.ndarray
    k: int = DEFAULT_K_NEAREST

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=float)
        if rows.ndim != 2:
            raise ValueError("observed rows must be a 2-D matrix")
        if self.k <= 0:
            raise ConfigError("k must be positive")
        if rows.shape[0] < self.k:
            raise ConfigError(f"need at least k={self.k} observed rows, got {rows.shape[0]}")
        object.__setattr__(self, "rows", rows)


def o1_validity(predicted_mean: float, target: float) -> float:
    if not (np.isfinite(predicted_mean) and np.isfinite(target)):
        raise ValueError("validity inputs must be finite")
    return abs(predicted_mean - target)


def o2_proximity(x: EditableVector, x_prime: EditableVector) -> float:
    _check_layouts(x, x_prime)
    return float(np.abs(x.values - x_prime.values).sum())


def o3_sparsity(x: EditableVector, x_prime: EditableVector) -> int:
    _check_layouts(x, x_prime)
    return int((np.abs(x.values - x_prime.values) > SPARSITY_TOLERANCE).sum())


def o4_plausibility(values: np.ndarray, observed: ObservedFeatureSet) -> float:
    """Mean Euclidean distance to the k nearest observed rows (stable ties)."""
    values = np.asarray(values, dtype=float)
    if values.shape != (observed.rows.shape[1],):
        raise ValueError(
            f"vector has dimension {values.shape}, observed rows have {observed.rows.shape[1]}"
        )
    distances = np.linalg.norm(observed.rows - values, axis=1)
    nearest = np.argsort(distances, kind="stable")[: observed.k]
    return float(distances[nearest].mean())


def o2_scenario(
    x: EditableVector,
    x_prime: EditableVector,
    constraints: Sequence[ScenarioConstraint],
) -> float:
    """Proximity with penalized contributions for constrained genes.

    A weighting constraint multiplies every change of its genes by the
    penalty; a directional constraint only fires when the change moves
    against the required direction. Overlapping constraints apply the
    largest firing penalty.
    """
    _check_layouts(x, x_prime)
    validate_constraints(constraints, len(x.layout))
    delta = x_prime.values - x.values
    factors = np.ones_like(delta)
    for constraint in constraints:
        genes = np.array(constraint.genes, dtype=int)
        if constraint.kind == "weighting":
            fired = np.ones(len(genes), dtype=bool)
        elif constraint.direction == "increase":
            fired = delta[genes] < 0
        else:
            fired = delta[genes] > 0
        hit = genes[fired]
        factors[hit] = np.maximum(factors[hit], constraint.penalty)
    return float((factors * np.abs(delta)).sum())


def evaluation_score(
    candidate: ObjectiveVector,
    population_max: ObjectiveVector,
    weights: EvaluationWeights,
) -> float:
    """Weighted sum of max-normalized objectives; zero maxes contribute 0."""
    total = 0.0
    for value, peak, weight in zip(candidate.as_tuple(), population_max.as_tuple(), weights.as_tuple()):
        if peak > 0:
            total += weight * (value / peak)
    return total


def population_max(objectives: Sequence[ObjectiveVector]) -> ObjectiveVector:
    if not objectives:
        raise ValueError("cannot take the max of an empty candidate set")
    stacked = np.array([o.as_tuple() for o in objectives])
    peak = stacked.max(axis=0)
    return ObjectiveVector(float(peak[0]), float(peak[1]), int(peak[2]), float(peak[3]))


@dataclass(frozen=True)
class RankedCandidate:
    index: int  # position in the input candidate list
    score: float
    objectives: ObjectiveVector


def score_candidates(
    objectives: Sequence[ObjectiveVector],
    weights: EvaluationWeights,
) -> list[float]:
    peak = population_max(objectives)
    return [evaluation_score(o, peak, weights) for o in objectives]


def rank_candidates(
    objectives: Sequence[ObjectiveVector],
    weights: EvaluationWeights,
) -> list[RankedCandidate]:
    """Ascending by score; ties broken by raw objectives, then input order."""
    if not objectives:
        raise ValueError("cannot rank an empty candidate set")
    scores = score_candidates(objectives, weights)
    order = sorted(
        range(len(objectives)),
        key=lambda i: (scores[i], *objectives[i].as_tuple(), i),
    )
    return [RankedCandidate(i, scores[i], objectives[i]) for i in order]


def argmin_set(objectives: Sequence[ObjectiveVector], weights: EvaluationWeights) -> set[int]:
    scores = score_candidates(objectives, weights)
    best = min(scores)
    return {i for i, s in enumerate(scores) if s == best}
