"""Elitist multi-objective evolutionary search for counterfactuals.

The engine is a standard NSGA-II loop: fast non-dominated sorting, crowding
distance, binary tournament selection, uniform crossover, and Gaussian
mutation constrained to feasible ranges with integer rounding and tied-gene
broadcasting. Objective evaluation is pluggable and batch-oriented, so the
counterfactual evaluator can push whole populations through the forecaster
at once; randomness is consumed only in the sequential phase.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, SearchCancelled
from .graph import LIMIT_COL, POI_COL, FeatureWindow
from .model import TgcnModel, forward_batch
from .objectives import (
    EditableVector,
    GeneLayout,
    ObservedFeatureSet,
    ScenarioConstraint,
    validate_constraints,
)

STATIC_FEATURE_ORDER = ("poi_count", "lane_count", "speed_limit")


@dataclass(frozen=True)
class GeneSpace:
    """Search-space description for one editable vector layout."""

    layout: GeneLayout
    lower: np.ndarray
    upper: np.ndarray
    mutation_std: np.ndarray
    integral: np.ndarray
    mutable: np.ndarray

    def __post_init__(self):
        size = len(self.layout)
        for name in ("lower", "upper", "mutation_std", "integral", "mutable"):
            arr = np.asarray(getattr(self, name))
            if arr.shape != (size,):
                raise ConfigError(f"{name} must have one entry per gene ({size})")
            object.__setattr__(self, name, arr)
        if (self.lower > self.upper).any():
            raise ConfigError("feasible ranges must satisfy lower <= upper")
        if (self.mutation_std[self.mutable] <= 0).any():
            raise ConfigError("mutation_std must be positive for mutable genes")

    def representatives(self) -> np.ndarray:
        """One index per independent decision variable (tied groups collapse)."""
        rep = np.arange(len(self.layout))
        for group in self.layout.tied_groups:
            rep[list(group)] = group[0]
        return np.unique(rep)

    def broadcast_tied(self, genes: np.ndarray) -> np.ndarray:
        for group in self.layout.tied_groups:
            genes[..., list(group)] = genes[..., [group[0]]]
        return genes

    def clamp(self, genes: np.ndarray) -> np.ndarray:
        genes = np.clip(genes, self.lower, self.upper)
        genes[..., self.integral] = np.rint(genes[..., self.integral])
        genes = self.broadcast_tied(genes)
        return genes + 0.0  # canonicalize -0.0

    def is_feasible(self, genes: np.ndarray) -> bool:
        if (genes < self.lower).any() or (genes > self.upper).any():
            return False
        if not np.array_equal(genes[..., self.integral], np.rint(genes[..., self.integral])):
            return False
        for group in self.layout.tied_groups:
            column = genes[..., list(group)]
            if not np.all(column == column[..., [0]]):
                return False
        return True


@dataclass(frozen=True)
class SearchConfig:
    space: GeneSpace
    population_size: int = 64
    generations: int = 100
    mutation_prob: float = 0.3
    crossover_prob: float = 0.7
    seed: int = 0
    target_node: str | None = None
    target_window: tuple[int, int] = (0, 12)
    target_speed: float = 0.0

    def __post_init__(self):
        if self.population_size <= 0 or self.population_size % 2:
            raise ConfigError("population_size must be a positive even integer")
        if self.generations <= 0:
            raise ConfigError("generations must be positive")
        if not 0 <= self.mutation_prob <= 1 or not 0 <= self.crossover_prob <= 1:
            raise ConfigError("probabilities must lie in [0, 1]")


@dataclass
class Candidate:
    genes: np.ndarray
    objectives: tuple[float, ...]
    rank: int = 0
    crowding: float = float("inf")


@dataclass
class ParetoSet:
    candidates: list[Candidate]

    def __len__(self) -> int:
        return len(self.candidates)

    def genes_matrix(self) -> np.ndarray:
        return np.stack([c.genes for c in self.candidates])

    def objectives_matrix(self) -> np.ndarray:
        return np.array([c.objectives for c in self.candidates])


def dominates(a: Sequence[float], b: Sequence[float]) -> bool:
    """True iff a is no worse everywhere and strictly better somewhere."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError("objective vectors must have the same arity")
    return bool((a <= b).all() and (a < b).any())


def _domination_matrix(objectives: np.ndarray) -> np.ndarray:
    left = objectives[:, None, :]
    right = objectives[None, :, :]
    return (left <= right).all(axis=2) & (left < right).any(axis=2)


def fast_non_dominated_sort(objectives: np.ndarray) -> list[np.ndarray]:
    """Deb's front peeling; returns index arrays, front 0 first."""
    objectives = np.asarray(objectives, dtype=float)
    n = objectives.shape[0]
    dom = _domination_matrix(objectives)
    dominator_count = dom.sum(axis=0)
    fronts = []
    assigned = np.zeros(n, dtype=bool)
    current = np.flatnonzero(dominator_count == 0)
    while current.size:
        fronts.append(current)
        assigned[current] = True
        dominator_count = dominator_count - dom[current].sum(axis=0)
        current = np.flatnonzero((dominator_count == 0) & ~assigned)
    return fronts


def crowding_distance(objectives: np.ndarray) -> np.ndarray:
    """Per-candidate density estimate within one front; boundaries get inf."""
    objectives = np.asarray(objectives, dtype=float)
    n, m = objectives.shape
    if n <= 2:
        return np.full(n, np.inf)
    distance = np.zeros(n)
    for j in range(m):
        order = np.argsort(objectives[:, j], kind="stable")
        spread = objectives[order[-1], j] - objectives[order[0], j]
        distance[order[0]] = np.inf
        distance[order[-1]] = np.inf
        if spread == 0:
            continue
        gaps = (objectives[order[2:], j] - objectives[order[:-2], j]) / spread
        interior = order[1:-1]
        finite = np.isfinite(distance[interior])
        distance[interior[finite]] += gaps[finite]
    return distance


def gaussian_mutate(genes: np.ndarray, space: GeneSpace, mutation_prob: float, rng: np.random.Generator) -> np.ndarray:
    """Perturb each mutable decision variable with probability mutation_prob.

    Tied groups are mutated once through their representative and broadcast;
    results are clamped to the feasible box and integer genes re-rounded.
    The random stream is consumed identically regardless of which coins land,
    so call sequences stay reproducible.
    """
    reps = space.representatives()
    coins = rng.random(reps.size) < mutation_prob
    noise = rng.normal(0.0, 1.0, size=reps.size) * space.mutation_std[reps]
    out = np.array(genes, dtype=float)
    apply = coins & space.mutable[reps]
    out[reps[apply]] += noise[apply]
    return space.clamp(out)


def uniform_crossover(
    parent_a: np.ndarray,
    parent_b: np.ndarray,
    space: GeneSpace,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Swap each decision variable with probability 1/2 (tied groups atomically)."""
    reps = space.representatives()
    swap_reps = reps[rng.random(reps.size) < 0.5]
    swap = np.zeros(len(space.layout), dtype=bool)
    swap[swap_reps] = True
    for group in space.layout.tied_groups:
        swap[list(group)] = swap[group[0]]
    child_a = np.where(swap, parent_b, parent_a)
    child_b = np.where(swap, parent_a, parent_b)
    return child_a + 0.0, child_b + 0.0


class _Memo:
    """Cache of objective vectors keyed by exact gene bytes."""

    def __init__(self, evaluate_batch: Callable[[np.ndarray], np.ndarray]):
        self._evaluate = evaluate_batch
        self._cache: dict[bytes, np.ndarray] = {}

    def __call__(self, genes: np.ndarray) -> np.ndarray:
        keys = [np.ascontiguousarray(row).tobytes() for row in genes]
        missing = [i for i, key in enumerate(keys) if key not in self._cache]
        if missing:
            fresh = np.asarray(self._evaluate(genes[missing]), dtype=float)
            if fresh.shape[0] != len(missing):
                raise ValueError("evaluator returned wrong number of rows")
            for row, i in enumerate(missing):
                self._cache[keys[i]] = fresh[row]
        return np.stack([self._cache[key] for key in keys])


def _tournament(rng: np.random.Generator, ranks: np.ndarray, crowding: np.ndarray) -> int:
    a, b = rng.integers(0, ranks.size, size=2)
    key_a = (ranks[a], -crowding[a])
    key_b = (ranks[b], -crowding[b])
    return int(a if key_a <= key_b else b)


def _rank_population(objectives: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    fronts = fast_non_dominated_sort(objectives)
    ranks = np.zeros(objectives.shape[0], dtype=int)
    crowding = np.zeros(objectives.shape[0])
    for level, front in enumerate(fronts):
        ranks[front] = level
        crowding[front] = crowding_distance(objectives[front])
    return ranks, crowding


def _environmental_selection(genes: np.ndarray, objectives: np.ndarray, size: int) -> np.ndarray:
    """Indices of the elitist next generation (fronts in order, crowding splits)."""
    chosen: list[int] = []
    for front in fast_non_dominated_sort(objectives):
        if len(chosen) + front.size <= size:
            chosen.extend(front.tolist())
        else:
            crowd = crowding_distance(objectives[front])
            order = np.argsort(-crowd, kind="stable")
            chosen.extend(front[order[: size - len(chosen)]].tolist())
            break
    return np.array(chosen, dtype=int)


@dataclass
class GenerationRecord:
    generation: int
    genes: np.ndarray
    objectives: np.ndarray


@dataclass
class EvolveResult:
    pareto: ParetoSet
    history: list[GenerationRecord]


def extract_pareto(genes: np.ndarray, objectives: np.ndarray) -> ParetoSet:
    """Rank-0 front, deduplicated by exact gene-vector equality."""
    front = fast_non_dominated_sort(objectives)[0]
    crowd = crowding_distance(objectives[front])
    seen: set[bytes] = set()
    candidates = []
    for position, index in enumerate(front):
        key = np.ascontiguousarray(genes[index] + 0.0).tobytes()
        if key in seen:
            continue
        seen.add(key)
        candidates.append(Candidate(
            genes[index].copy(), tuple(objectives[index]), rank=0, crowding=float(crowd[position]),
        ))
    return ParetoSet(candidates)


def nsga2(
    evaluate_batch: Callable[[np.ndarray], np.ndarray],
    initial: np.ndarray,
    config: SearchConfig,
    on_generation: Callable[[int], None] | None = None,
    should_stop: Callable[[], bool] | None = None,
) -> EvolveResult:
    """Run the generation loop from an initial feasible population."""
    if np.asarray(initial).shape[0] != config.population_size:
        raise ConfigError("initial population size mismatch")
    rng = np.random.default_rng(config.seed)
    return _nsga2_with_rng(evaluate_batch, initial, config, rng, on_generation, should_stop)


def initial_population(original: np.ndarray, config: SearchConfig, rng: np.random.Generator) -> np.ndarray:
    """The original vector plus mutants of it (three mutation rounds each)."""
    rows = [np.array(original, dtype=float)]
    for _ in range(config.population_size - 1):
        genes = np.array(original, dtype=float)
        for _ in range(3):
            genes = gaussian_mutate(genes, config.space, config.mutation_prob, rng)
        rows.append(genes)
    return np.stack(rows)


# ---------------------------------------------------------------------------
# Counterfactual objective evaluation against the forecaster.
# ---------------------------------------------------------------------------

def make_layout(
    segment_ids: Sequence[str],
    tied_features: Sequence[str] = ("speed_limit",),
) -> GeneLayout:
    """Genes ordered (poi, lanes, limit) per segment.

    Features named in tied_features share one decision variable across all
    segments (the classic case: one speed limit for the whole road).
    """
    entries = []
    for seg in segment_ids:
        for feature in STATIC_FEATURE_ORDER:
            entries.append((seg, feature))
    tied = []
    if len(segment_ids) > 1:
        for feature in tied_features:
            if feature not in STATIC_FEATURE_ORDER:
                raise ConfigError(f"unknown tied feature {feature!r}")
            tied.append(tuple(i for i, (_, f) in enumerate(entries) if f == feature))
    return GeneLayout(tuple(entries), tuple(tied))


@dataclass(frozen=True)
class CfeProblem:
    """Everything needed to score gene vectors against the forecaster."""

    model: TgcnModel
    base_window: FeatureWindow
    original: EditableVector
    segment_indices: np.ndarray
    target_index: int
    target_window: tuple[int, int]
    target_speed: float
    constraints: tuple[ScenarioConstraint, ...]
    observed: ObservedFeatureSet

    def predict_target_mean(self, genes: np.ndarray) -> np.ndarray:
        """Mean predicted km/h on the target node over the target window."""
        genes = np.atleast_2d(np.asarray(genes, dtype=float))
        count = genes.shape[0]
        static_rows = genes.reshape(count, -1, 3)
        inputs = np.broadcast_to(
            self.base_window.inputs, (count,) + self.base_window.inputs.shape
        ).copy()
        inputs[:, :, self.segment_indices, POI_COL:LIMIT_COL + 1] = static_rows[:, None, :, :]
        pred = forward_batch(self.model, inputs) * self.model.speed_max
        lo, hi = self.target_window
        return pred[:, lo:hi, self.target_index].mean(axis=1)

    def evaluate(self, genes: np.ndarray) -> np.ndarray:
        """Batch objective matrix (validity, proximity, sparsity, plausibility)."""
        genes = np.atleast_2d(np.asarray(genes, dtype=float))
        predicted = self.predict_target_mean(genes)
        validity = np.abs(predicted - self.target_speed)

        delta = genes - self.original.values
        factors = np.ones_like(genes)
        for constraint in self.constraints:
            idx = np.array(constraint.genes, dtype=int)
            if constraint.kind == "weighting":
                fired = np.ones((genes.shape[0], idx.size), dtype=bool)
            elif constraint.direction == "increase":
                fired = delta[:, idx] < 0
            else:
                fired = delta[:, idx] > 0
            block = factors[:, idx]
            block[fired] = np.maximum(block[fired], constraint.penalty)
            factors[:, idx] = block
        proximity = (factors * np.abs(delta)).sum(axis=1)
        sparsity = (np.abs(delta) > 1e-9).sum(axis=1).astype(float)

        triples = genes.reshape(genes.shape[0], -1, 3)
        diffs = triples[:, :, None, :] - self.observed.rows[None, None, :, :]
        distances = np.sqrt((diffs**2).sum(axis=3))  # (batch, segment, observed)
        nearest = np.sort(distances, axis=2)[:, :, : self.observed.k]
        plausibility = nearest.mean(axis=2).mean(axis=1)
        return np.stack([validity, proximity, sparsity, plausibility], axis=1)


def build_problem(
    model: TgcnModel,
    base_window: FeatureWindow,
    original: EditableVector,
    config: SearchConfig,
    constraints: Sequence[ScenarioConstraint],
    observed: ObservedFeatureSet,
    node_ids: Sequence[str],
) -> CfeProblem:
    space = config.space
    if not space.is_feasible(original.values):
        raise ConfigError("original editable vector violates the feasible ranges")
    if original.layout != space.layout:
        raise ConfigError("original vector layout does not match the search space")
    validate_constraints(constraints, len(space.layout))
    if config.target_node is None:
        raise ConfigError("target_node is required for counterfactual search")
    node_list = list(node_ids)
    if config.target_node not in node_list:
        raise ConfigError(f"unknown target node {config.target_node!r}")
    if base_window.node_count != model.node_count:
        raise ConfigError("window and model disagree on node count")
    lo, hi = config.target_window
    if not 0 <= lo < hi <= model.horizon_length:
        raise ConfigError(f"target_window {config.target_window} outside horizon {model.horizon_length}")
    if observed.rows.shape[1] != 3:
        raise ConfigError("observed rows must be (poi, lanes, limit) triples")

    segments = [seg for seg, feature in space.layout.entries if feature == STATIC_FEATURE_ORDER[0]]
    segment_indices = np.array([node_list.index(seg) for seg in segments], dtype=int)
    return CfeProblem(
        model=model,
        base_window=base_window,
        original=original,
        segment_indices=segment_indices,
        target_index=node_list.index(config.target_node),
        target_window=(lo, hi),
        target_speed=config.target_speed,
        constraints=tuple(constraints),
        observed=observed,
    )


def evolve(
    model: TgcnModel,
    base_window: FeatureWindow,
    original: EditableVector,
    config: SearchConfig,
    constraints: Sequence[ScenarioConstraint],
    observed: ObservedFeatureSet,
    node_ids: Sequence[str],
    on_generation: Callable[[int], None] | None = None,
    should_stop: Callable[[], bool] | None = None,
) -> EvolveResult:
    """NSGA-II counterfactual search against a trained forecaster."""
    problem = build_problem(model, base_window, original, config, constraints, observed, node_ids)
    rng = np.random.default_rng(config.seed)
    initial = initial_population(original.values, config, rng)
    # The generation loop continues on the same stream, keeping runs reproducible.
    return _nsga2_with_rng(problem.evaluate, initial, config, rng, on_generation, should_stop)


def _nsga2_with_rng(evaluate_batch, initial, config, rng, on_generation=None, should_stop=None) -> EvolveResult:
    space = config.space
    memo = _Memo(evaluate_batch)
    population = np.array(initial, dtype=float)
    objectives = memo(population)
    history: list[GenerationRecord] = []
    for generation in range(config.generations):
        if should_stop is not None and should_stop():
            raise SearchCancelled(f"stopped at generation {generation}")
        ranks, crowding = _rank_population(objectives)
        children = np.empty_like(population)
        for pair in range(config.population_size // 2):
            pa = population[_tournament(rng, ranks, crowding)]
            pb = population[_tournament(rng, ranks, crowding)]
            if rng.random() < config.crossover_prob:
                ca, cb = uniform_crossover(pa, pb, space, rng)
            else:
                ca, cb = pa.copy(), pb.copy()
            children[2 * pair] = gaussian_mutate(ca, space, config.mutation_prob, rng)
            children[2 * pair + 1] = gaussian_mutate(cb, space, config.mutation_prob, rng)
        child_objectives = memo(children)
        combined = np.concatenate([population, children])
        combined_objectives = np.concatenate([objectives, child_objectives])
        keep = _environmental_selection(combined, combined_objectives, config.population_size)
        population = combined[keep]
        objectives = combined_objectives[keep]
        history.append(GenerationRecord(generation, population.copy(), objectives.copy()))
        if on_generation is not None:
            on_generation(generation + 1)
    return EvolveResult(extract_pareto(population, objectives), history)
