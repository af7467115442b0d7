"""Scenario schema shared by the CLI, the HTTP service, and the browser UI.

The JSON document validated here is the single wire format for launching a
counterfactual search. It is serialized canonically (sorted keys, compact
separators, floats always carrying a decimal point) so independently
produced payloads can be compared byte-for-byte.
"""

from __future__ import annotations

from datetime import datetime
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .errors import ConfigError
from .graph import FeatureWindow, build_feature_matrix
from .model import TgcnModel
from .objectives import (
    DEFAULT_K_NEAREST,
    EditableVector,
    ObservedFeatureSet,
    ScenarioConstraint,
)
from .search import STATIC_FEATURE_ORDER, GeneSpace, SearchConfig, make_layout
from .store import canonical_json
from .synth import LANE_RANGE, LIMIT_RANGE, POI_RANGE, Corpus


class ConstraintModel(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: Literal["directional", "weighting"]
    genes: list[int] = Field(min_length=1)
    penalty: float = 100.0
    direction: Optional[Literal["increase", "decrease"]] = None

    @model_validator(mode="after")
    def _check_direction(self):
        if self.kind == "directional" and self.direction is None:
            raise ValueError("directional constraints require a direction")
        if self.kind == "weighting" and self.direction is not None:
            raise ValueError("weighting constraints take no direction")
        if self.penalty <= 1:
            raise ValueError("penalty must exceed 1")
        return self


class IntFeatureModel(BaseModel):
    model_config = ConfigDict(extra="forbid")

    range: tuple[int, int]
    mutation_std: float
    mutable: bool = True
    tied: bool = False

    @field_validator("range")
    @classmethod
    def _ordered(cls, value):
        if value[0] > value[1]:
            raise ValueError(f"range lower bound {value[0]} exceeds upper bound {value[1]}")
        return value

    @field_validator("mutation_std")
    @classmethod
    def _positive(cls, value):
        if value <= 0:
            raise ValueError("mutation_std must be positive")
        return value


class FloatFeatureModel(BaseModel):
    model_config = ConfigDict(extra="forbid")

    range: tuple[float, float]
    mutation_std: float
    mutable: bool = True
    tied: bool = False

    _ordered = field_validator("range")(IntFeatureModel._ordered.__func__)  # type: ignore[operator]
    _positive = field_validator("mutation_std")(IntFeatureModel._positive.__func__)  # type: ignore[operator]


class FeaturesModel(BaseModel):
    model_config = ConfigDict(extra="forbid")

    poi_count: IntFeatureModel = IntFeatureModel(range=POI_RANGE, mutation_std=2.0)
    lane_count: IntFeatureModel = IntFeatureModel(range=LANE_RANGE, mutation_std=0.5)
    speed_limit: FloatFeatureModel = FloatFeatureModel(range=LIMIT_RANGE, mutation_std=5.0, tied=True)


class ScenarioModel(BaseModel):
    """One counterfactual search request."""

    model_config = ConfigDict(extra="forbid")

    target_node: str
    target_speed: float
    input_start: str
    editable_segments: list[str] = Field(min_length=1)
    target_window: tuple[int, int] = (0, 12)
    features: FeaturesModel = Field(default_factory=FeaturesModel)
    constraints: list[ConstraintModel] = Field(default_factory=list)
    population_size: int = 64
    generations: int = 100
    mutation_prob: float = 0.3
    crossover_prob: float = 0.7
    seed: int = 0

    @field_validator("input_start")
    @classmethod
    def _valid_timestamp(cls, value):
        datetime.fromisoformat(value)
        return value

    @field_validator("population_size")
    @classmethod
    def _even_positive(cls, value):
        if value <= 0 or value % 2:
            raise ValueError("population_size must be a positive even integer")
        return value

    @field_validator("generations")
    @classmethod
    def _positive_generations(cls, value):
        if value <= 0:
            raise ValueError("generations must be positive")
        return value

    @field_validator("mutation_prob", "crossover_prob")
    @classmethod
    def _probability(cls, value):
        if not 0 <= value <= 1:
            raise ValueError("probabilities must lie in [0, 1]")
        return value

    @model_validator(mode="after")
    def _check_window(self):
        lo, hi = self.target_window
        if lo < 0 or hi <= lo:
            raise ValueError("target_window must satisfy 0 <= start < end")
        if len(set(self.editable_segments)) != len(self.editable_segments):
            raise ValueError("editable_segments contains duplicates")
        return self

    def canonical(self) -> str:
        return canonical_json(self.model_dump(mode="json", exclude_none=True))


def parse_scenario(text: str) -> ScenarioModel:
    return ScenarioModel.model_validate_json(text)


class CompiledScenario:
    """Runtime objects derived from a scenario against a corpus + model."""

    def __init__(
        self,
        scenario: ScenarioModel,
        config: SearchConfig,
        constraints: tuple[ScenarioConstraint, ...],
        original: EditableVector,
        observed: ObservedFeatureSet,
        base_window: FeatureWindow,
    ):
        self.scenario = scenario
        self.config = config
        self.constraints = constraints
        self.original = original
        self.observed = observed
        self.base_window = base_window


def compile_scenario(
    scenario: ScenarioModel,
    corpus: Corpus,
    model: TgcnModel,
    window_length: int,
) -> CompiledScenario:
    """Resolve segment names, build the gene space, and cut the base window."""
    graph = corpus.graph
    if scenario.target_node not in graph.node_ids:
        raise ConfigError(f"unknown target node {scenario.target_node!r}")
    for seg in scenario.editable_segments:
        if seg not in graph.node_ids:
            raise ConfigError(f"unknown editable segment {seg!r}")
    lo, hi = scenario.target_window
    if hi > model.horizon_length:
        raise ConfigError(f"target_window {scenario.target_window} exceeds horizon {model.horizon_length}")

    features = scenario.features
    tied = tuple(
        name for name in STATIC_FEATURE_ORDER if getattr(features, name).tied
    )
    layout = make_layout(scenario.editable_segments, tied_features=tied)
    per_feature = {name: getattr(features, name) for name in STATIC_FEATURE_ORDER}
    lower, upper, std, integral, mutable = [], [], [], [], []
    for _, feature in layout.entries:
        spec = per_feature[feature]
        lower.append(float(spec.range[0]))
        upper.append(float(spec.range[1]))
        std.append(float(spec.mutation_std))
        integral.append(feature in ("poi_count", "lane_count"))
        mutable.append(bool(spec.mutable))
    space = GeneSpace(
        layout=layout,
        lower=np.array(lower),
        upper=np.array(upper),
        mutation_std=np.array(std),
        integral=np.array(integral, dtype=bool),
        mutable=np.array(mutable, dtype=bool),
    )
    config = SearchConfig(
        space=space,
        population_size=scenario.population_size,
        generations=scenario.generations,
        mutation_prob=scenario.mutation_prob,
        crossover_prob=scenario.crossover_prob,
        seed=scenario.seed,
        target_node=scenario.target_node,
        target_window=scenario.target_window,
        target_speed=scenario.target_speed,
    )
    constraints = tuple(
        ScenarioConstraint(
            kind=c.kind, genes=tuple(c.genes), penalty=c.penalty, direction=c.direction
        )
        for c in scenario.constraints
    )

    original_values = []
    for seg, feature in layout.entries:
        static = corpus.static[graph.index_of(seg)]
        original_values.append(float(getattr(static, feature)))
    original = EditableVector(np.array(original_values), layout)
    if not space.is_feasible(original.values):
        raise ConfigError(
            "original static features fall outside the configured feasible ranges"
        )

    observed = ObservedFeatureSet(corpus.static_matrix(), k=DEFAULT_K_NEAREST)

    base_window = cut_window(corpus, model, window_length, scenario.input_start)
    return CompiledScenario(scenario, config, constraints, original, observed, base_window)


def cut_window(corpus: Corpus, model: TgcnModel, window_length: int, input_start: str) -> FeatureWindow:
    """Build the single window whose input begins at `input_start`."""
    start_step = corpus.speeds.step_of(datetime.fromisoformat(input_start))
    horizon = model.horizon_length
    total = window_length + horizon
    if start_step + total > corpus.speeds.time_steps:
        raise ConfigError(
            f"input_start {input_start} leaves no room for a "
            f"{window_length}+{horizon}-step window"
        )
    normalized = corpus.speeds.values / model.speed_max
    features = build_feature_matrix(normalized, corpus.static, corpus.context)
    inputs = features[start_step:start_step + window_length].copy()
    targets = corpus.speeds.values[:, start_step + window_length:start_step + total].T.copy()
    return FeatureWindow(inputs, targets, start_step, model.speed_max)
