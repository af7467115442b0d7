"""Road-network data model, contextual feature encoding, and window construction.

A road network is a graph whose nodes are road segments. Each segment carries
static attributes (POI count, lane count, speed limit) and the corpus carries
a speed series plus time-varying context (calendar + weather). Model inputs
are sliding windows over the enhanced feature matrix: normalized speed
concatenated with the encoded static and dynamic context of every segment.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from datetime import datetime, timedelta

import numpy as np

NODE_CLASSES = ("suburban", "urban", "highway")

# Column layout of the per-node feature vector fed to the forecaster.
SPEED_COL = 0
POI_COL = 1
LANE_COL = 2
LIMIT_COL = 3
DOW_COLS = slice(4, 11)
HOUR_SIN_COL = 11
HOUR_COS_COL = 12
TEMP_COL = 13
WIND_COL = 14
PRECIP_COL = 15
HUMIDITY_COL = 16
FEATURE_DIM = 17

STATIC_FEATURES = ("poi_count", "lane_count", "speed_limit")
STATIC_COLS = {"poi_count": POI_COL, "lane_count": LANE_COL, "speed_limit": LIMIT_COL}

INTERVAL_MINUTES = 5
STEPS_PER_DAY = 24 * 60 // INTERVAL_MINUTES


@dataclass(frozen=True)
class RoadGraph:
    """Segment graph: symmetric binary adjacency with zero diagonal.

    ``road_ids`` is synthetic-corpus metadata grouping consecutive segments
    into named roads; it has no effect on model computation.
    """

    node_count: int
    adjacency: np.ndarray
    node_ids: tuple[str, ...]
    node_class: tuple[str, ...]
    road_ids: tuple[str, ...] = ()

    def __post_init__(self):
        adj = np.asarray(self.adjacency, dtype=float)
        if adj.shape != (self.node_count, self.node_count):
            raise ValueError(f"adjacency shape {adj.shape} does not match node_count {self.node_count}")
        if not np.array_equal(adj, adj.T):
            raise ValueError("adjacency must be symmetric")
        if not np.isin(adj, (0.0, 1.0)).all():
            raise ValueError("adjacency entries must be 0 or 1")
        if np.trace(adj) != 0:
            raise ValueError("adjacency diagonal must be zero")
        if len(self.node_ids) != self.node_count or len(set(self.node_ids)) != self.node_count:
            raise ValueError("node_ids must be unique and of length node_count")
        for cls in self.node_class:
            if cls not in NODE_CLASSES:
                raise ValueError(f"unknown node class {cls!r}")
        object.__setattr__(self, "adjacency", adj)

    def index_of(self, node_id: str) -> int:
        try:
            return self.node_ids.index(node_id)
        except ValueError:
            raise KeyError(f"unknown node id {node_id!r}") from None

    def degree(self) -> np.ndarray:
        return self.adjacency.sum(axis=1)


@dataclass(frozen=True)
class StaticFeatures:
    """Time-invariant attributes of one road segment, in natural units."""

    poi_count: int
    lane_count: int
    speed_limit: float

    def __post_init__(self):
        if self.poi_count < 0:
            raise ValueError("poi_count must be non-negative")
        if self.lane_count < 1:
            raise ValueError("lane_count must be positive")
        if self.speed_limit <= 0:
            raise ValueError("speed_limit must be positive")

    def as_array(self) -> np.ndarray:
        return np.array([self.poi_count, self.lane_count, self.speed_limit], dtype=float)


@dataclass(frozen=True)
class DynamicContext:
    """Encoded time-varying context for one 5-minute step.

    day_of_week is one-hot with Monday at index 0; the hour encoding is the
    (sin, cos) pair of the fractional-hour angle 2*pi*(hour + minute/60)/24.
    """

    day_of_week: tuple[int, ...]
    hour_sin: float
    hour_cos: float
    temperature: float
    wind_speed: float
    precipitation: float
    humidity: float

    def __post_init__(self):
        if len(self.day_of_week) != 7 or sum(self.day_of_week) != 1 or set(self.day_of_week) - {0, 1}:
            raise ValueError("day_of_week must be a 7-element one-hot vector")
        if abs(self.hour_sin**2 + self.hour_cos**2 - 1.0) > 1e-9:
            raise ValueError("hour encoding must lie on the unit circle")
        if self.precipitation < 0:
            raise ValueError("precipitation must be non-negative")
        if not 0 <= self.humidity <= 100:
            raise ValueError("humidity must be a percentage in [0, 100]")

    def as_array(self) -> np.ndarray:
        return np.array(
            list(self.day_of_week)
            + [self.hour_sin, self.hour_cos, self.temperature, self.wind_speed, self.precipitation, self.humidity],
            dtype=float,
        )


@dataclass(frozen=True)
class WeatherRecord:
    temperature: float
    wind_speed: float
    precipitation: float
    humidity: float


def encode_context(timestamp: datetime, weather: WeatherRecord) -> DynamicContext:
    """Encode a timestamp plus weather record into model-ready context."""
    for name in ("temperature", "wind_speed", "precipitation", "humidity"):
        value = getattr(weather, name)
        if not math.isfinite(value):
            raise ValueError(f"weather field {name} is not finite: {value!r}")
    onehot = [0] * 7
    onehot[timestamp.weekday()] = 1
    angle = 2.0 * math.pi * (timestamp.hour + timestamp.minute / 60.0) / 24.0
    return DynamicContext(
        day_of_week=tuple(onehot),
        hour_sin=math.sin(angle),
        hour_cos=math.cos(angle),
        temperature=weather.temperature,
        wind_speed=weather.wind_speed,
        precipitation=weather.precipitation,
        humidity=weather.humidity,
    )


def decode_day(context: DynamicContext) -> int:
    """Inverse of the one-hot day encoding: 0 = Monday."""
    return context.day_of_week.index(1)


def decode_hour(context: DynamicContext) -> float:
    """Recover the fractional hour from the sin/cos pair, in [0, 24)."""
    angle = math.atan2(context.hour_sin, context.hour_cos) % (2.0 * math.pi)
    return angle * 24.0 / (2.0 * math.pi)


@dataclass(frozen=True)
class SpeedSeries:
    """Per-node speed observations on a fixed 5-minute grid, km/h."""

    values: np.ndarray  # (node_count, time_steps)
    start_timestamp: datetime
    interval_minutes: int = INTERVAL_MINUTES

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 2:
            raise ValueError("speed values must be a (node_count, time_steps) matrix")
        if (values < 0).any():
            raise ValueError("speeds must be non-negative")
        if self.interval_minutes <= 0:
            raise ValueError("interval_minutes must be positive")
        object.__setattr__(self, "values", values)

    @property
    def node_count(self) -> int:
        return self.values.shape[0]

    @property
    def time_steps(self) -> int:
        return self.values.shape[1]

    def timestamp_at(self, step: int) -> datetime:
        return self.start_timestamp + timedelta(minutes=self.interval_minutes * step)

    def step_of(self, timestamp: datetime) -> int:
        delta = timestamp - self.start_timestamp
        minutes = delta.total_seconds() / 60.0
        step = minutes / self.interval_minutes
        if step != int(step) or not 0 <= step < self.time_steps:
            raise ValueError(f"timestamp {timestamp.isoformat()} is not on the series grid")
        return int(step)


@dataclass(frozen=True)
class FeatureWindow:
    """One model input/target pair.

    inputs:  (window_length, node_count, FEATURE_DIM), speed normalized,
             everything else in natural units.
    targets: (horizon_length, node_count) raw speeds in km/h.
    start_index: offset of the first input step in the source series.
    """

    inputs: np.ndarray
    targets: np.ndarray
    start_index: int = 0
    speed_max: float = 1.0

    @property
    def window_length(self) -> int:
        return self.inputs.shape[0]

    @property
    def horizon_length(self) -> int:
        return self.targets.shape[0]

    @property
    def node_count(self) -> int:
        return self.inputs.shape[1]

    def with_static(self, node_indices: np.ndarray, static_rows: np.ndarray) -> "FeatureWindow":
        """Copy of this window with the static columns of `node_indices` replaced."""
        inputs = self.inputs.copy()
        inputs[:, node_indices, POI_COL:LIMIT_COL + 1] = static_rows
        return FeatureWindow(inputs, self.targets, self.start_index, self.speed_max)


def build_feature_matrix(
    speeds_normalized: np.ndarray,
    static: list[StaticFeatures],
    context: list[DynamicContext],
) -> np.ndarray:
    """Assemble the (time, node, FEATURE_DIM) tensor from corpus pieces."""
    n_nodes, n_steps = speeds_normalized.shape
    if len(static) != n_nodes:
        raise ValueError("one StaticFeatures entry per node is required")
    if len(context) != n_steps:
        raise ValueError("one DynamicContext entry per time step is required")
    features = np.zeros((n_steps, n_nodes, FEATURE_DIM), dtype=float)
    features[:, :, SPEED_COL] = speeds_normalized.T
    static_block = np.stack([s.as_array() for s in static])  # (node, 3)
    features[:, :, POI_COL:LIMIT_COL + 1] = static_block[None, :, :]
    context_block = np.stack([c.as_array() for c in context])  # (time, 13)
    features[:, :, DOW_COLS.start:] = context_block[:, None, :]
    return features


def make_windows(
    speeds: SpeedSeries,
    static: list[StaticFeatures],
    context: list[DynamicContext],
    window_length: int = 12,
    horizon_length: int = 12,
    stride: int = 1,
    speed_max: float | None = None,
) -> list[FeatureWindow]:
    """Cut contiguous, non-wrapping input/target windows from the series.

    speed_max is the normalization constant; by default the maximum of the
    given series, but callers building train/test splits should pass the
    corpus-wide maximum so both splits share one scale.
    """
    if window_length <= 0 or horizon_length <= 0 or stride <= 0:
        raise ValueError("window_length, horizon_length and stride must be positive")
    total = window_length + horizon_length
    if speeds.time_steps < total:
        raise ValueError(
            f"series has {speeds.time_steps} steps; at least {total} are needed "
            f"for window {window_length} + horizon {horizon_length}"
        )
    if speed_max is None:
        speed_max = float(speeds.values.max())
    if speed_max <= 0:
        raise ValueError("speed_max must be positive")
    normalized = speeds.values / speed_max
    features = build_feature_matrix(normalized, static, context)
    windows = []
    for start in range(0, speeds.time_steps - total + 1, stride):
        inputs = features[start:start + window_length].copy()
        targets = speeds.values[:, start + window_length:start + total].T.copy()
        windows.append(FeatureWindow(inputs, targets, start, speed_max))
    return windows
