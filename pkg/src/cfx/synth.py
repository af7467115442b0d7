"""Synthetic road-network corpus with planted, recoverable contextual effects.

The generator plants class-dependent linear effects of the static features on
speed (e.g. more POIs raise suburban speeds and lower urban speeds, statics
are inert on highways) on top of a daily congestion curve with weekday/weekend
modulation and Gaussian noise. The closed-form generating function is kept
around so tests can query ground truth directly.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from datetime import date, datetime, timedelta
from pathlib import Path

import numpy as np

from .graph import (
    INTERVAL_MINUTES,
    STEPS_PER_DAY,
    DynamicContext,
    RoadGraph,
    SpeedSeries,
    StaticFeatures,
    WeatherRecord,
    encode_context,
)

# Feasible feature ranges shared by the generator and the default search space.
POI_RANGE = (0, 36)
LANE_RANGE = (1, 6)
LIMIT_RANGE = (40.0, 120.0)

DEFAULT_START = date(2026, 1, 5)  # a Monday, so weekday patterns align with day 0

# km/h per unit of (poi, lane, limit) deviation from the class reference.
DEFAULT_COEFFICIENTS = {
    "suburban": {"poi_count": 0.5, "lane_count": 1.5, "speed_limit": 0.25},
    "urban": {"poi_count": -0.15, "lane_count": 2.0, "speed_limit": 0.15},
    "highway": {"poi_count": 0.0, "lane_count": 0.0, "speed_limit": 0.0},
}

# (mean speed, congestion amplitude, poi/lane/limit reference values)
CLASS_PROFILES = {
    "suburban": (52.0, 14.0, 18.0, 2.0, 65.0),
    "urban": (45.0, 16.0, 16.0, 3.0, 50.0),
    "highway": (100.0, 25.0, 18.0, 4.0, 100.0),
}

# POI draws share one mean across classes, with almost all of the variance on
# the suburban class: with equal means the between-class POI/speed covariance
# vanishes, and with suburban dominating the spread a forecaster without an
# explicit class input can recover the planted suburban POI sign from
# within-class variation instead of inheriting a class confound.
POI_DRAW = {"suburban": (0, 37), "urban": (12, 21), "highway": (14, 23)}

WEEKEND_FACTOR = 0.35


@dataclass(frozen=True)
class SyntheticCorpusSpec:
    seed: int
    node_count: int
    days: int
    planted_coefficients: dict = field(default_factory=lambda: DEFAULT_COEFFICIENTS)
    noise_std: float = 2.0
    start: date = DEFAULT_START
    cross_links: int | None = None

    def __post_init__(self):
        if self.node_count <= 0:
            raise ValueError("node_count must be positive")
        if self.days <= 0:
            raise ValueError("days must be positive")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")
        for cls, coefs in self.planted_coefficients.items():
            if cls not in CLASS_PROFILES:
                raise ValueError(f"unknown node class {cls!r} in planted_coefficients")
            unknown = set(coefs) - {"poi_count", "lane_count", "speed_limit"}
            if unknown:
                raise ValueError(f"unknown planted features {sorted(unknown)}")


def congestion_level(hour: float, weekend: bool) -> float:
    """Morning/evening congestion bumps in [0, ~1]; damped on weekends."""
    level = math.exp(-(((hour - 8.5) / 1.8) ** 2)) + math.exp(-(((hour - 17.5) / 2.0) ** 2))
    return level * (WEEKEND_FACTOR if weekend else 1.0)


@dataclass(frozen=True)
class SyntheticOracle:
    """Noise-free generating function retained for ground-truth queries."""

    coefficients: dict

    def expected_speed(self, node_class: str, hour: float, weekend: bool, static: StaticFeatures) -> float:
        mean, amplitude, poi_ref, lane_ref, limit_ref = CLASS_PROFILES[node_class]
        coefs = self.coefficients.get(node_class, {})
        effect = (
            coefs.get("poi_count", 0.0) * (static.poi_count - poi_ref)
            + coefs.get("lane_count", 0.0) * (static.lane_count - lane_ref)
            + coefs.get("speed_limit", 0.0) * (static.speed_limit - limit_ref)
        )
        return max(0.0, mean - amplitude * congestion_level(hour, weekend) + effect)

    def effect_sign(self, node_class: str, feature: str) -> int:
        value = self.coefficients.get(node_class, {}).get(feature, 0.0)
        return (value > 0) - (value < 0)


@dataclass
class Corpus:
    """A generated corpus bundle: graph, speeds, statics, and context."""

    graph: RoadGraph
    speeds: SpeedSeries
    static: list[StaticFeatures]
    context: list[DynamicContext]
    spec: SyntheticCorpusSpec | None = None
    oracle: SyntheticOracle | None = None

    @property
    def speed_max(self) -> float:
        return float(self.speeds.values.max())

    def static_matrix(self) -> np.ndarray:
        return np.stack([s.as_array() for s in self.static])

    def nodes_of_road(self, road_id: str) -> list[str]:
        members = [nid for nid, rid in zip(self.graph.node_ids, self.graph.road_ids) if rid == road_id]
        if not members:
            raise KeyError(f"unknown road id {road_id!r}")
        return members

    def road_of_node(self, node_id: str) -> str:
        return self.graph.road_ids[self.graph.index_of(node_id)]


def _build_graph(rng: np.random.Generator, node_count: int, cross_links: int) -> RoadGraph:
    n_roads = max(3, round(node_count / 8))
    sizes = [node_count // n_roads] * n_roads
    for i in range(node_count % n_roads):
        sizes[i] += 1
    adjacency = np.zeros((node_count, node_count))
    node_ids, node_class, road_ids, road_slices = [], [], [], []
    cursor = 0
    for road_index, size in enumerate(sizes):
        cls = ("suburban", "urban", "highway")[road_index % 3]
        road = f"road-{road_index:02d}"
        road_slices.append((cursor, cursor + size))
        for offset in range(size):
            node_ids.append(f"seg-{cursor + offset:03d}")
            node_class.append(cls)
            road_ids.append(road)
            if offset > 0:
                a, b = cursor + offset - 1, cursor + offset
                adjacency[a, b] = adjacency[b, a] = 1.0
        cursor += size
    # Sparse cross-links make the network connected without washing out
    # road-local structure.
    attempts = 0
    added = 0
    while added < cross_links and attempts < 50 * cross_links:
        attempts += 1
        ra, rb = rng.choice(len(road_slices), size=2, replace=False)
        a = int(rng.integers(*road_slices[ra]))
        b = int(rng.integers(*road_slices[rb]))
        if adjacency[a, b] == 0:
            adjacency[a, b] = adjacency[b, a] = 1.0
            added += 1
    return RoadGraph(node_count, adjacency, tuple(node_ids), tuple(node_class), tuple(road_ids))


def _draw_static(rng: np.random.Generator, graph: RoadGraph) -> list[StaticFeatures]:
    # One speed limit per road, mirroring real signage.
    road_limits: dict[str, float] = {}
    for road, cls in zip(graph.road_ids, graph.node_class):
        if road not in road_limits:
            low, high = {"suburban": (55, 75), "urban": (40, 60), "highway": (90, 115)}[cls]
            road_limits[road] = float(rng.integers(low // 5, high // 5 + 1) * 5)
    static = []
    for cls, road in zip(graph.node_class, graph.road_ids):
        poi = int(rng.integers(*POI_DRAW[cls]))
        if cls == "suburban":
            lanes = int(rng.integers(1, 4))
        elif cls == "urban":
            lanes = int(rng.integers(2, 5))
        else:
            lanes = int(rng.integers(3, 7))
        static.append(StaticFeatures(poi, min(lanes, LANE_RANGE[1]), road_limits[road]))
    return static


def _draw_weather(rng: np.random.Generator, steps: int, start: datetime) -> list[WeatherRecord]:
    records = []
    temp_drift = 0.0
    raining = False
    for step in range(steps):
        ts = start + timedelta(minutes=INTERVAL_MINUTES * step)
        hour = ts.hour + ts.minute / 60.0
        temp_drift = 0.98 * temp_drift + rng.normal(0.0, 0.3)
        temperature = 12.0 + 8.0 * math.sin(2 * math.pi * (hour - 9.0) / 24.0) + temp_drift
        wind = max(0.0, 3.0 + 2.0 * math.sin(2 * math.pi * (hour - 14.0) / 24.0) + rng.normal(0.0, 0.8))
        if raining:
            raining = rng.random() > 0.05
        else:
            raining = rng.random() < 0.005
        precipitation = float(rng.gamma(2.0, 1.0)) if raining else 0.0
        humidity = min(95.0, max(20.0, 60.0 + 15.0 * math.sin(2 * math.pi * (hour - 4.0) / 24.0) + rng.normal(0.0, 4.0)))
        records.append(WeatherRecord(temperature, wind, precipitation, humidity))
    return records


def synth_generate(spec: SyntheticCorpusSpec) -> Corpus:
    """Generate a corpus deterministically from the spec's seed."""
    rng = np.random.default_rng(spec.seed)
    cross_links = spec.cross_links if spec.cross_links is not None else max(1, spec.node_count // 10)
    graph = _build_graph(rng, spec.node_count, cross_links)
    static = _draw_static(rng, graph)
    steps = spec.days * STEPS_PER_DAY
    start = datetime(spec.start.year, spec.start.month, spec.start.day)
    weather = _draw_weather(rng, steps, start)
    context = [
        encode_context(start + timedelta(minutes=INTERVAL_MINUTES * step), weather[step])
        for step in range(steps)
    ]
    oracle = SyntheticOracle(spec.planted_coefficients)
    values = np.zeros((spec.node_count, steps))
    hours = np.array([(start + timedelta(minutes=INTERVAL_MINUTES * s)).hour
                      + (start + timedelta(minutes=INTERVAL_MINUTES * s)).minute / 60.0 for s in range(steps)])
    weekends = np.array([(start + timedelta(minutes=INTERVAL_MINUTES * s)).weekday() >= 5 for s in range(steps)])
    for node in range(spec.node_count):
        cls = graph.node_class[node]
        base = np.array([
            oracle.expected_speed(cls, hours[s], bool(weekends[s]), static[node]) for s in range(steps)
        ])
        values[node] = base
    if spec.noise_std > 0:
        values = values + rng.normal(0.0, spec.noise_std, size=values.shape)
    values = np.maximum(values, 0.0)
    speeds = SpeedSeries(values, start)
    return Corpus(graph, speeds, static, context, spec, oracle)


# ---------------------------------------------------------------------------
# Corpus directory serialization: graph.json, speeds.csv, static.csv,
# context.csv. Floats are written with 9 significant digits so identical
# specs produce identical bytes on any platform.
# ---------------------------------------------------------------------------

def _fmt(x: float) -> str:
    return format(float(x), ".9g")


def save_corpus(corpus: Corpus, directory: Path | str) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    graph = corpus.graph
    neighbors = {
        nid: [graph.node_ids[j] for j in np.flatnonzero(graph.adjacency[i])]
        for i, nid in enumerate(graph.node_ids)
    }
    graph_doc = {
        "node_count": graph.node_count,
        "nodes": [
            {"id": nid, "class": cls, "road": road}
            for nid, cls, road in zip(graph.node_ids, graph.node_class, graph.road_ids)
        ],
        "adjacency": neighbors,
    }
    (directory / "graph.json").write_text(json.dumps(graph_doc, indent=2, sort_keys=True) + "\n")

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["timestamp"] + list(graph.node_ids))
    for step in range(corpus.speeds.time_steps):
        ts = corpus.speeds.timestamp_at(step).isoformat()
        writer.writerow([ts] + [_fmt(v) for v in corpus.speeds.values[:, step]])
    (directory / "speeds.csv").write_text(buf.getvalue())

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["node_id", "node_class", "road_id", "poi_count", "lane_count", "speed_limit"])
    for nid, cls, road, st in zip(graph.node_ids, graph.node_class, graph.road_ids, corpus.static):
        writer.writerow([nid, cls, road, st.poi_count, st.lane_count, _fmt(st.speed_limit)])
    (directory / "static.csv").write_text(buf.getvalue())

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["timestamp", "day_index", "hour_sin", "hour_cos",
                     "temperature", "wind_speed", "precipitation", "humidity"])
    for step, ctx in enumerate(corpus.context):
        ts = corpus.speeds.timestamp_at(step).isoformat()
        writer.writerow([
            ts, ctx.day_of_week.index(1), _fmt(ctx.hour_sin), _fmt(ctx.hour_cos),
            _fmt(ctx.temperature), _fmt(ctx.wind_speed), _fmt(ctx.precipitation), _fmt(ctx.humidity),
        ])
    (directory / "context.csv").write_text(buf.getvalue())


def load_corpus(directory: Path | str) -> Corpus:
    directory = Path(directory)
    graph_doc = json.loads((directory / "graph.json").read_text())
    nodes = graph_doc["nodes"]
    node_ids = [n["id"] for n in nodes]
    index = {nid: i for i, nid in enumerate(node_ids)}
    adjacency = np.zeros((len(nodes), len(nodes)))
    for nid, nbrs in graph_doc["adjacency"].items():
        for other in nbrs:
            adjacency[index[nid], index[other]] = 1.0
    graph = RoadGraph(
        len(nodes), adjacency, tuple(node_ids),
        tuple(n["class"] for n in nodes), tuple(n["road"] for n in nodes),
    )

    static_by_id = {}
    with open(directory / "static.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            static_by_id[row["node_id"]] = StaticFeatures(
                int(row["poi_count"]), int(row["lane_count"]), float(row["speed_limit"])
            )
    static = [static_by_id[nid] for nid in node_ids]

    timestamps, columns = [], None
    rows = []
    with open(directory / "speeds.csv", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        columns = header[1:]
        for row in reader:
            timestamps.append(datetime.fromisoformat(row[0]))
            rows.append([float(v) for v in row[1:]])
    values = np.array(rows).T  # (node, time)
    order = [columns.index(nid) for nid in node_ids]
    values = values[order]
    speeds = SpeedSeries(values, timestamps[0])

    context = []
    with open(directory / "context.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            # The hour encoding is recomputed from the timestamp: the stored
            # 9-significant-digit values cannot satisfy the unit-circle
            # invariant at 1e-9, and re-encoding reproduces the generator's
            # values bit-exactly.
            ts = datetime.fromisoformat(row["timestamp"])
            angle = 2.0 * math.pi * (ts.hour + ts.minute / 60.0) / 24.0
            hour_sin, hour_cos = math.sin(angle), math.cos(angle)
            if abs(hour_sin - float(row["hour_sin"])) > 1e-6 or abs(hour_cos - float(row["hour_cos"])) > 1e-6:
                raise ValueError(f"context row at {row['timestamp']} has an inconsistent hour encoding")
            onehot = [0] * 7
            onehot[int(row["day_index"])] = 1
            context.append(DynamicContext(
                tuple(onehot), hour_sin, hour_cos,
                float(row["temperature"]), float(row["wind_speed"]),
                float(row["precipitation"]), float(row["humidity"]),
            ))
    return Corpus(graph, speeds, static, context)
