"""Post-hoc evaluation of a chosen counterfactual.

Given a counterfactual static-feature assignment, slide the model across a
full day and compare predictions with and without the patch: a daily series
for the target node, day-aggregated deltas for every node in the network,
and per-segment feature diffs. Everything is reported in denormalized km/h.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from datetime import date, datetime, timedelta
from pathlib import Path
from typing import Sequence

import numpy as np

from .graph import LIMIT_COL, POI_COL, STEPS_PER_DAY, build_feature_matrix
from .model import TgcnModel, forward_batch
from .objectives import (
    EditableVector,
    EvaluationWeights,
    ObjectiveVector,
    score_candidates,
)
from .store import SCHEMA_VERSION
from .synth import Corpus

# Daily series take the first horizon step of each sliding window: with
# 5-minute data that is the 5-minutes-ahead prediction at every position.
REPORT_HORIZON_STEP = 0


@dataclass(frozen=True)
class NodeDelta:
    max_increase: float
    max_decrease: float
    mean_delta: float


@dataclass
class ImpactReport:
    day: date
    target_node: str
    per_node_delta: dict[str, NodeDelta]
    worst_decrease: float
    worst_decrease_node: str
    target_series_original: np.ndarray
    target_series_counterfactual: np.ndarray
    target_series_truth: np.ndarray
    series_timestamps: list[datetime]
    feature_diff: list[dict]
    totals: dict[str, float]

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "unit": "km/h",
            "horizon_step": REPORT_HORIZON_STEP,
            "day": self.day.isoformat(),
            "target_node": self.target_node,
            "per_node_delta": {
                node: {
                    "max_increase": delta.max_increase,
                    "max_decrease": delta.max_decrease,
                    "mean_delta": delta.mean_delta,
                }
                for node, delta in self.per_node_delta.items()
            },
            "worst_decrease": self.worst_decrease,
            "worst_decrease_node": self.worst_decrease_node,
            "target_series": {
                "timestamps": [ts.isoformat() for ts in self.series_timestamps],
                "original": [float(v) for v in self.target_series_original],
                "counterfactual": [float(v) for v in self.target_series_counterfactual],
                "truth": [float(v) for v in self.target_series_truth],
            },
            "feature_diff": self.feature_diff,
            "totals": self.totals,
        }


def _day_window_inputs(
    corpus: Corpus,
    day: date,
    window_length: int,
    horizon_length: int,
    patch: tuple[np.ndarray, np.ndarray] | None,
) -> tuple[np.ndarray, np.ndarray]:
    """Stacked inputs for every window fully inside `day`, plus position index."""
    day_start = corpus.speeds.step_of(datetime(day.year, day.month, day.day))
    total = window_length + horizon_length
    if day_start + STEPS_PER_DAY > corpus.speeds.time_steps:
        raise ValueError(f"day {day.isoformat()} is not fully covered by the corpus")
    positions = np.arange(day_start, day_start + STEPS_PER_DAY - total + 1)
    normalized = corpus.speeds.values / corpus.speed_max
    features = build_feature_matrix(normalized, corpus.static, corpus.context)
    if patch is not None:
        segment_indices, static_rows = patch
        features = features.copy()
        features[:, segment_indices, POI_COL:LIMIT_COL + 1] = static_rows
    inputs = np.stack([features[p:p + window_length] for p in positions])
    return inputs, positions


def _patch_from_vector(corpus: Corpus, cfe: EditableVector) -> tuple[np.ndarray, np.ndarray]:
    segments = [seg for seg, feature in cfe.layout.entries if feature == "poi_count"]
    segment_indices = np.array([corpus.graph.index_of(seg) for seg in segments], dtype=int)
    static_rows = cfe.values.reshape(-1, 3)
    return segment_indices, static_rows


def counterfactual_day_prediction(
    model: TgcnModel,
    corpus: Corpus,
    cfe: EditableVector,
    day: date,
    node_id: str,
    window_length: int = 12,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, list[datetime]]:
    """(original, counterfactual, truth) daily series for one node."""
    node_index = corpus.graph.index_of(node_id)
    horizon = model.horizon_length
    original_inputs, positions = _day_window_inputs(corpus, day, window_length, horizon, None)
    patched_inputs, _ = _day_window_inputs(
        corpus, day, window_length, horizon, _patch_from_vector(corpus, cfe)
    )
    original = forward_batch(model, original_inputs)[:, REPORT_HORIZON_STEP, node_index] * model.speed_max
    counterfactual = forward_batch(model, patched_inputs)[:, REPORT_HORIZON_STEP, node_index] * model.speed_max
    steps = positions + window_length + REPORT_HORIZON_STEP
    truth = corpus.speeds.values[node_index, steps]
    timestamps = [corpus.speeds.timestamp_at(int(s)) for s in steps]
    return original, counterfactual, truth, timestamps


def network_impact(
    model: TgcnModel,
    corpus: Corpus,
    cfe: EditableVector,
    day: date,
    target_node: str,
    window_length: int = 12,
) -> ImpactReport:
    """Day-aggregated prediction deltas (counterfactual - original), all nodes."""
    horizon = model.horizon_length
    original_inputs, positions = _day_window_inputs(corpus, day, window_length, horizon, None)
    patch = _patch_from_vector(corpus, cfe)
    patched_inputs, _ = _day_window_inputs(corpus, day, window_length, horizon, patch)
    original = forward_batch(model, original_inputs)[:, REPORT_HORIZON_STEP, :] * model.speed_max
    counterfactual = forward_batch(model, patched_inputs)[:, REPORT_HORIZON_STEP, :] * model.speed_max
    delta = counterfactual - original  # (positions, nodes)

    per_node = {}
    for i, node in enumerate(corpus.graph.node_ids):
        per_node[node] = NodeDelta(
            max_increase=float(delta[:, i].max()),
            max_decrease=float(delta[:, i].min()),
            mean_delta=float(delta[:, i].mean()),
        )
    worst_node = min(per_node, key=lambda n: per_node[n].max_decrease)

    segment_indices, static_rows = patch
    feature_diff = []
    totals = {"poi_count": 0.0, "lane_count": 0.0, "speed_limit": 0.0}
    for seg_pos, seg_index in enumerate(segment_indices):
        before = corpus.static[seg_index].as_array()
        after = static_rows[seg_pos]
        diff = after - before
        feature_diff.append({
            "segment": corpus.graph.node_ids[seg_index],
            "poi_count": float(diff[0]),
            "lane_count": float(diff[1]),
            "speed_limit": float(diff[2]),
        })
        totals["poi_count"] += float(diff[0])
        totals["lane_count"] += float(diff[1])
        totals["speed_limit"] += float(diff[2])

    node_index = corpus.graph.index_of(target_node)
    steps = positions + window_length + REPORT_HORIZON_STEP
    return ImpactReport(
        day=day,
        target_node=target_node,
        per_node_delta=per_node,
        worst_decrease=per_node[worst_node].max_decrease,
        worst_decrease_node=worst_node,
        target_series_original=original[:, node_index],
        target_series_counterfactual=counterfactual[:, node_index],
        target_series_truth=corpus.speeds.values[node_index, steps],
        series_timestamps=[corpus.speeds.timestamp_at(int(s)) for s in steps],
        feature_diff=feature_diff,
        totals=totals,
    )


FRONT_COLUMNS = ("candidate", "validity", "proximity", "sparsity", "plausibility", "evaluation_score")


def render_front_csv(objectives: Sequence[ObjectiveVector], weights: EvaluationWeights) -> str:
    """Objective table for a final front, one row per candidate."""
    if not objectives:
        raise ValueError("empty candidate set")
    scores = score_candidates(objectives, weights)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(FRONT_COLUMNS)
    for i, (obj, score) in enumerate(zip(objectives, scores)):
        writer.writerow([
            i, repr(obj.validity), repr(obj.proximity), obj.sparsity,
            repr(obj.plausibility), repr(score),
        ])
    return buf.getvalue()


def export_objective_distribution(
    objectives: Sequence[ObjectiveVector],
    weights: EvaluationWeights,
    path: Path | str,
) -> None:
    Path(path).write_text(render_front_csv(objectives, weights))


def render_diff_csv(report: ImpactReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["segment", "poi_count", "lane_count", "speed_limit"])
    for row in report.feature_diff:
        writer.writerow([row["segment"], repr(row["poi_count"]), repr(row["lane_count"]), repr(row["speed_limit"])])
    writer.writerow(["TOTAL", repr(report.totals["poi_count"]), repr(report.totals["lane_count"]), repr(report.totals["speed_limit"])])
    return buf.getvalue()
