"""Artifact-producing run steps shared by the CLI and the HTTP service.

Each step reads and writes files inside a run directory so that a finished
run is self-contained: the service returns exactly the bytes the CLI would
have written, and vice versa.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from datetime import date, datetime
from pathlib import Path
from typing import Callable

import numpy as np

from . import report
from .graph import make_windows
from .impact import (
    ImpactReport,
    network_impact,
    render_diff_csv,
    render_front_csv,
)
from .model import TgcnModel, load_model
from .objectives import (
    EditableVector,
    EvaluationWeights,
    ObjectiveVector,
    rank_candidates,
)
from .scenario import CompiledScenario, ScenarioModel, compile_scenario
from .search import EvolveResult, build_problem, evolve
from .store import (
    DIFF_FILE,
    FRONT_FILE,
    HISTORY_FILE,
    IMPACT_FILE,
    METRICS_FILE,
    MODEL_FILE,
    PARETO_FILE,
    SCHEMA_VERSION,
    SEARCH_FILE,
    RunDirectory,
    atomic_write_json,
    atomic_write_text,
)
from .synth import Corpus, load_corpus


def load_run(run: RunDirectory) -> tuple[Corpus, TgcnModel, dict]:
    """Corpus and trained model from a run directory."""
    if not run.corpus_dir.exists():
        raise FileNotFoundError(f"corpus not found: {run.corpus_dir}")
    corpus = load_corpus(run.corpus_dir)
    model_path = run.path(MODEL_FILE)
    if not model_path.exists():
        raise FileNotFoundError(f"model not found: {model_path}")
    model, config = load_model(model_path)
    return corpus, model, config


def training_windows(corpus: Corpus, config: dict):
    """Rebuild the train/test window split recorded in a checkpoint config."""
    windows = make_windows(
        corpus.speeds, corpus.static, corpus.context,
        window_length=config["window_length"],
        horizon_length=config["horizon_length"],
        stride=config["stride"],
        speed_max=corpus.speed_max,
    )
    split = int(len(windows) * (1.0 - config["test_fraction"]))
    if not 0 < split <= len(windows):
        raise ValueError("test_fraction leaves no training windows")
    return windows[:split], windows[split:]


@dataclass
class ExplainOutcome:
    compiled: CompiledScenario
    result: EvolveResult
    pareto_doc: dict
    summary: dict


def _objective_dict(values) -> dict:
    return {
        "validity": float(values[0]),
        "proximity": float(values[1]),
        "sparsity": int(values[2]),
        "plausibility": float(values[3]),
    }


def objectives_from_doc(pareto_doc: dict) -> list[ObjectiveVector]:
    return [
        ObjectiveVector(
            c["objectives"]["validity"],
            c["objectives"]["proximity"],
            c["objectives"]["sparsity"],
            c["objectives"]["plausibility"],
        )
        for c in pareto_doc["candidates"]
    ]


def run_explain(
    target_dir: Path,
    scenario: ScenarioModel,
    corpus: Corpus,
    model: TgcnModel,
    window_length: int,
    on_generation: Callable[[int], None] | None = None,
    should_stop: Callable[[], bool] | None = None,
    render_figures: bool = True,
) -> ExplainOutcome:
    """Run one counterfactual search and persist all its artifacts."""
    compiled = compile_scenario(scenario, corpus, model, window_length)
    target_dir.mkdir(parents=True, exist_ok=True)
    atomic_write_text(target_dir / SEARCH_FILE, scenario.canonical())

    problem = build_problem(
        model, compiled.base_window, compiled.original, compiled.config,
        compiled.constraints, compiled.observed, corpus.graph.node_ids,
    )
    original_prediction = float(problem.predict_target_mean(compiled.original.values)[0])

    result = evolve(
        model, compiled.base_window, compiled.original, compiled.config,
        compiled.constraints, compiled.observed, corpus.graph.node_ids,
        on_generation=on_generation, should_stop=should_stop,
    )

    lines = []
    for record in result.history:
        lines.append(json.dumps({
            "generation": record.generation,
            "candidates": [
                {"genes": list(map(float, g)), "objectives": list(map(float, o))}
                for g, o in zip(record.genes, record.objectives)
            ],
        }, sort_keys=True))
    atomic_write_text(target_dir / HISTORY_FILE, "\n".join(lines) + "\n")

    front_genes = result.pareto.genes_matrix()
    predicted_means = problem.predict_target_mean(front_genes)
    pareto_doc = {
        "schema_version": SCHEMA_VERSION,
        "target_node": scenario.target_node,
        "target_speed": scenario.target_speed,
        "target_window": list(scenario.target_window),
        "input_start": scenario.input_start,
        "original_prediction": original_prediction,
        "original_genes": [float(v) for v in compiled.original.values],
        "layout": [
            {"segment": seg, "feature": feature}
            for seg, feature in compiled.config.space.layout.entries
        ],
        "tied_groups": [list(g) for g in compiled.config.space.layout.tied_groups],
        "candidates": [
            {
                "genes": [float(v) for v in candidate.genes],
                "objectives": _objective_dict(candidate.objectives),
                "predicted_mean": float(mean),
            }
            for candidate, mean in zip(result.pareto.candidates, predicted_means)
        ],
    }
    atomic_write_json(target_dir / PARETO_FILE, pareto_doc)

    objectives = objectives_from_doc(pareto_doc)
    atomic_write_text(target_dir / FRONT_FILE, render_front_csv(objectives, EvaluationWeights()))
    if render_figures:
        report.save_front_scatter(objectives, target_dir / "front_scatter.png")

    summary = {
        "front_size": len(result.pareto),
        "original_prediction": original_prediction,
        "target_speed": scenario.target_speed,
        "best_validity": min(o.validity for o in objectives),
        "generations": scenario.generations,
    }
    return ExplainOutcome(compiled, result, pareto_doc, summary)


def build_rank_document(pareto_doc: dict, weights: EvaluationWeights) -> dict:
    """Deterministic ranking of a saved front; shared by CLI and service."""
    objectives = objectives_from_doc(pareto_doc)
    ranking = rank_candidates(objectives, weights)
    entries = [
        {
            "candidate": r.index,
            "score": r.score,
            "objectives": _objective_dict(r.objectives.as_tuple()),
        }
        for r in ranking
    ]
    best = ranking[0]
    selected = dict(entries[0])
    selected["genes"] = pareto_doc["candidates"][best.index]["genes"]
    selected["predicted_mean"] = pareto_doc["candidates"][best.index]["predicted_mean"]
    return {
        "schema_version": SCHEMA_VERSION,
        "weights": list(weights.as_tuple()),
        "ranking": entries,
        "selected": selected,
    }


def rank_document_bytes(doc: dict) -> bytes:
    return (json.dumps(doc, indent=2, sort_keys=True) + "\n").encode("utf-8")


def candidate_vector(pareto_doc: dict, candidate_index: int) -> EditableVector:
    from .objectives import GeneLayout

    if not 0 <= candidate_index < len(pareto_doc["candidates"]):
        raise IndexError(
            f"candidate {candidate_index} out of range (front has {len(pareto_doc['candidates'])})"
        )
    layout = GeneLayout(
        tuple((e["segment"], e["feature"]) for e in pareto_doc["layout"]),
        tuple(tuple(g) for g in pareto_doc["tied_groups"]),
    )
    genes = np.array(pareto_doc["candidates"][candidate_index]["genes"], dtype=float)
    return EditableVector(genes, layout)


def run_impact(
    target_dir: Path,
    corpus: Corpus,
    model: TgcnModel,
    pareto_doc: dict,
    candidate_index: int,
    day: date,
    window_length: int,
    render_figures: bool = True,
) -> ImpactReport:
    """Evaluate one front candidate's network impact and persist artifacts."""
    cfe = candidate_vector(pareto_doc, candidate_index)
    impact = network_impact(
        model, corpus, cfe, day, pareto_doc["target_node"], window_length
    )
    doc = impact.to_dict()
    doc["candidate"] = candidate_index
    atomic_write_json(target_dir / IMPACT_FILE, doc)
    atomic_write_text(target_dir / DIFF_FILE, render_diff_csv(impact))
    if render_figures:
        report.save_impact_chart(impact, target_dir / "impact_chart.png")
        report.save_diff_chart(impact, target_dir / "diff_chart.png")
        report.save_day_series(impact, target_dir / "day_series.png")
    return impact


def default_day(scenario_input_start: str) -> date:
    return datetime.fromisoformat(scenario_input_start).date()
