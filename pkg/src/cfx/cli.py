"""Command-line interface.

Subcommands: synth, train, predict, explain, impact, rank, serve. Exit
codes: 0 on success, 1 on usage errors, 2 on runtime failures. Log level
comes from the CFX_LOG environment variable.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from datetime import date, datetime, time, timedelta
from pathlib import Path

import numpy as np

from . import report
from .errors import ConfigError, TrainingDiverged
from .graph import make_windows
from .model import (
    TrainingConfig,
    forward_batch,
    init_model,
    metrics,
    normalize_adjacency,
    save_model,
    stack_windows,
)
from .objectives import DEFAULT_WEIGHTS, EvaluationWeights
from .runs import (
    build_rank_document,
    default_day,
    load_run,
    rank_document_bytes,
    run_explain,
    run_impact,
    training_windows,
)
from .scenario import ScenarioModel, compile_scenario, parse_scenario
from .search import build_problem
from .store import FRONT_FILE, METRICS_FILE, MODEL_FILE, PARETO_FILE, RunDirectory, atomic_write_json, atomic_write_text
from .synth import Corpus, SyntheticCorpusSpec, load_corpus, save_corpus, synth_generate

log = logging.getLogger("cfx")

DEFAULT_WINDOW = 12
DEFAULT_HORIZON = 12
DEFAULT_STRIDE = 3
DEFAULT_TEST_FRACTION = 0.2


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on usage errors; the CLI contract wants 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _parse_weights(text: str) -> EvaluationWeights:
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != 4:
        raise ConfigError("weights must be four comma-separated numbers")
    values = [float(p) for p in parts]
    return EvaluationWeights(*values)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cfx", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic corpus into a run directory")
    p.add_argument("--nodes", type=int, default=30)
    p.add_argument("--days", type=int, default=14)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--noise-std", type=float, default=2.0)
    p.add_argument("--cross-links", type=int, default=None)
    p.add_argument("--out", required=True, help="run directory to create")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the forecaster on the run's corpus")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--epochs", type=int, default=80)
    p.add_argument("--learning-rate", type=float, default=0.4)
    p.add_argument("--l1-lambda", type=float, default=1e-6)
    p.add_argument("--hidden-dim", type=int, default=32)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--window", type=int, default=DEFAULT_WINDOW)
    p.add_argument("--horizon", type=int, default=DEFAULT_HORIZON)
    p.add_argument("--stride", type=int, default=DEFAULT_STRIDE)
    p.add_argument("--test-fraction", type=float, default=DEFAULT_TEST_FRACTION)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="evaluate the trained model on held-out windows")
    p.add_argument("--run-dir", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("explain", help="search counterfactuals for a target segment")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--scenario", help="scenario JSON file (see docs/api.md)")
    p.add_argument("--target-node")
    p.add_argument("--target-speed", type=float)
    p.add_argument("--target-delta", type=float,
                   help="target = original prediction + delta (alternative to --target-speed)")
    p.add_argument("--input-start", help="ISO timestamp of the first input step")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--population", type=int, default=64)
    p.add_argument("--generations", type=int, default=100)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("rank", help="rank a saved front under evaluation weights")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--weights", default=",".join(str(w) for w in DEFAULT_WEIGHTS))
    p.add_argument("--job", help="rank a service job's front instead of the run root")
    p.set_defaults(func=cmd_rank)

    p = sub.add_parser("impact", help="network impact of one front candidate")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--candidate", type=int, default=None,
                   help="front index; default: optimum under --weights")
    p.add_argument("--weights", default=",".join(str(w) for w in DEFAULT_WEIGHTS))
    p.add_argument("--day", help="ISO date; default: the day of the search window")
    p.add_argument("--job", help="use a service job's front instead of the run root")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_impact)

    p = sub.add_parser("serve", help="serve the HTTP API over a run directory")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--max-jobs", type=int, default=1)
    p.add_argument("--ui-dir", default=None, help="static UI assets to mount at /ui")
    p.set_defaults(func=cmd_serve)

    return parser


def cmd_synth(args) -> int:
    spec = SyntheticCorpusSpec(
        seed=args.seed, node_count=args.nodes, days=args.days,
        noise_std=args.noise_std, cross_links=args.cross_links,
    )
    corpus = synth_generate(spec)
    run = RunDirectory(args.out)
    save_corpus(corpus, run.corpus_dir)
    run.update_meta("synth", seeds={"corpus": args.seed},
                    info={"nodes": args.nodes, "days": args.days, "noise_std": args.noise_std})
    print(json.dumps({"nodes": args.nodes, "days": args.days, "corpus": str(run.corpus_dir)}))
    return 0


def cmd_train(args) -> int:
    run = RunDirectory(args.run_dir)
    corpus = load_corpus(run.require("corpus", "corpus"))
    windows = make_windows(
        corpus.speeds, corpus.static, corpus.context,
        window_length=args.window, horizon_length=args.horizon,
        stride=args.stride, speed_max=corpus.speed_max,
    )
    split = int(len(windows) * (1.0 - args.test_fraction))
    if split <= 0:
        raise ConfigError("test_fraction leaves no training windows")
    train_windows, test_windows = windows[:split], windows[split:]

    config = TrainingConfig(
        epochs=args.epochs, learning_rate=args.learning_rate, l1_lambda=args.l1_lambda,
        hidden_dim=args.hidden_dim, batch_size=args.batch_size, seed=args.seed,
    )
    adjacency = normalize_adjacency(corpus.graph)
    model = init_model(
        adjacency, feature_dim=windows[0].inputs.shape[-1], hidden_dim=config.hidden_dim,
        horizon_length=args.horizon, seed=config.seed, speed_max=corpus.speed_max,
    )
    from .model import train as train_model

    log.info("training on %d windows (%d held out)", len(train_windows), len(test_windows))
    model, trace = train_model(model, train_windows, config, eval_windows=test_windows)

    extra = {
        "window_length": args.window, "horizon_length": args.horizon,
        "stride": args.stride, "test_fraction": args.test_fraction,
        "epochs": args.epochs, "learning_rate": args.learning_rate,
        "l1_lambda": args.l1_lambda, "hidden_dim": args.hidden_dim,
        "batch_size": args.batch_size, "seed": args.seed,
    }
    save_model(model, run.path(MODEL_FILE), extra_config=extra)

    report_windows = test_windows if test_windows else train_windows
    inputs, targets = stack_windows(report_windows)
    pred = forward_batch(model, inputs) * model.speed_max
    scores = metrics(targets, pred)
    atomic_write_json(run.path(METRICS_FILE), scores.to_dict())

    trace_lines = ["epoch,train_loss,test_loss"]
    for i, value in enumerate(trace["train"]):
        test_value = trace["test"][i] if trace["test"] else ""
        trace_lines.append(f"{i},{value!r},{test_value!r}" if test_value != "" else f"{i},{value!r},")
    atomic_write_text(run.path("loss_trace.csv"), "\n".join(trace_lines) + "\n")
    if not args.no_figures:
        report.save_loss_curve(trace, run.path("loss_curve.png"))
    run.update_meta("train", seeds={"train": args.seed}, info=extra)
    print(json.dumps(scores.to_dict()))
    return 0


def cmd_predict(args) -> int:
    run = RunDirectory(args.run_dir)
    corpus, model, config = load_run(run)
    _, test_windows = training_windows(corpus, config)
    if not test_windows:
        raise ConfigError("no held-out windows; retrain with a positive test fraction")
    inputs, targets = stack_windows(test_windows)
    pred = forward_batch(model, inputs) * model.speed_max
    print(json.dumps(metrics(targets, pred).to_dict()))
    return 0


def _default_input_start(corpus: Corpus) -> str:
    last_day = (corpus.speeds.timestamp_at(corpus.speeds.time_steps - 1)).date()
    return datetime.combine(last_day, time(8, 0)).isoformat()


def _scenario_from_args(args, corpus: Corpus, model, window_length: int) -> ScenarioModel:
    if args.scenario:
        return parse_scenario(Path(args.scenario).read_text())
    if not args.target_node:
        raise ConfigError("either --scenario or --target-node is required")
    if (args.target_speed is None) == (args.target_delta is None):
        raise ConfigError("provide exactly one of --target-speed / --target-delta")
    input_start = args.input_start or _default_input_start(corpus)
    road = corpus.road_of_node(args.target_node)
    editable = corpus.nodes_of_road(road)
    horizon = model.horizon_length
    draft = ScenarioModel(
        target_node=args.target_node,
        target_speed=0.0 if args.target_speed is None else float(args.target_speed),
        input_start=input_start,
        editable_segments=editable,
        target_window=(0, horizon),
        population_size=args.population,
        generations=args.generations,
        seed=args.seed,
    )
    if args.target_delta is not None:
        compiled = compile_scenario(draft, corpus, model, window_length)
        problem = build_problem(
            model, compiled.base_window, compiled.original, compiled.config,
            compiled.constraints, compiled.observed, corpus.graph.node_ids,
        )
        original = float(problem.predict_target_mean(compiled.original.values)[0])
        draft = draft.model_copy(update={"target_speed": original + float(args.target_delta)})
    return draft


def cmd_explain(args) -> int:
    run = RunDirectory(args.run_dir)
    corpus, model, config = load_run(run)
    window_length = config["window_length"]
    scenario = _scenario_from_args(args, corpus, model, window_length)
    outcome = run_explain(
        run.root, scenario, corpus, model, window_length,
        render_figures=not args.no_figures,
    )
    run.update_meta("explain", seeds={"search": scenario.seed},
                    info={"target_node": scenario.target_node, "front_size": outcome.summary["front_size"]})
    print(json.dumps(outcome.summary, sort_keys=True))
    return 0


def _pareto_doc(run: RunDirectory, job: str | None) -> dict:
    base = run.job_dir(job) if job else run.root
    path = base / PARETO_FILE
    if not path.exists():
        raise FileNotFoundError(f"front not found: {path}; run `cfx explain` first")
    return json.loads(path.read_text())


def cmd_rank(args) -> int:
    run = RunDirectory(args.run_dir)
    weights = _parse_weights(args.weights)
    doc = build_rank_document(_pareto_doc(run, args.job), weights)
    sys.stdout.write(rank_document_bytes(doc).decode("utf-8"))
    return 0


def cmd_impact(args) -> int:
    run = RunDirectory(args.run_dir)
    corpus, model, config = load_run(run)
    pareto_doc = _pareto_doc(run, args.job)
    weights = _parse_weights(args.weights)
    if args.candidate is None:
        candidate = build_rank_document(pareto_doc, weights)["selected"]["candidate"]
    else:
        candidate = args.candidate
    day = date.fromisoformat(args.day) if args.day else default_day(pareto_doc["input_start"])
    target_dir = run.job_dir(args.job) if args.job else run.root
    impact = run_impact(
        target_dir, corpus, model, pareto_doc, candidate, day,
        config["window_length"], render_figures=not args.no_figures,
    )
    run.update_meta("impact", info={"candidate": candidate, "day": day.isoformat()})
    print(json.dumps({
        "candidate": candidate,
        "day": day.isoformat(),
        "worst_decrease": impact.worst_decrease,
        "worst_decrease_node": impact.worst_decrease_node,
        "totals": impact.totals,
    }, sort_keys=True))
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    app = create_app(args.run_dir, max_jobs=args.max_jobs, ui_dir=args.ui_dir)
    uvicorn.run(app, host=args.host, port=args.port, log_level="info")
    return 0


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("CFX_LOG", "WARNING").upper())
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args) or 0
    except (ConfigError, FileNotFoundError, TrainingDiverged, ValueError, KeyError, IndexError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
