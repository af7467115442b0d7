"""Run-directory layout, canonical JSON, and atomic file writes.

A run directory is a self-contained, diffable unit of work:

    run/
      corpus/           graph.json, speeds.csv, static.csv, context.csv
      model.json        forecaster checkpoint
      metrics.json      held-out metrics from training
      search.json       scenario used by the latest explain run
      history.ndjson    one JSON record per search generation
      pareto.json       final front: genes + objectives per candidate
      front.csv         objective table for the final front
      impact.json       network impact of one chosen candidate
      diff.csv          per-segment feature diffs for that candidate
      meta.json         seeds, versions, timestamps
      jobs/<id>/        the same search artifacts, one directory per service job

Scenario JSON is serialized canonically (sorted keys, no insignificant
whitespace, floats always carrying a decimal point) so the CLI, the HTTP
service, and the browser client can be compared byte-for-byte.
"""

from __future__ import annotations

import json
import os
import tempfile
from datetime import datetime, timezone
from pathlib import Path

SCHEMA_VERSION = 1

CORPUS_DIR = "corpus"
MODEL_FILE = "model.json"
METRICS_FILE = "metrics.json"
SEARCH_FILE = "search.json"
HISTORY_FILE = "history.ndjson"
PARETO_FILE = "pareto.json"
FRONT_FILE = "front.csv"
IMPACT_FILE = "impact.json"
DIFF_FILE = "diff.csv"
META_FILE = "meta.json"
JOBS_DIR = "jobs"


def canonical_json(payload) -> str:
    """Deterministic JSON: sorted keys, compact separators, no NaN."""
    return json.dumps(payload, sort_keys=True, separators=(",", ":"), allow_nan=False)


def atomic_write_text(path: Path | str, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_json(path: Path | str, payload, indent: int | None = 2) -> None:
    text = json.dumps(payload, indent=indent, sort_keys=True, allow_nan=False) + "\n"
    atomic_write_text(path, text)


def utc_now_iso() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


class RunDirectory:
    """Paths and metadata bookkeeping for one run directory."""

    def __init__(self, root: Path | str):
        self.root = Path(root)

    def path(self, name: str) -> Path:
        return self.root / name

    @property
    def corpus_dir(self) -> Path:
        return self.root / CORPUS_DIR

    def job_dir(self, job_id: str) -> Path:
        return self.root / JOBS_DIR / job_id

    def require(self, name: str, hint: str) -> Path:
        target = self.root / name
        if not target.exists():
            raise FileNotFoundError(f"{hint} not found: {target}")
        return target

    def read_meta(self) -> dict:
        target = self.root / META_FILE
        if not target.exists():
            return {"schema_version": SCHEMA_VERSION, "seeds": {}, "steps": {}}
        return json.loads(target.read_text())

    def update_meta(self, step: str, **fields) -> None:
        from . import __version__

        meta = self.read_meta()
        meta["schema_version"] = SCHEMA_VERSION
        meta["package_version"] = __version__
        meta.setdefault("steps", {})[step] = {"completed": utc_now_iso(), **fields.pop("info", {})}
        seeds = fields.pop("seeds", None)
        if seeds:
            meta.setdefault("seeds", {}).update(seeds)
        meta.update(fields)
        atomic_write_json(self.root / META_FILE, meta)
