"""Experiment metrics (coverage, TVD) and result emission."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from .errors import EmptyHistogram


def compute_tvd(v: Mapping[str, float], w: Mapping[str, float]) -> float:
    """Total variation distance between normalized histograms.

    Keys missing on either side count as zero; both totals must be positive.
    """
    v_total = float(sum(v.values()))
    w_total = float(sum(w.values()))
    if v_total <= 0 or w_total <= 0:
        raise EmptyHistogram("TVD needs positive totals on both sides")
    acc = 0.0
    for key in set(v) | set(w):
        acc += abs(v.get(key, 0.0) / v_total - w.get(key, 0.0) / w_total)
    return 0.5 * acc


def compute_coverage(ingested_points: float, ground_truth_points: float) -> float:
    """Fraction of ground-truth data points ingested so far."""
    if ground_truth_points <= 0:
        raise EmptyHistogram("ground truth is empty")
    return ingested_points / ground_truth_points


@dataclass
class ExperimentResult:
    """Everything one simulation run produces, ready for emission."""

    scenario: dict[str, Any]
    coverage_rows: list[dict] = field(default_factory=list)
    tvd_rows: list[dict] = field(default_factory=list)
    quantile_rows: list[dict] = field(default_factory=list)
    releases: list[dict] = field(default_factory=list)
    final_histograms: dict[str, dict[str, tuple[float, int]]] = field(default_factory=dict)
    final_coverage: dict[str, float] = field(default_factory=dict)
    final_reporters: dict[str, int] = field(default_factory=dict)
    anomalies: list[dict] = field(default_factory=list)

    def coverage_series(self, query_id: str) -> list[tuple[float, float]]:
        return [
            (r["t_hours"], r["coverage"])
            for r in self.coverage_rows
            if r["query_id"] == query_id
        ]

    def tvd_series(self, query_id: str) -> list[tuple[float, float]]:
        return [(r["t_hours"], r["tvd"]) for r in self.tvd_rows if r["query_id"] == query_id]


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def emit(result: ExperimentResult, out_dir: str | Path) -> list[Path]:
    """Write the result files; overwrites are byte-identical for equal results.

    Files: coverage.csv, tvd.csv, quantile.csv, releases.jsonl, scenario.json.
    The orchestrator writes its own journal and per-query results alongside.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    path = out / "coverage.csv"
    has_bands = any("coverage_low" in r for r in result.coverage_rows)
    with open(path, "w") as fh:
        header = "t_hours,query_id,coverage"
        if has_bands:
            header += ",coverage_low,coverage_high"
        fh.write(header + "\n")
        for r in result.coverage_rows:
            line = f"{_fmt(r['t_hours'])},{r['query_id']},{_fmt(r['coverage'])}"
            if has_bands:
                line += f",{_fmt(r.get('coverage_low', 0.0))},{_fmt(r.get('coverage_high', 0.0))}"
            fh.write(line + "\n")
    written.append(path)

    path = out / "tvd.csv"
    with open(path, "w") as fh:
        fh.write("t_hours,query_id,mode,tvd\n")
        for r in result.tvd_rows:
            fh.write(f"{_fmt(r['t_hours'])},{r['query_id']},{r['mode']},{_fmt(r['tvd'])}\n")
    written.append(path)

    path = out / "quantile.csv"
    with open(path, "w") as fh:
        fh.write("t_hours,query_id,method,q,estimate,relative_error\n")
        for r in result.quantile_rows:
            fh.write(
                f"{_fmt(r['t_hours'])},{r['query_id']},{r['method']},{r['q']},"
                f"{_fmt(r['estimate'])},{_fmt(r['relative_error'])}\n"
            )
    written.append(path)

    path = out / "releases.jsonl"
    with open(path, "w") as fh:
        for rec in result.releases:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    written.append(path)

    path = out / "scenario.json"
    path.write_text(json.dumps(result.scenario, indent=2, sort_keys=True) + "\n")
    written.append(path)
    return written
