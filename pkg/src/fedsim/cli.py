"""Command-line interface.

Subcommands: ``population`` (generate and summarize a fleet), ``run``
(execute a scenario), ``quantile`` (quantile estimation against a scenario),
``compare-privacy`` (run one scenario version per privacy mode). Exit code 0
on success, 2 on config/validation errors. FEDSIM_SEED overrides the
scenario seed.
"""

from __future__ import annotations

import json
import math
import os
import sys
from pathlib import Path

import click
import numpy as np

from .errors import FedsimError
from .population import PopulationConfig, generate_population
from .quantiles import HierarchicalHistogram, multiround_binary_search, quantile_from_flat, quantile_from_tree
from .query import MetricKind, parse_query_config
from .scenarios import MODE_PRIVACY, SimulationCountDriver, onehot_rtt_document
from .simulation import Scenario, run_scenario

EXIT_VALIDATION = 2


def _seed_override(seed: int | None) -> int | None:
    env = os.environ.get("FEDSIM_SEED")
    if seed is not None:
        return seed
    if env is not None:
        return int(env)
    return None


def _load_scenario(path: str, seed: int | None) -> Scenario:
    scenario = Scenario.from_file(path)
    override = _seed_override(seed)
    if override is not None:
        scenario.seed = override
    return scenario


@click.group()
def main() -> None:
    """Federated-analytics fleet simulator."""


@main.command("population")
@click.option("--n", type=int, required=True, help="Number of simulated devices.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--config", "config_path", type=click.Path(exists=True), default=None,
              help="JSON file of population overrides (mirrors scenario population keys).")
@click.option("--out", "out_dir", type=click.Path(), required=True)
def population_cmd(n: int, seed: int, config_path: str | None, out_dir: str) -> None:
    """Generate a device population and write its summary statistics."""
    try:
        overrides = {}
        if config_path is not None:
            overrides = json.loads(Path(config_path).read_text())
        overrides["n"] = n
        config = PopulationConfig.from_dict(overrides)
        override = _seed_override(None)
        if override is not None:
            seed = override
        pop, _gt = generate_population(n, seed, config)
    except FedsimError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_VALIDATION)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    counts = pop.n_records
    summary = {
        "n": pop.n,
        "seed": seed,
        "config": config.to_dict(),
        "total_points": pop.total_points,
        "long_tail_fraction": round(float(pop.is_tail.mean()), 6),
        "dead_fraction": round(float(pop.dead.mean()), 6),
        "records_per_device": {
            "mean": round(float(counts.mean()), 6),
            "p50": int(np.percentile(counts, 50)),
            "p90": int(np.percentile(counts, 90)),
            "p99": int(np.percentile(counts, 99)),
            "max": int(counts.max()),
            "share_exactly_one": round(float((counts == 1).mean()), 6),
            "share_over_100": round(float((counts > 100).mean()), 6),
        },
        "rtt_ms": {
            "p10": round(float(np.percentile(pop.values, 10)), 3),
            "p50": round(float(np.percentile(pop.values, 50)), 3),
            "p90": round(float(np.percentile(pop.values, 90)), 3),
            "p99": round(float(np.percentile(pop.values, 99)), 3),
        },
    }
    (out / "population_summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n"
    )
    click.echo(json.dumps(summary["records_per_device"]))


@main.command("run")
@click.option("--scenario", "scenario_path", type=click.Path(exists=True), required=True)
@click.option("--query", "query_paths", type=click.Path(exists=True), multiple=True,
              help="Additional federated-query config file(s) to launch at t=0.")
@click.option("--trusted-binaries", "registry_path", type=click.Path(exists=True),
              default=None, help="JSON audit list [{hash, label}] clients should trust.")
@click.option("--seed", type=int, default=None, help="Override the scenario seed.")
@click.option("--out", "out_dir", type=click.Path(), required=True)
def run_cmd(
    scenario_path: str,
    query_paths: tuple[str, ...],
    registry_path: str | None,
    seed: int | None,
    out_dir: str,
) -> None:
    """Run a scenario end to end and emit its result files."""
    try:
        scenario = _load_scenario(scenario_path, seed)
        for path in query_paths:
            document = json.loads(Path(path).read_text())
            parse_query_config(document)  # fail fast with a field path
            scenario.queries.append({"launchHours": 0.0, "document": document})
        trusted = None
        if registry_path is not None:
            entries = json.loads(Path(registry_path).read_text())
            trusted = [(bytes.fromhex(row["hash"]), row["label"]) for row in entries]
        result = run_scenario(scenario, out_dir, trusted_binaries=trusted)
    except FedsimError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_VALIDATION)
    final = {qid: round(cov, 4) for qid, cov in sorted(result.final_coverage.items())}
    click.echo(json.dumps({"final_coverage": final, "releases": len(result.releases)}))


@main.command("quantile")
@click.option("--scenario", "scenario_path", type=click.Path(exists=True), required=True)
@click.option("--method", type=click.Choice(["flat", "tree", "multiround"]), required=True)
@click.option("--q", "q_list", default="0.5,0.9", show_default=True,
              help="Comma-separated quantile targets.")
@click.option("--depth", type=int, default=12, show_default=True,
              help="Hierarchy depth for --method tree.")
@click.option("--tolerance", type=float, default=0.01, show_default=True)
@click.option("--max-rounds", type=int, default=12, show_default=True)
@click.option("--seed", type=int, default=None)
@click.option("--out", "out_dir", type=click.Path(), default=None)
def quantile_cmd(
    scenario_path: str,
    method: str,
    q_list: str,
    depth: int,
    tolerance: float,
    max_rounds: int,
    seed: int | None,
    out_dir: str | None,
) -> None:
    """Estimate quantiles through the federated pipeline."""
    try:
        targets = [float(x) for x in q_list.split(",") if x]
        scenario = _load_scenario(scenario_path, seed)
        if method == "multiround":
            driver = SimulationCountDriver(scenario.population.n, scenario.seed)
            rows = []
            for q in targets:
                res = multiround_binary_search(driver, q, 0.0, 1024.0, tolerance, max_rounds)
                rows.append(
                    {"q": q, "estimate": round(res.value, 3), "rounds": res.rounds_used,
                     "converged": res.converged}
                )
            click.echo(json.dumps({"method": method, "results": rows}))
            return
        result = run_scenario(scenario, out_dir)
        rows = []
        for query in (parse_query_config(e["document"]) for e in scenario.queries):
            spec = query.bucket_spec
            wanted = [
                m for m in query.metric_specs
                if m.kind == MetricKind.QUANTILE and m.quantile_method.value == method
            ]
            if not wanted or spec is None:
                continue
            releases = [r for r in result.releases if r["query_id"] == query.query_id]
            if not releases:
                continue
            entries = {k: v[0] for k, v in releases[-1]["entries"].items()}
            for q in targets:
                if method == "tree":
                    d = min(depth, int(math.log2(spec.buckets)))
                    tree = HierarchicalHistogram.from_entries(
                        {k: (v, v) for k, v in entries.items()}, spec.low, spec.high, d
                    )
                    est = quantile_from_tree(tree, q)
                else:
                    counts = [entries.get(label, 0.0) for label in spec.labels()]
                    est = quantile_from_flat(counts, spec, q)
                rows.append({"query_id": query.query_id, "q": q, "estimate": round(est, 3)})
    except FedsimError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_VALIDATION)
    click.echo(json.dumps({"method": method, "results": rows}))


@main.command("compare-privacy")
@click.option("--scenario", "scenario_path", type=click.Path(exists=True), default=None,
              help="Base scenario; its first query is re-run under each mode. "
                   "Omit to use the built-in one-hot RTT comparison.")
@click.option("--modes", default="cdp,ldp,st,none", show_default=True)
@click.option("--n", type=int, default=100_000, show_default=True,
              help="Fleet size for the built-in comparison scenario.")
@click.option("--seed", type=int, default=None)
@click.option("--workers", type=int, default=1, show_default=True)
@click.option("--out", "out_dir", type=click.Path(), required=True)
def compare_privacy_cmd(
    scenario_path: str | None, modes: str, n: int, seed: int | None, workers: int, out_dir: str
) -> None:
    """Run the same query under several privacy modes and tabulate final TVD."""
    from .scenarios import mode_comparison_scenario

    mode_list = [m.strip() for m in modes.split(",") if m.strip()]
    try:
        jobs = []
        for mode in mode_list:
            if mode not in MODE_PRIVACY:
                raise FedsimError(f"unknown mode {mode!r}")
            if scenario_path is not None:
                scenario = _load_scenario(scenario_path, seed)
                scenario.name = f"{scenario.name}-{mode}"
                qid = scenario.queries[0]["document"]["query"]["queryId"] + f"_{mode}"
                doc = onehot_rtt_document(qid, dict(MODE_PRIVACY[mode]))
                scenario.queries = [{"launchHours": 0.0, "document": doc}]
            else:
                scenario = mode_comparison_scenario(
                    mode, n=n, seed=seed if seed is not None else 2
                )
            jobs.append((mode, scenario, str(Path(out_dir) / mode)))
        rows = run_mode_jobs(jobs, workers)
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        with open(Path(out_dir) / "comparison.csv", "w") as fh:
            fh.write("mode,final_tvd,final_coverage\n")
            for row in rows:
                fh.write(f"{row['mode']},{row['final_tvd']},{row['final_coverage']}\n")
    except FedsimError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_VALIDATION)
    click.echo(json.dumps(rows))


def _run_one_mode(job: tuple) -> dict:
    mode, scenario, out = job
    result = run_scenario(scenario, out)
    final_tvd = result.tvd_rows[-1]["tvd"] if result.tvd_rows else float("nan")
    coverage = next(iter(result.final_coverage.values()), 0.0)
    return {
        "mode": mode,
        "final_tvd": round(final_tvd, 6),
        "final_coverage": round(coverage, 4),
    }


def run_mode_jobs(jobs: list[tuple], workers: int = 1) -> list[dict]:
    """Run per-mode scenarios, optionally in parallel worker processes."""
    if workers <= 1 or len(jobs) <= 1:
        return [_run_one_mode(job) for job in jobs]
    import multiprocessing as mp

    with mp.get_context("spawn").Pool(min(workers, len(jobs))) as pool:
        return pool.map(_run_one_mode, jobs)


if __name__ == "__main__":
    main()
