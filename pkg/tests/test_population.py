import numpy as np
import pytest

from conftest import simple_rtt_query_doc
from fedsim.errors import ConfigError
from fedsim.population import (
    CLASS_LONG_TAIL,
    CLASS_REGULAR,
    PopulationConfig,
    generate_population,
)
from fedsim.query import parse_query_config


def test_population_deterministic_under_seed():
    one, _ = generate_population(5000, seed=42)
    two, _ = generate_population(5000, seed=42)
    assert np.array_equal(one.values, two.values)
    assert np.array_equal(one.n_records, two.n_records)
    assert np.array_equal(one.first_checkin, two.first_checkin)
    assert np.array_equal(one.is_tail, two.is_tail)


def test_population_seed_changes_data():
    one, _ = generate_population(5000, seed=42)
    two, _ = generate_population(5000, seed=43)
    assert not np.array_equal(one.values, two.values)


def test_record_count_conservation():
    pop, gt = generate_population(20_000, seed=7)
    assert pop.n_records.sum() == len(pop.values) == pop.total_points


def test_single_record_is_the_modal_count():
    pop, _ = generate_population(100_000, seed=7)
    counts = np.bincount(pop.n_records)
    assert counts.argmax() == 1
    # heavy tail: some devices hold more than a hundred values
    assert (pop.n_records > 100).sum() > 0


def test_rtt_mode_near_50ms():
    pop, _ = generate_population(100_000, seed=7)
    hist, edges = np.histogram(pop.values, bins=np.arange(0, 300, 10.0))
    mode_bucket = edges[hist.argmax()]
    assert 40.0 <= mode_bucket <= 60.0


def test_class_split_and_death_rate():
    pop, _ = generate_population(100_000, seed=7)
    assert abs(pop.is_tail.mean() - 0.15) < 0.01
    assert abs(pop.dead.mean() - 0.02) < 0.005
    assert pop.device_class(int(np.flatnonzero(pop.is_tail)[0])) == CLASS_LONG_TAIL
    assert pop.device_class(int(np.flatnonzero(~pop.is_tail)[0])) == CLASS_REGULAR


def test_dead_devices_never_check_in():
    pop, _ = generate_population(10_000, seed=7)
    assert np.all(np.isinf(pop.first_checkin[pop.dead]))
    assert np.all(np.isfinite(pop.first_checkin[~pop.dead]))


def test_records_scale_thins_activity():
    full, _ = generate_population(50_000, seed=7)
    cfg = PopulationConfig(n=50_000, records_scale=1.0 / 34.0)
    thin, _ = generate_population(50_000, seed=7, config=cfg)
    ratio = thin.n_records.sum() / full.n_records.sum()
    assert 1 / 34 * 0.8 < ratio < 1 / 34 * 1.2
    assert (thin.n_records == 0).mean() > 0.5


def test_store_view_matches_population_slice():
    pop, _ = generate_population(1000, seed=7)
    cid = int(np.flatnonzero(pop.n_records > 2)[0])
    view = pop.store_view(cid)
    assert view.record_count("network_requests") == pop.n_records[cid]
    assert np.array_equal(
        view.column_values("network_requests", "rtt_ms"), pop.device_values(cid)
    )


def test_profile_accessor():
    pop, _ = generate_population(100, seed=7)
    profile = pop.profile(3)
    assert profile.client_id == 3
    assert profile.records_per_day == pop.n_records[3]


def test_config_validation():
    with pytest.raises(ConfigError):
        PopulationConfig(n=0).validate()
    with pytest.raises(ConfigError):
        PopulationConfig(n=10, log_series_p=1.5).validate()
    with pytest.raises(ConfigError):
        PopulationConfig.from_dict({"n": 10, "mystery": 1})


# ---------------------------------------------------------------------------
# Ground truth


def test_ground_truth_matches_transform_aggregation():
    from fedsim.client import execute_transform

    pop, gt = generate_population(2000, seed=11)
    query = parse_query_config(simple_rtt_query_doc())
    truth = gt.for_query(query)
    # re-aggregate every device's transform output and compare exactly
    acc: dict[str, float] = {}
    points = 0
    for cid in range(pop.n):
        hist = execute_transform(pop.store_view(cid), query)
        for key, (s, _c) in hist.entries.items():
            acc[key] = acc.get(key, 0.0) + s
        points += int(pop.n_records[cid])
    assert acc == truth.w
    assert truth.total_points == points
    assert np.array_equal(truth.points_per_client, pop.n_records)


def test_ground_truth_one_hot_sample():
    pop, gt = generate_population(500, seed=11)
    doc = simple_rtt_query_doc("onehot")
    doc["query"]["oneHot"] = True
    doc["query"]["onDeviceQuery"]["aggregations"] = [{"op": "sample", "column": "rtt_ms"}]
    doc["privacy"]["maxBucketsPerClient"] = 1
    doc["privacy"]["contributionBound"] = 1.0
    query = parse_query_config(doc)
    truth = gt.for_query(query)
    with_data = pop.n_records > 0
    assert truth.total_points == with_data.sum()
    firsts = pop.values[pop.offsets[:-1][with_data]]
    assert np.array_equal(np.sort(truth.scalar_values), np.sort(firsts))
    assert sum(truth.w.values()) == with_data.sum()


def test_ground_truth_band_split():
    pop, gt = generate_population(500, seed=11)
    query = parse_query_config(simple_rtt_query_doc())
    bands = gt.band_points(query, split_ms=60.0)
    assert np.all(bands["low"] + bands["high"] == pop.n_records)
    assert (pop.values < 60.0).sum() == bands["low"].sum()


def test_ground_truth_exact_quantile_oracle():
    pop, gt = generate_population(500, seed=11)
    query = parse_query_config(simple_rtt_query_doc())
    truth = gt.for_query(query)
    assert truth.exact_quantile(0.5) == pytest.approx(float(np.quantile(pop.values, 0.5)))
