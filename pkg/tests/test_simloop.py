"""Traffic, scheduling, and drop-loop statistics."""

import math

import numpy as np
import pytest
from scipy import stats

from devmimo import (Case, Ftp3, FullBuffer, ScenarioConfig, ThroughputRecord,
                     calibrate_load, ftp3_arrivals, pf_schedule, run_drop,
                     upt_stats)
from devmimo.simloop import (SchedulerState, measure_ru,
                             percentile_nearest_rank)
from devmimo import engine


TINY = dict(num_rings=0, ues_per_cell=2, sim_duration_s=0.05)


def test_poisson_arrival_count_statistics():
    tr = Ftp3(file_bytes=500_000, lambda_per_s=0.5)
    rng = np.random.default_rng(0)
    counts = [len(ftp3_arrivals(tr, 1, 200.0, rng)) for _ in range(100)]
    # mean 100 per trial; standard error of the trial mean is 1
    assert abs(np.mean(counts) - 100.0) <= 3.0


def test_interarrival_gaps_are_exponential():
    tr = Ftp3(file_bytes=500_000, lambda_per_s=2.0)
    rng = np.random.default_rng(1)
    ev = ftp3_arrivals(tr, 1, 2000.0, rng)
    gaps = np.diff([e.t_arrival_s for e in ev])
    p = stats.kstest(gaps, "expon", args=(0.0, 0.5)).pvalue
    assert p > 0.01


def test_arrivals_deterministic_per_seed():
    tr = Ftp3(file_bytes=500_000, lambda_per_s=1.0)
    a = ftp3_arrivals(tr, 5, 50.0, np.random.default_rng(9))
    b = ftp3_arrivals(tr, 5, 50.0, np.random.default_rng(9))
    assert a == b


def test_arrivals_sorted_and_positive():
    tr = Ftp3(file_bytes=500_000, lambda_per_s=1.0)
    ev = ftp3_arrivals(tr, 4, 30.0, np.random.default_rng(2))
    t = [e.t_arrival_s for e in ev]
    assert t == sorted(t)
    assert all(x > 0 for x in t)
    assert all(e.size_bytes == 500_000 for e in ev)


def test_scheduler_prefers_higher_rate_at_equal_averages():
    rates = np.array([[2.0], [1.0]])
    out = pf_schedule(rates, np.array([1.0, 1.0]), np.array([True, True]))
    assert out[0] == 0


def test_scheduler_uses_rate_over_average_metric():
    rates = np.array([[2.0], [1.0]])
    out = pf_schedule(rates, np.array([4.0, 1.0]), np.array([True, True]))
    assert out[0] == 1     # metrics 0.5 vs 1.0


def test_single_backlogged_user_takes_every_subband():
    rates = np.ones((3, 6))
    out = pf_schedule(rates, np.ones(3), np.array([False, True, False]))
    assert np.all(out == 1)


def test_idle_cell_schedules_nobody():
    rates = np.ones((2, 4))
    out = pf_schedule(rates, np.ones(2), np.array([False, False]))
    assert np.all(out == -1)


def test_scheduler_long_run_fairness_jain_index():
    # symmetric users with i.i.d. fading rates, full buffer
    rng = np.random.default_rng(3)
    n_ues, n_sb = 8, 4
    state = SchedulerState.create(n_ues)
    served = np.zeros(n_ues)
    back = np.ones(n_ues, dtype=bool)
    for _ in range(10_000):
        rates = rng.exponential(1e6, size=(n_ues, n_sb))
        alloc = pf_schedule(rates, state.avg_bps, back)
        got = np.zeros(n_ues)
        for s, u in enumerate(alloc):
            got[u] += rates[u, s]
        served += got
        state.update(got)
    jain = float(served.sum() ** 2 / (n_ues * np.sum(served ** 2)))
    assert jain >= 0.9


def test_nearest_rank_percentile_reference_points():
    v = np.arange(1.0, 101.0)
    assert percentile_nearest_rank(v, 5.0) == 5.0
    assert abs(float(v.mean()) - 50.5) < 1e-12
    assert percentile_nearest_rank(np.array([7.0]), 5.0) == 7.0
    assert percentile_nearest_rank(np.full(10, 2.5), 5.0) == 2.5
    with pytest.raises(ValueError):
        percentile_nearest_rank(np.array([]), 5.0)


def test_throughput_record_value():
    r = ThroughputRecord(0, 1.0, 3.0, 1_000_000)
    assert abs(r.throughput_bps - 4e6) < 1e-6
    assert ThroughputRecord(0, 1.0, 1.0, 8).throughput_bps == math.inf


def test_upt_stats_fields():
    recs = [ThroughputRecord(0, 0.0, 1.0, 125_000),
            ThroughputRecord(1, 0.0, 2.0, 125_000)]
    out = upt_stats(recs)
    assert out["n_files"] == 2
    assert abs(out["mean_bps"] - 750_000.0) < 1e-6
    assert out["p5_bps"] == 500_000.0


def test_full_buffer_utilization_is_one():
    cfg = ScenarioConfig(case=Case.BASELINE, traffic=FullBuffer(), **TINY)
    stats_ = run_drop(cfg, 0)
    assert stats_["baseline"].resource_utilization == 1.0


def test_drop_is_deterministic():
    cfg = ScenarioConfig(case=Case.DIVERSITY,
                         traffic=Ftp3(100_000, 2.0), **TINY)
    a = run_drop(cfg, 4)
    b = run_drop(cfg, 4)
    for arm in a:
        assert a[arm].records == b[arm].records
        assert a[arm].resource_utilization == b[arm].resource_utilization


def test_served_bytes_conservation_bound():
    cfg = ScenarioConfig(case=Case.BASELINE, traffic=FullBuffer(), **TINY)
    stats_ = run_drop(cfg, 1)
    n_slots = int(round(cfg.sim_duration_s / cfg.slot_s))
    n_cells = 3
    max_layers = cfg.ue_dl_config[1]
    bound = (n_cells * n_slots * cfg.slot_s / 8.0 * cfg.n_subbands
             * cfg.subband_hz * 7.4 * max_layers)
    assert float(np.sum(stats_["baseline"].served_bytes)) <= bound + 1e-6


def test_full_buffer_diversity_dominates_per_user():
    cfg = ScenarioConfig(case=Case.DIVERSITY, traffic=FullBuffer(), **TINY)
    stats_ = run_drop(cfg, 2)
    base = stats_["baseline"].served_bytes
    div = stats_["diversity"].served_bytes
    assert np.all(div >= base - 1e-6)


def test_lone_file_throughput_matches_isolated_link_rate():
    # one user per cell: every file is served with the entire band, so
    # its throughput approaches the user's full-band link rate
    cfg = ScenarioConfig(num_rings=0, ues_per_cell=1, sim_duration_s=4.0,
                         case=Case.BASELINE, traffic=Ftp3(500_000, 0.3))
    out = run_drop(cfg, 3)

    geo = engine.build_drop_geometry(cfg, 3)
    rng = np.random.default_rng(np.random.SeedSequence((3, 0xC4)))
    eng = engine.make_dl_engine(geo, rng)
    n_slots = int(round(cfg.sim_duration_s / cfg.slot_s))
    n_refresh = (n_slots + cfg.channel_update_slots - 1) \
        // cfg.channel_update_slots
    rate = np.mean([eng.refresh(rr, False)["direct"].sum(axis=1)
                    for rr in range(n_refresh)], axis=0)

    per_ue = {}
    for r in out["baseline"].records:
        per_ue.setdefault(r.ue, []).append(r.throughput_bps)
    assert per_ue, "expected at least one completed file"
    for u, vals in per_ue.items():
        assert abs(np.mean(vals) - rate[u]) <= 0.1 * rate[u]


def test_load_calibration_closed_loop():
    cfg = ScenarioConfig(num_rings=0, ues_per_cell=2, sim_duration_s=0.2,
                         case=Case.BASELINE, traffic=Ftp3(500_000, 1.0))
    lam, ru = calibrate_load(cfg, 0.4, tol=0.02, seeds=(0,))
    assert 0.38 <= ru <= 0.42
    check = measure_ru(cfg.replace(traffic=Ftp3(500_000, lam)), (0,))
    assert 0.38 <= check <= 0.42


def test_utilization_monotone_in_offered_load():
    cfg = ScenarioConfig(num_rings=0, ues_per_cell=2, sim_duration_s=0.2,
                         case=Case.BASELINE)
    prev = -1.0
    for lam in (0.2, 0.5, 1.0, 2.0, 4.0):
        ru = measure_ru(cfg.replace(traffic=Ftp3(500_000, lam)), (0,))
        assert ru >= prev - 0.02
        prev = ru


def test_calibration_rejects_bad_target():
    cfg = ScenarioConfig(case=Case.BASELINE, traffic=Ftp3(500_000, 1.0),
                         **TINY)
    from devmimo import ConfigurationError
    with pytest.raises(ConfigurationError):
        calibrate_load(cfg, 1.5)
    with pytest.raises(ConfigurationError):
        calibrate_load(ScenarioConfig(case=Case.BASELINE,
                                      traffic=FullBuffer(), **TINY), 0.4)
