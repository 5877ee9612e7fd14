"""Benchmark harness tests: aggregation math, determinism, CSV/SVG output."""

from __future__ import annotations

import numpy as np
import pytest

from fep_lidar.bench import (
    BenchResult,
    ExperimentConfig,
    MetricSeries,
    TrialRecord,
    _summarize,
    emit_plot,
    mean_iterations_to_success,
    run_navigation,
    run_static_localization,
    run_traversal,
    sample_start_goal_pair,
    success_rate,
    write_csv,
    write_trace_csv,
)
from fep_lidar.fep import Belief, FepParams, localize
from fep_lidar.genmodel import Architecture, init_model
from fep_lidar.pf import PfConfig
from fep_lidar.world import (
    Pose2,
    SamplingExhaustedError,
    SensorConfig,
    default_map,
    segment_is_clear,
)


def tiny_model():
    arch = Architecture(
        (
            {"kind": "fc", "in": 2, "out": 6, "act": "relu"},
            {"kind": "fc", "in": 6, "out": 12, "act": "relu"},
            {"kind": "reshape", "length": 3, "channels": 4},
            {"kind": "tconv", "in_ch": 4, "out_ch": 3, "kernel": 4, "stride": 2, "act": "relu"},
            {"kind": "conv", "in_ch": 3, "out_ch": 1, "kernel": 3, "pad": 1, "act": "identity"},
            {"kind": "crop", "length": 6},
        )
    )
    return init_model(arch, np.random.default_rng(3))


WMAP = default_map()
SENSOR = SensorConfig(beam_count=6)
MODEL = tiny_model()
PF_SMALL = PfConfig(n_particles=40)
FEP_DEFAULT = FepParams()


def small_cfg(**kw) -> ExperimentConfig:
    base = dict(kind="static", trials=4, iterations=5, seed=11)
    base.update(kw)
    return ExperimentConfig(**base)


class TestConfigValidation:
    @pytest.mark.parametrize(
        "kw",
        [
            {"kind": "walk"},
            {"method": "ekf"},
            {"trials": 0},
            {"iterations": 0},
            {"success_radius": 0.0},
            {"teleport_step": -0.1},
            {"jobs": 0},
        ],
    )
    def test_rejects_bad_fields(self, kw):
        with pytest.raises(ValueError):
            small_cfg(**kw)

    def test_method_selector(self):
        both = small_cfg()
        assert both.wants("fep") and both.wants("pf")
        solo = small_cfg(method="fep")
        assert solo.wants("fep") and not solo.wants("pf")


class TestSummarize:
    def test_mean_and_unbiased_std(self):
        errs = np.array([[1.0, 2.0], [3.0, 4.0]])
        s = _summarize("fep", errs, np.array([1, 2]), [])
        np.testing.assert_allclose(s.mean_err, [2.0, 3.0])
        np.testing.assert_allclose(s.std_err, [np.sqrt(2.0), np.sqrt(2.0)])
        assert s.n_trials == 2

    def test_single_trial_std_is_zero(self):
        s = _summarize("fep", np.array([[1.0, 2.0]]), np.array([1, 2]), [])
        np.testing.assert_array_equal(s.std_err, [0.0, 0.0])


class TestStaticLocalization:
    def run(self, **kw):
        return run_static_localization(
            WMAP, MODEL, SENSOR, small_cfg(**kw), FEP_DEFAULT, PF_SMALL
        )

    def test_structure(self):
        res = self.run()
        assert set(res.series) == {"fep", "pf"}
        for method, s in res.series.items():
            assert s.mean_err.shape == (5,)
            assert s.std_err.shape == (5,)
            assert np.all(s.std_err >= 0.0)
            np.testing.assert_array_equal(s.iters, [1, 2, 3, 4, 5])
            assert s.n_trials == 4
            assert len(res.traces[method]) == 4
            assert all(len(rows) == 5 for rows in res.traces[method])

    def test_trial_records_track_final_error(self):
        res = self.run()
        for method, s in res.series.items():
            assert [r.trial for r in s.trials] == [0, 1, 2, 3]
            for rec, rows in zip(s.trials, res.traces[method]):
                assert rec.final_err == rows[-1].err
                assert not rec.diverged

    def test_method_selection_drops_other_series(self):
        res = self.run(method="pf")
        assert set(res.series) == {"pf"}
        assert set(res.traces) == {"pf"}

    def test_same_seed_reproduces_bitwise(self):
        a, b = self.run(), self.run()
        for method in a.series:
            np.testing.assert_array_equal(
                a.series[method].mean_err, b.series[method].mean_err
            )
            assert a.traces[method] == b.traces[method]

    def test_different_seed_differs(self):
        a = self.run()
        b = self.run(seed=12)
        assert not np.array_equal(a.series["fep"].mean_err, b.series["fep"].mean_err)

    def test_parallel_matches_sequential(self, tmp_path):
        seq = self.run(jobs=1)
        par = self.run(jobs=2)
        p1, p2 = tmp_path / "seq.csv", tmp_path / "par.csv"
        write_csv(seq.series, p1)
        write_csv(par.series, p2)
        assert p1.read_bytes() == p2.read_bytes()
        for method in seq.traces:
            assert seq.traces[method] == par.traces[method]


class TestTraversal:
    def test_path_is_straight_and_centered(self):
        cfg = small_cfg(kind="traversal", trials=2, iterations=41, teleport_step=0.4)
        res = run_traversal(WMAP, MODEL, SENSOR, cfg, FEP_DEFAULT, PF_SMALL)
        rows = res.traces["fep"][0]
        xs = [r.true_x for r in rows]
        ys = [r.true_y for r in rows]
        assert ys == [4.0] * 41
        np.testing.assert_allclose(xs, 4.0 + 0.4 * np.arange(41), atol=1e-12)
        assert xs[-1] - xs[0] == pytest.approx(16.0)

    def test_endpoint_outside_map_rejected(self):
        cfg = small_cfg(kind="traversal", trials=1, iterations=200, teleport_step=0.4)
        with pytest.raises(ValueError, match="endpoint"):
            run_traversal(WMAP, MODEL, SENSOR, cfg, FEP_DEFAULT, PF_SMALL)

    def test_zero_step_equals_fixed_pose_localization(self):
        # A zero teleport increment pins the robot at the map center, so the
        # harness loop must reproduce the plain localization routine exactly.
        cfg = small_cfg(kind="traversal", trials=1, iterations=5, teleport_step=0.0,
                        method="fep")
        res = run_traversal(WMAP, MODEL, SENSOR, cfg, FEP_DEFAULT, PF_SMALL)
        center = Pose2(12.0, 4.0)
        belief = Belief(np.zeros(2), FEP_DEFAULT.alpha, FEP_DEFAULT.sigma_o)
        expected = localize(
            WMAP, MODEL, SENSOR, [center] * 5, belief,
            np.random.default_rng((cfg.seed, 0, 0)),
        )
        assert res.traces["fep"][0] == expected


class TestNavigationBench:
    def run(self, **kw):
        base = dict(kind="navigation", trials=3, iterations=4, seed=5,
                    min_start_goal_distance=12.0, method="fep")
        base.update(kw)
        cfg = ExperimentConfig(**base)
        return run_navigation(WMAP, MODEL, SENSOR, cfg, FEP_DEFAULT, PF_SMALL)

    def test_structure_and_padding(self):
        res = self.run()
        s = res.series["fep"]
        assert set(res.series) == {"fep"}
        np.testing.assert_array_equal(s.iters, [0, 1, 2, 3, 4])
        assert s.mean_dist_goal is not None and s.mean_dist_goal.shape == (5,)
        assert s.n_trials == 3
        for rec, rows in zip(s.trials, res.traces["fep"]):
            assert rec.initial_dist >= 12.0
            assert rec.initial_dist == rows[0].dist_goal
            assert isinstance(rec.success, bool)
            assert 0 <= rec.iterations <= 4
            assert len(rows) == rec.iterations + 1

    def test_reproducible(self):
        a, b = self.run(), self.run()
        assert a.traces["fep"] == b.traces["fep"]
        np.testing.assert_array_equal(
            a.series["fep"].mean_dist_goal, b.series["fep"].mean_dist_goal
        )

    def test_outcome_helpers(self):
        trials = [
            TrialRecord(0, 0.1, False, True, 20, 12.5, 0.5),
            TrialRecord(1, 0.2, False, True, 30, 13.0, 0.6),
            TrialRecord(2, 0.3, False, False, 500, 14.0, 5.0),
        ]
        s = MetricSeries("fep", np.arange(3), np.zeros(3), np.zeros(3), 3,
                         trials=trials)
        assert success_rate(s) == pytest.approx(2 / 3)
        assert mean_iterations_to_success(s) == pytest.approx(25.0)
        assert mean_iterations_to_success(s, (12.8, 13.2)) == pytest.approx(30.0)
        assert np.isnan(mean_iterations_to_success(s, (100.0, 101.0)))

    def test_outcome_helpers_need_outcomes(self):
        s = MetricSeries("fep", np.arange(2), np.zeros(2), np.zeros(2), 1,
                         trials=[TrialRecord(0, 0.5, False)])
        with pytest.raises(ValueError, match="outcome"):
            success_rate(s)


class TestStartGoalSampling:
    def test_pairs_are_far_and_visible(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            start, goal = sample_start_goal_pair(WMAP, 12.0, rng)
            assert np.hypot(start.x - goal.x, start.y - goal.y) >= 12.0
            assert segment_is_clear(WMAP, start.to_array(), goal.to_array())

    def test_deterministic(self):
        a = sample_start_goal_pair(WMAP, 12.0, np.random.default_rng(4))
        b = sample_start_goal_pair(WMAP, 12.0, np.random.default_rng(4))
        assert a == b

    def test_impossible_distance_exhausts(self):
        with pytest.raises(SamplingExhaustedError):
            sample_start_goal_pair(
                WMAP, 1000.0, np.random.default_rng(0), max_tries=50
            )


class TestCsvOutput:
    def make_series(self, with_dist=False):
        dist = np.array([3.0, 2.0]) if with_dist else None
        s = MetricSeries("fep", np.array([1, 2]), np.array([0.5, 0.25]),
                         np.array([0.1, 0.05]), 7, mean_dist_goal=dist)
        return {"fep": s}

    def test_summary_layout(self, tmp_path):
        path = tmp_path / "summary.csv"
        series = self.make_series()
        series["pf"] = MetricSeries("pf", np.array([1, 2]), np.array([1.0, 0.9]),
                                    np.array([0.2, 0.15]), 7)
        write_csv(series, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "iter,method,mean_err,std_err,n_trials"
        assert lines[1] == "1,fep,0.5,0.1,7"
        assert lines[2] == "1,pf,1,0.2,7"
        assert lines[3] == "2,fep,0.25,0.05,7"
        assert len(lines) == 5

    def test_distance_column_added_for_navigation(self, tmp_path):
        path = tmp_path / "nav.csv"
        write_csv(self.make_series(with_dist=True), path)
        lines = path.read_text().splitlines()
        assert lines[0] == "iter,method,mean_err,std_err,n_trials,mean_dist_goal"
        assert lines[1] == "1,fep,0.5,0.1,7,3"

    def test_float_format_is_10_significant_digits(self, tmp_path):
        path = tmp_path / "fmt.csv"
        s = MetricSeries("fep", np.array([1]), np.array([0.123456789012]),
                         np.array([1e-17]), 1)
        write_csv({"fep": s}, path)
        assert path.read_text().splitlines()[1] == "1,fep,0.123456789,1e-17,1"

    def test_empty_selection_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            write_csv({}, tmp_path / "x.csv")

    def test_trace_layout(self, tmp_path):
        cfg = small_cfg(trials=2, iterations=3, method="fep")
        res = run_static_localization(WMAP, MODEL, SENSOR, cfg, FEP_DEFAULT, PF_SMALL)
        path = tmp_path / "trace.csv"
        write_trace_csv(res.traces["fep"], path)
        lines = path.read_text().splitlines()
        assert lines[0] == "trial,iter,true_x,true_y,belief_x,belief_y,ax,ay,err,dist_goal,F"
        assert len(lines) == 1 + 2 * 3
        assert lines[1].startswith("0,1,")
        assert lines[4].startswith("1,1,")

    def test_trace_written_twice_is_identical(self, tmp_path):
        cfg = small_cfg(trials=2, iterations=3, method="fep")
        res = run_static_localization(WMAP, MODEL, SENSOR, cfg, FEP_DEFAULT, PF_SMALL)
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        write_trace_csv(res.traces["fep"], a)
        write_trace_csv(res.traces["fep"], b)
        assert a.read_bytes() == b.read_bytes()


class TestPlot:
    def series(self):
        return {
            "fep": MetricSeries("fep", np.arange(1, 6), np.linspace(2, 0.5, 5),
                                np.full(5, 0.2), 9),
            "pf": MetricSeries("pf", np.arange(1, 6), np.linspace(2, 1.0, 5),
                               np.full(5, 0.3), 9),
        }

    def test_svg_written(self, tmp_path):
        path = tmp_path / "plot.svg"
        emit_plot(self.series(), path, title="static localization")
        text = path.read_text()
        assert text.lstrip().startswith("<?xml")
        assert "<svg" in text

    def test_byte_deterministic(self, tmp_path):
        a, b = tmp_path / "a.svg", tmp_path / "b.svg"
        emit_plot(self.series(), a)
        emit_plot(self.series(), b)
        assert a.read_bytes() == b.read_bytes()

    def test_empty_selection_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            emit_plot({}, tmp_path / "p.svg")
