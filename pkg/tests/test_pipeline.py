import pytest

from app.ais.bitmatch import BitString
from app.ais.genes import WindowStats
from app.ais.negsel import audit
from app.netsim.trace import FlowCounters
from app.schemas.schemas import (
    METRICS_COLUMNS, ConfigError, NodeVerdict, Phase, TrafficModel, build_config, metrics_row, parse_override,
)
from app.services.metrics_service import MetricsService, ci95, failed_report, interval_text
from app.services.pipeline_service import (
    DetectionResult, LearningResult, NodeRun, RunSummary, build_scenario, classify_nodes, derive_seed,
    gene_table, gene_usage_analysis, learning_phase, run_seed,
)
from app.services.sweep_service import Cell, SweepService, cell_config, expand_grid, run_cell

LONG = {"allow_off_grid": True, "duration": 14400.0, "window_size": 500.0}


class TestSeeds:

    def test_derive_seed_is_stable(self):
        assert derive_seed(1, "detectors", 10, 2000, 4) == derive_seed(1, "detectors", 10, 2000, 4)
        assert derive_seed(1, "detectors", 10, 2000, 4) != derive_seed(1, "detectors", 10, 2000, 5)
        assert derive_seed(1, "topology") != derive_seed(2, "topology")
        assert 0 <= derive_seed(99, "x") < 2 ** 32

    def test_learning_seed_ignores_misbehavior(self):
        low = build_config({"misbehavior": {"level": 0.1}})
        high = build_config({"misbehavior": {"level": 0.5}})
        assert run_seed(low, Phase.LEARNING, 0) == run_seed(high, Phase.LEARNING, 0)
        assert run_seed(low, Phase.DETECTION, 0) != run_seed(high, Phase.DETECTION, 0)


class TestConfig:

    def test_desk_defaults(self):
        config = build_config()
        assert config.windows == 7
        assert config.window_threshold == 4
        assert config.ais.r == 10

    def test_paper_preset(self):
        config = build_config(preset="paper")
        assert config.windows == 28
        assert config.window_threshold == 14
        assert config.thresholds.packet_threshold == 1000
        assert config.topology.n == 1718

    def test_overrides(self):
        assert parse_override("ais.r=13") == {"ais": {"r": 13}}
        config = build_config(overrides=["ais.r=13", "traffic.model=POISSON"])
        assert config.ais.r == 13
        assert config.traffic.model is TrafficModel.POISSON

    @pytest.mark.parametrize("data,overrides,preset", [
        ({"ais": {"r": 9}}, None, None),
        ({"allow_off_grid": True, "ais": {"r": 51}}, None, None),
        ({"ais": {"gene_order": [0, 1, 2, 3, 3]}}, None, None),
        ({"ais": {"radius": 3}}, None, None),
        (None, ["ais.r"], None),
        (None, None, "lab"),
        ({"allow_off_grid": True, "duration": 100.0}, None, None),
    ])
    def test_rejected(self, data, overrides, preset):
        with pytest.raises(ConfigError):
            build_config(data, preset, overrides)

    def test_off_grid_allowed(self):
        assert build_config({"allow_off_grid": True, "ais": {"r": 9}}).ais.r == 9


def verdict(run, node, flagged, hops, eligible=True):
    return NodeVerdict(
        run=run, node=node, windows_flagged=14 if flagged else 0, window_count=28,
        packets_forwarded_mean=1000, packets_forwarded_normal=1000, packets_forwarded_misbehavior=1000,
        eligible=eligible, flagged=flagged, ground_truth_misbehaving=False, misbehaving_next_hops=hops,
    )


class TestClassification:

    def results(self):
        learning = LearningResult(gene_order=(0, 1, 2, 3, 4), normal_forwarded={1: 1250.0, 2: 1250.0, 3: 0.0})
        detection = DetectionResult(
            runs=[0],
            outcomes={
                (0, 1): NodeRun(0, 1, flags=[True] * 14 + [False] * 14),
                (0, 2): NodeRun(0, 2, flags=[True] * 13 + [False] * 15),
            },
            forwarded={(0, 1): 750, (0, 2): 750, (0, 3): 0},
            next_hops={0: {1: {5: 10}, 2: {6: 3}}},
            misbehaving=frozenset({5}),
        )
        return learning, detection

    def test_window_threshold_boundary(self):
        config = build_config(LONG)
        verdicts = {v.node: v for v in classify_nodes(config, *self.results())}
        assert set(verdicts) == {1, 2}
        assert verdicts[1].eligible and verdicts[1].flagged
        assert verdicts[1].misbehaving_next_hops == [5]
        assert verdicts[2].eligible and not verdicts[2].flagged
        assert verdicts[2].windows_flagged == 13

    def test_packet_threshold_gates_eligibility(self):
        """750 packets under misbehavior pass a threshold of 500 but not 1000"""
        config = build_config({**LONG, "thresholds": {"packet_threshold": 1000}})
        verdicts = {v.node: v for v in classify_nodes(config, *self.results())}
        assert not verdicts[1].eligible
        assert not verdicts[1].flagged
        assert verdicts[1].windows_flagged == 14

    def test_flagged_requires_eligible(self):
        with pytest.raises(ValueError):
            verdict(0, 1, flagged=True, hops=[], eligible=False)


class TestMetrics:

    def test_ci95(self):
        assert ci95([]).n == 0
        assert ci95([3.0]).half_width is None
        assert ci95([1.0, 1.0, 1.0]).half_width == 0.0
        pair = ci95([0.0, 1.0])
        assert pair.mean == pytest.approx(0.5)
        assert pair.half_width == pytest.approx(6.353, abs=1e-3)

    def test_detection_rate(self):
        config = build_config(LONG)
        verdicts = [verdict(run, 1, flagged=run != 4, hops=[10]) for run in range(5)]
        verdicts.append(verdict(2, 7, flagged=True, hops=[]))
        detection = DetectionResult(runs=list(range(5)))
        report = MetricsService(config).compute_metrics("c", LearningResult(gene_order=(0, 1, 2, 3, 4)), detection, verdicts)
        assert (report.dns, report.ns) == (4, 5)
        assert report.detection_rate == pytest.approx(0.8)
        assert report.false_positives_total == 1
        assert report.false_positives.mean == pytest.approx(0.2)

    def test_undefined_rate_without_misbehaving_next_hops(self):
        config = build_config(LONG)
        verdicts = [verdict(0, 1, flagged=False, hops=[])]
        report = MetricsService(config).compute_metrics(
            "c", LearningResult(gene_order=(0, 1, 2, 3, 4)), DetectionResult(runs=[0]), verdicts,
        )
        assert report.ns == 0
        assert report.detection_rate is None

    def test_ineligible_monitor_is_not_counted(self):
        config = build_config(LONG)
        verdicts = [verdict(0, 1, flagged=False, hops=[10], eligible=False)]
        per_run = MetricsService(config).node_detection([0], verdicts)
        assert per_run[0]["ns"] == set()

    def test_failed_report_row(self):
        config = build_config()
        row = metrics_row(failed_report(config, "r10_d2000_l0.3_CBR", "boom"))
        assert list(row) == METRICS_COLUMNS
        assert row["status"] == "failed"
        assert row["detection_rate"] is None
        assert row["error"] == "boom"

    def test_interval_text(self):
        assert interval_text(ci95([])) == "n/a"
        assert interval_text(ci95([1.0, 1.0])) == "1.000 ± 0.000"


class TestGeneUsage:

    def pairs(self):
        single = (BitString.from_str("1" * 50), BitString.from_str("1" * 10 + "0" * 40))
        spanning = (BitString.from_str("1" * 5 + "0" * 20 + "1" * 25), BitString.from_str("0" * 50))
        return [single, spanning]

    def test_single_and_multiple(self):
        usage = gene_usage_analysis(self.pairs(), 10)
        assert usage.per_gene == [2, 1, 1, 0, 0]
        assert (usage.single, usage.multiple) == (1, 1)

    def test_credit_follows_gene_order(self):
        usage = gene_usage_analysis(self.pairs()[:1], 10, gene_order=(1, 0, 2, 3, 4))
        assert usage.per_gene == [0, 1, 0, 0, 0]

    def test_short_agreement_is_ignored(self):
        pair = (BitString.from_str("1" * 9 + "0" * 41), BitString.from_str("1" * 9 + "1" * 41))
        usage = gene_usage_analysis([pair], 10)
        assert usage.per_gene == [0] * 5


def silent_summary(run, phase="learning"):
    return RunSummary(phase=phase, run=run, seed=0, windows={4: [WindowStats(4, 0), WindowStats(4, 1)]})


class TestLearning:

    def config(self):
        return build_config({"allow_off_grid": True, "ais": {"evaluate": "all", "detector_count": 5, "growth_candidates": 0}})

    def test_silent_node_has_one_self_string(self):
        learning = learning_phase(self.config(), [silent_summary(0), silent_summary(1)])
        assert learning.evaluated == [4]
        assert len(learning.self_sets[4].antigens) == 4
        assert len(learning.self_sets[4].unique_values()) == 1
        assert learning.normal_forwarded[4] == 0
        assert learning.mean_grown_r is None
        assert learning.mean_shrunk_r is None
        assert audit(learning.detectors[4], learning.self_sets[4]) == []

    def test_tuned_r_is_reported(self):
        config = build_config({"allow_off_grid": True, "ais": {"evaluate": "all", "detector_count": 5, "growth_candidates": 40}})
        learning = learning_phase(config, [silent_summary(0)])
        assert 1 <= learning.mean_shrunk_r <= 25
        assert learning.mean_shrunk_r <= learning.mean_grown_r <= 50

    def test_active_nodes_only(self):
        config = build_config({"allow_off_grid": True, "ais": {"detector_count": 5}})
        learning = learning_phase(config, [silent_summary(0)])
        assert learning.evaluated == []
        assert 4 in learning.self_sets

    def test_misbehavior_in_learning_runs(self):
        tainted = silent_summary(0)
        tainted.totals = FlowCounters(injected=5, dropped_misbehavior=2, delivered=3)
        with pytest.raises(ValueError):
            learning_phase(self.config(), [tainted])

    def test_gene_table(self):
        learning = learning_phase(self.config(), [silent_summary(0)])
        rows = gene_table([silent_summary(0)], learning)
        assert len(rows) == 2
        assert rows[0]["rts_sent"] == 0
        assert len(rows[0]["antigen"]) == 50


class TestSweep:

    def test_expand_grid(self):
        config = build_config({"grid": {"r": [7, 10], "traffic_model": ["CBR", "POISSON"]}})
        cells = expand_grid(config)
        assert len(cells) == 4
        assert cells[0].key == "r7_d2000_l0.3_CBR"
        assert cells[-1].key == "r10_d2000_l0.3_POISSON"

    def test_cell_config(self):
        config = build_config({"grid": {"r": [7, 10]}})
        cfg = cell_config(config, Cell(7, 500, 0.5, TrafficModel.POISSON))
        assert (cfg.ais.r, cfg.ais.detector_count, cfg.misbehavior.level) == (7, 500, 0.5)
        assert cfg.grid.r is None

    def test_invalid_cell_is_reported(self, tiny_config):
        outcome = run_cell(tiny_config, Cell(60, 50, 0.5, TrafficModel.CBR))
        assert outcome.report.status == "failed"
        assert outcome.report.error

    def test_tiny_cell(self, tiny_config):
        outcome = run_cell(tiny_config, keep_artifacts=True)
        report = outcome.report
        assert report.status == "ok", report.error
        assert report.dns <= report.ns
        assert all(v.eligible for v in report.verdicts if v.flagged)
        for node, ds in outcome.learning.detectors.items():
            assert len(ds) == 50
            assert audit(ds, outcome.learning.self_sets[node]) == []
        assert len(outcome.scenario.misbehaving) == 1

    def test_tiny_cell_is_reproducible(self, tiny_config):
        first = metrics_row(run_cell(tiny_config).report)
        second = metrics_row(run_cell(tiny_config).report)
        assert first == second

    def test_scenario_shared_across_cells(self, tiny_config):
        a = build_scenario(cell_config(tiny_config, Cell(7, 50, 0.5, TrafficModel.CBR)))
        b = build_scenario(cell_config(tiny_config, Cell(22, 50, 0.1, TrafficModel.CBR)))
        assert a.topology.nodes == b.topology.nodes
        assert a.misbehaving == b.misbehaving

    def test_sweep_reports_in_grid_order(self, tiny_config):
        config = tiny_config.model_copy(update={"grid": tiny_config.grid.model_copy(update={"r": [7, 13]})})
        reports = SweepService(config).run()
        assert [r.cell for r in reports] == ["r7_d50_l0.5_CBR", "r13_d50_l0.5_CBR"]
