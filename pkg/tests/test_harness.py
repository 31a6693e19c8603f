import csv
import io
import json
import math
from pathlib import Path

import pytest
from hypothesis import given
from hypothesis import strategies as st

from heartcast.attention import AttentionConfig, Variant
from heartcast.data import DatasetSpec, SynthConfig
from heartcast.errors import AggregationError, ConfigurationError, DomainError
from heartcast.harness import (
    DatasetEntry,
    ExperimentGrid,
    ExperimentResult,
    aggregate_cities,
    format_one_decimal,
    load_results,
    percent_reduction,
    pollutant_columns,
    render_report,
    results_csv,
    run_experiment,
)
from heartcast.training import TrainingConfig

FIXTURES = Path(__file__).parent / "fixtures"


def city_tables():
    return json.loads((FIXTURES / "city_tables.json").read_text())


def tiny_grid(cells=None, seeds=(0,), datasets=None, **training):
    spec = DatasetSpec(t_in=12, t_out=6, stride=6, lags=(("target", 24),), calendar=("hour_sin",))
    synth = SynthConfig(stations=2, hours=24 * 12, n_exog=1)
    datasets = datasets or [DatasetEntry("toy", spec, city="Synthville", pollutant="NO2", synth=synth)]
    cells = cells or [AttentionConfig(Variant.NONE), AttentionConfig(Variant.ATT, 1, 1)]
    tr = TrainingConfig(**{"max_epochs": 3, "batch_size": 16, **training})
    return ExperimentGrid(tuple(datasets), tuple(cells), tuple(seeds), tr, {"latent": 3})


class TestPercentReduction:
    def test_examples(self):
        assert percent_reduction(100.0, 90.0) == 10.0
        assert percent_reduction(3.7, 3.7) == 0.0
        assert percent_reduction(1.0, 1.2) == pytest.approx(-20.0)

    def test_published_cell(self):
        # a 22.4 % reduction is what an MSE ratio of 0.776 gives
        assert format_one_decimal(percent_reduction(1.0, 0.776)) == "22.4"
        assert city_tables()["cities"]["Granada"]["O-Att: H=2, L=2"]["NO2"] == 22.4

    @pytest.mark.parametrize("base", [0.0, -1.0, math.nan, math.inf])
    def test_domain(self, base):
        with pytest.raises(DomainError):
            percent_reduction(base, 1.0)

    @given(base=st.floats(1e-6, 1e6), a=st.floats(0, 1e6), b=st.floats(0, 1e6))
    def test_strictly_decreasing(self, base, a, b):
        if a < b:
            assert percent_reduction(base, a) >= percent_reduction(base, b)
        assert percent_reduction(base, base) == 0.0


class TestRounding:
    @pytest.mark.parametrize("x,s", [(7.45, "7.5"), (7.44, "7.4"), (7.4999, "7.5"), (-0.05, "-0.1"),
                                     (-7.45, "-7.5"), (2.25, "2.3"), (10.0, "10.0"), (0.04, "0.0")])
    def test_half_away_from_zero(self, x, s):
        assert format_one_decimal(x) == s

    def test_column_order(self):
        assert pollutant_columns(["PM25", "O3", "average", "NO2", "PM10"]) == ["NO2", "O3", "PM10", "PM25"]
        assert pollutant_columns(["target", "O3", "CO"]) == ["O3", "CO", "target"]


class TestAggregate:
    def test_published_examples(self):
        rows = {r.label: r for r in aggregate_cities(city_tables()["cities"])}
        att = rows["Att: H=4, L=2"]
        assert format_one_decimal(att.values["NO2"]) == "12.8"
        assert format_one_decimal(att.values["O3"]) == "8.0"
        assert format_one_decimal(att.average) == "7.5"

    def test_every_average_cell_within_tenth(self):
        ref = city_tables()["average"]
        rows = aggregate_cities(city_tables()["cities"])
        assert {r.label for r in rows} == set(ref)
        for r in rows:
            for p, v in r.values.items():
                assert abs(v - ref[r.label][p]) <= 0.1 + 1e-9, (r.label, p)
            assert abs(r.average - ref[r.label]["average"]) <= 0.1 + 1e-9

    def test_sorted_by_average(self):
        rows = aggregate_cities(city_tables()["cities"])
        avgs = [r.average for r in rows]
        assert avgs == sorted(avgs, reverse=True)
        assert rows[0].label == "Att: H=4, L=2"

    def test_single_city_is_identity(self):
        gijon = city_tables()["cities"]["Gijon"]
        rows = aggregate_cities({"Gijon": gijon})
        for r in rows:
            for p, v in r.values.items():
                assert v == gijon[r.label][p]

    def test_ties_broken_by_label(self):
        t = {"c": {"b": {"NO2": 1.0}, "a": {"NO2": 1.0}, "z": {"NO2": 2.0}}}
        assert [r.label for r in aggregate_cities(t)] == ["z", "a", "b"]

    def test_ragged(self):
        t = city_tables()["cities"]
        del t["Malaga"]["Att: H=2, L=1"]["O3"]
        with pytest.raises(AggregationError, match="Malaga.*Att: H=2, L=1.*O3"):
            aggregate_cities(t)


class TestGridConfig:
    def test_baseline_inserted_from_json(self):
        g = tiny_grid()
        d = g.to_dict()
        d["cells"] = d["cells"][1:]
        assert ExperimentGrid.from_dict(d).baseline.variant is Variant.NONE

    def test_baseline_exactly_once(self):
        with pytest.raises(ConfigurationError):
            tiny_grid(cells=[AttentionConfig(Variant.ATT)])
        with pytest.raises(ConfigurationError):
            tiny_grid(cells=[AttentionConfig(Variant.NONE), AttentionConfig(Variant.NONE, heads=2)])

    def test_round_trip(self):
        g = tiny_grid(seeds=(3, 4))
        assert ExperimentGrid.from_dict(json.loads(json.dumps(g.to_dict()))) == g

    def test_job_keys_and_seeds(self):
        g = tiny_grid(seeds=(0, 7))
        keys = [j.key for j in g.jobs()]
        assert keys == ["toy__NoAttention__s0", "toy__Att-H-1-L-1__s0", "toy__NoAttention__s7", "toy__Att-H-1-L-1__s7"]
        assert len(set(j.fingerprint() for j in g.jobs())) == 4

    def test_dataset_needs_one_source(self):
        with pytest.raises(ConfigurationError):
            DatasetEntry("x")

    def test_unknown_keys(self):
        with pytest.raises(ConfigurationError):
            ExperimentGrid.from_dict({**tiny_grid().to_dict(), "shuffle": True})


class TestRun:
    def test_counting_contract(self, tmp_path):
        s = run_experiment(tiny_grid(), tmp_path)
        assert s.ok and len(s.trained) == 2 and len(s.results) == 1
        records = {p.name for p in (tmp_path / "cells").glob("*__s0.json")}
        assert records == {"toy__NoAttention__s0.json", "toy__Att-H-1-L-1__s0.json"}
        lines = (tmp_path / "results.csv").read_text().splitlines()
        assert lines[0] == "dataset,city,pollutant,cell,seed,baseline_mse,variant_mse,percent_reduction,history"
        assert len(lines) == 2
        r = s.results[0]
        assert r.percent_reduction == percent_reduction(r.baseline_mse, r.variant_mse)
        for name in ("manifest.json", "results.json", "table.csv", "table.json", "chart.svg"):
            assert (tmp_path / name).exists()

    def test_resume_retrains_only_missing_cell(self, tmp_path):
        g = tiny_grid(cells=[AttentionConfig(Variant.NONE), AttentionConfig(Variant.ATT, 1, 1),
                             AttentionConfig(Variant.MATT, 2, 1)])
        first = run_experiment(g, tmp_path)
        csv1 = (tmp_path / "results.csv").read_bytes()
        (tmp_path / "cells" / "toy__Att-H-1-L-1__s0.json").unlink()
        second = run_experiment(g, tmp_path, resume=True)
        assert second.trained == ["toy__Att-H-1-L-1__s0"]
        assert len(second.skipped) == 2
        assert (tmp_path / "results.csv").read_bytes() == csv1
        assert len(first.results) == len(second.results) == 2

    def test_resume_ignores_changed_config(self, tmp_path):
        run_experiment(tiny_grid(), tmp_path)
        s = run_experiment(tiny_grid(max_epochs=2), tmp_path, resume=True)
        assert len(s.trained) == 2 and not s.skipped

    def test_failure_recorded_and_run_continues(self, tmp_path):
        bad = DatasetEntry("broken", DatasetSpec(t_in=12, t_out=6), csv=str(tmp_path / "missing.csv"))
        g = tiny_grid()
        g = ExperimentGrid((*g.datasets, bad), g.cells, g.seeds, g.training, g.model)
        (tmp_path / "missing.csv").write_text("station,feature,timestamp,value\n")
        s = run_experiment(g, tmp_path / "run")
        assert not s.ok
        assert set(s.failures) == {"broken__NoAttention__s0", "broken__Att-H-1-L-1__s0"}
        assert "baseline failed" in s.failures["broken__Att-H-1-L-1__s0"]
        assert len(s.results) == 1

    def test_parallel_matches_sequential(self, tmp_path):
        g = tiny_grid(seeds=(0, 1))
        run_experiment(g, tmp_path / "a", jobs=1)
        run_experiment(g, tmp_path / "b", jobs=2)
        assert (tmp_path / "a" / "results.csv").read_bytes() == (tmp_path / "b" / "results.csv").read_bytes()


def _result(city, pollutant, cell, red, seed=0):
    return ExperimentResult(f"{city}-{pollutant}", city, pollutant, cell, seed, 1.0, 1 - red / 100, red, "h.csv")


class TestReport:
    def test_table_and_determinism(self, tmp_path):
        res = [_result("A", "O3", "Att: H=1, L=1", 5.0), _result("A", "NO2", "Att: H=1, L=1", 7.45),
               _result("B", "NO2", "Att: H=1, L=1", 7.45), _result("B", "O3", "Att: H=1, L=1", 1.0),
               _result("A", "NO2", "M-Att: H=2, L=1", 1.0), _result("A", "O3", "M-Att: H=2, L=1", 1.0),
               _result("B", "NO2", "M-Att: H=2, L=1", 2.0), _result("B", "O3", "M-Att: H=2, L=1", 2.0)]
        p1 = render_report(res, tmp_path / "a")
        p2 = render_report(res[::-1], tmp_path / "b")
        rows = list(csv.reader(io.StringIO(p1["csv"].read_text())))
        assert rows == [["attention", "NO2", "O3", "average"], ["Att: H=1, L=1", "7.5", "3.0", "5.2"],
                        ["M-Att: H=2, L=1", "1.5", "1.5", "1.5"]]
        for k in ("csv", "svg"):
            assert p1[k].read_bytes() == p2[k].read_bytes()
        assert p1["svg"].read_text().startswith("<svg")

    def test_seed_mean_and_std(self, tmp_path):
        res = [_result("A", "NO2", "Att: H=1, L=1", 4.0, 0), _result("A", "NO2", "Att: H=1, L=1", 6.0, 1)]
        doc = json.loads(render_report(res, tmp_path)["json"].read_text())
        cell = doc["per_city"]["A"]["Att: H=1, L=1"]["NO2"]
        assert cell == {"mean": 5.0, "std": 1.0, "n": 2}

    def test_incomplete_cells_dropped(self, tmp_path):
        res = [_result("A", "NO2", "Att: H=1, L=1", 4.0), _result("B", "NO2", "Att: H=1, L=1", 6.0),
               _result("A", "NO2", "M-Att: H=2, L=1", 1.0)]
        doc = json.loads(render_report(res, tmp_path)["json"].read_text())
        assert [r["label"] for r in doc["rows"]] == ["Att: H=1, L=1"]
        assert doc["dropped"] == [["M-Att: H=2, L=1", "NO2"]]

    def test_round_trip_results_json(self, tmp_path):
        s = run_experiment(tiny_grid(), tmp_path)
        assert load_results(tmp_path / "results.json") == s.results
        assert results_csv(s.results) == (tmp_path / "results.csv").read_text()
