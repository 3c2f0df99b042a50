import csv
import json

import numpy as np
import pytest

from duetbench.analysis import (
    AnalysisOptions,
    Detector,
    PhaseSplit,
    analyze_directory,
    analyze_experiment,
    box_stats,
    discover_experiments,
    false_positive_table,
    load_experiment,
    per_second_relative_change_series,
    read_boxplot_csv,
    render_fp_table,
    split_by_phase,
    write_analysis,
)
from duetbench.core import Endpoint, PerSecondSeries, ResultsFile, Sample, Version, write_results
from duetbench.stats import Decision

from synth import SMALL_PHASES, synthetic_results

FAST = AnalysisOptions(iterations=1000)


def test_split_by_phase():
    stamps = [5_000, 15_000, 35_000, 59_999, 60_000, 109_999, 115_000]
    samples = [Sample(t, Endpoint.SEATS, Version.V1, 10.0, 200) for t in stamps]
    splits = split_by_phase(samples, SMALL_PHASES)
    ts = {k: [s.timestamp_ms for s in v] for k, v in splits.items()}
    assert ts[PhaseSplit.NO_NOISE] == [15_000, 60_000, 109_999]
    assert ts[PhaseSplit.ONLY_NOISE] == [35_000, 59_999]
    assert sorted(ts[PhaseSplit.ALL_DATA]) == sorted(ts[PhaseSplit.NO_NOISE] + ts[PhaseSplit.ONLY_NOISE])


def test_relative_change_series_inner_join():
    a = PerSecondSeries(Version.V1, Endpoint.FLIGHTS, ((1, 100.0), (2, 200.0), (4, 50.0)))
    b = PerSecondSeries(Version.V2, Endpoint.FLIGHTS, ((2, 220.0), (3, 1.0), (4, 50.0)))
    out = per_second_relative_change_series(a, b)
    assert [s for s, _ in out] == [2, 4]
    assert out[0][1] == pytest.approx(10.0) and out[1][1] == 0.0
    assert per_second_relative_change_series(a, None) == []


def test_box_stats():
    b = box_stats([1, 2, 3, 4, 5, 6, 7, 8, 100])
    assert b.median == 5 and b.q1 == 3 and b.q3 == 7 and b.iqr == 4
    assert b.whisker_high == 8 and b.whisker_low == 1 and b.n_outliers == 1
    assert box_stats([]) is None


def test_aa_identical_files_all_no_change():
    rf = synthetic_results("V1")
    a = analyze_experiment(rf, rf, SMALL_PHASES, FAST)
    assert len(a.verdicts) == 24
    for v in a.verdicts:
        assert v.decision is Decision.NO_CHANGE
        assert v.relative_change == 1.0
    ci = [v for v in a.verdicts if v.detector is Detector.CI_OVERLAP]
    assert all(v.ci_low == 1.0 == v.ci_high for v in ci)
    assert all(v.p_value == 1.0 for v in a.verdicts if v.detector is Detector.WILCOXON)
    assert all(p == 0.0 for pts in a.distributions.values() for _, p in pts)


def test_shift_detected_everywhere():
    v1 = synthetic_results("V1", seed=1)
    v2 = synthetic_results("V2", seed=2, factor=1.2)
    a = analyze_experiment(v1, v2, SMALL_PHASES, FAST)
    assert all(v.decision is Decision.CHANGE_DETECTED for v in a.verdicts)
    rc = a.verdict(Detector.CI_OVERLAP, Endpoint.BOOKINGS, PhaseSplit.ALL_DATA).relative_change
    assert rc == pytest.approx(1.2, rel=0.02)


def test_errors_excluded_and_counted():
    v1 = synthetic_results("V1", seed=1)
    bad = synthetic_results("V1", seed=5, factor=50.0, status=500)
    mixed = ResultsFile(v1.phase_config, v1.samples + bad.samples[:100])
    a = analyze_experiment(mixed, v1, SMALL_PHASES, FAST)
    assert a.error_counts == {"V1": 100, "V2": 0}
    assert all(v.relative_change == 1.0 for v in a.verdicts)


def test_missing_endpoint_undecided():
    v1 = synthetic_results("V1", endpoints=(Endpoint.FLIGHTS,))
    a = analyze_experiment(v1, v1, SMALL_PHASES, FAST)
    seats = [v for v in a.verdicts if v.endpoint is Endpoint.SEATS]
    assert len(seats) == 6 and all(v.decision is Decision.UNDECIDED for v in seats)
    table = false_positive_table([a])
    assert table.count("experiment", Detector.WILCOXON, PhaseSplit.ALL_DATA) == 0
    assert sum(table.undecided["experiment"].values()) == 18


def test_raw_wilcoxon_input_and_endpoint_filter():
    v1 = synthetic_results("V1", seed=1)
    v2 = synthetic_results("V2", seed=2)
    opts = AnalysisOptions(iterations=500, wilcoxon_input="raw", endpoints=(Endpoint.SEATS,))
    a = analyze_experiment(v1, v2, SMALL_PHASES, opts)
    w = a.verdict(Detector.WILCOXON, Endpoint.SEATS, PhaseSplit.ALL_DATA)
    assert w.note == "normal" and len(a.verdicts) == 6
    with pytest.raises(ValueError):
        analyze_experiment(v1, v2, SMALL_PHASES, AnalysisOptions(wilcoxon_input="bogus"))


def test_fp_table_counts_and_render():
    v1 = synthetic_results("V1", seed=1)
    shifted = synthetic_results("V2", seed=2, factor=1.3)
    runs = [
        analyze_experiment(v1, v1, SMALL_PHASES, FAST, label="aa", configuration="0"),
        analyze_experiment(v1, shifted, SMALL_PHASES, FAST, label="aa", configuration="6"),
        analyze_experiment(v1, v1, SMALL_PHASES, FAST, label="other", configuration="0"),
    ]
    table = false_positive_table(runs)
    assert table.labels == ["aa", "other"]
    assert table.grid_size == {"aa": 8, "other": 4}
    for d in Detector:
        for s in PhaseSplit:
            assert table.count("aa", d, s) == 4
            assert table.count("other", d, s) == 0
    text = render_fp_table(table)
    lines = text.splitlines()
    assert "FP by CI Overlap" in lines[0] and "FP by Wilcoxon Rank-Sum Test" in lines[0]
    assert lines[3].split("|")[0].strip() == "aa"
    assert [int(c) for c in lines[3].split("|")[1:]] == [4] * 6
    assert "8 observations" in text
    assert json.loads(json.dumps(table.to_dict()))["rows"][0]["counts"]["Wilcoxon"]["OnlyNoise"] == 4


def test_non_aa_header():
    v1 = synthetic_results("V1")
    a = analyze_experiment(v1, v1, SMALL_PHASES, FAST, aa_test=False)
    assert render_fp_table(false_positive_table([a])).startswith(" " * 10)
    assert "Changes by" in render_fp_table(false_positive_table([a]))


def _experiment_dir(path, threads, factor=1.0):
    path.mkdir(parents=True)
    write_results(path / "results_v1.jsonl", synthetic_results("V1", seed=1))
    write_results(path / "results_v2.jsonl", synthetic_results("V2", seed=2, factor=factor))
    manifest = {"label": "sweep-x", "aa_test": True,
                "effective": {"phases": SMALL_PHASES.to_dict(), "noise": {"threads": threads}}}
    (path / "manifest.json").write_text(json.dumps(manifest))


def test_directory_round_trip(tmp_path):
    for t in (0, 6, 20):
        _experiment_dir(tmp_path / f"threads_{t:02d}", t)
    assert [p.name for p in discover_experiments(tmp_path)] == ["threads_00", "threads_06", "threads_20"]
    inp = load_experiment(tmp_path / "threads_06")
    assert inp.label == "sweep-x" and inp.configuration == "6" and inp.phase_config == SMALL_PHASES
    analyses = analyze_directory(tmp_path, FAST)
    out = tmp_path / "analysis"
    table = write_analysis(analyses, out)
    assert table.grid_size["sweep-x"] == 12
    for name in ("verdicts.json", "fp_table.json", "fp_table.txt", "boxplot.csv", "boxstats.csv"):
        assert (out / name).exists()
    with open(out / "boxplot.csv") as f:
        header = next(csv.reader(f))
    assert header == ["experiment", "endpoint", "split", "config", "second", "percent_change"]
    data = read_boxplot_csv(out / "boxplot.csv")
    key = ("sweep-x", "flights", "OnlyNoise", "20")
    expected = [p for _, p in analyses[2].distributions[(Endpoint.FLIGHTS, PhaseSplit.ONLY_NOISE)]]
    assert np.allclose(data[key], expected, rtol=0, atol=0)
    verdicts = json.loads((out / "verdicts.json").read_text())
    assert len(verdicts) == 3 and len(verdicts[0]["verdicts"]) == 24


def test_analyze_directory_empty(tmp_path):
    with pytest.raises(FileNotFoundError):
        analyze_directory(tmp_path)


def test_boxplot_figure_written(tmp_path):
    from duetbench.plotting import write_boxplots

    v1 = synthetic_results("V1", seed=1)
    v2 = synthetic_results("V2", seed=2, noise_boost=4.0)
    runs = [analyze_experiment(v1, v2, SMALL_PHASES, FAST, label="a/a", configuration=c)
            for c in ("0", "6", "20")]
    paths = write_boxplots(runs, tmp_path, ("png", "svg"))
    assert [p.name for p in paths] == ["boxplot_a_a.png", "boxplot_a_a.svg"]
    assert paths[0].read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
    assert b"<svg" in paths[1].read_bytes()[:500]
