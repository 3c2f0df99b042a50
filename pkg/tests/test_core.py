import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from duetbench.core import (
    Endpoint,
    PerSecondSeries,
    PhaseConfig,
    PhaseLabel,
    ResultsFile,
    Sample,
    Version,
    aggregate_per_second_medians,
    parse_results,
    read_results,
    serialize_results,
    tag_phase,
    trim_warmup_cooldown,
    write_results,
)
from duetbench.errors import ConfigError

DEFAULTS = PhaseConfig()


def mk(t_ms, latency=100.0, endpoint=Endpoint.FLIGHTS, version=Version.V1, status=200):
    return Sample(t_ms, endpoint, version, latency, status)


class TestTagPhase:
    @pytest.mark.parametrize(
        "t_ms,label",
        [
            (250_000, PhaseLabel.ONLY_NOISE),
            (30_000, PhaseLabel.WARMUP),
            (100_000, PhaseLabel.NO_NOISE),
            (200_000, PhaseLabel.ONLY_NOISE),
            (500_000, PhaseLabel.NO_NOISE),
            (60_000, PhaseLabel.NO_NOISE),
            (59_999.9, PhaseLabel.WARMUP),
            (1_740_000, PhaseLabel.COOLDOWN),
            (1_739_999, PhaseLabel.NO_NOISE),
        ],
    )
    def test_defaults(self, t_ms, label):
        assert tag_phase(t_ms, DEFAULTS) is label

    @pytest.mark.parametrize(
        "kwargs",
        [
            dict(warmup_s=250),
            dict(noise_start_s=600),
            dict(noise_stop_s=1790),
            dict(warmup_s=-1),
        ],
    )
    def test_invalid_config(self, kwargs):
        with pytest.raises(ConfigError):
            PhaseConfig(**kwargs)

    def test_scaled(self):
        p = DEFAULTS.scaled(0.2)
        assert (p.experiment_duration_s, p.noise_start_s, p.noise_stop_s) == pytest.approx((360, 40, 100))
        assert p.warmup_s == pytest.approx(12)


phase_configs = st.tuples(
    st.integers(0, 100), st.integers(1, 100), st.integers(1, 100), st.integers(0, 100), st.integers(0, 100)
).map(
    lambda t: PhaseConfig(
        warmup_s=t[0],
        noise_start_s=t[0] + t[1],
        noise_stop_s=t[0] + t[1] + t[2],
        cooldown_s=t[3],
        experiment_duration_s=t[0] + t[1] + t[2] + t[3] + t[4],
    )
)


@settings(max_examples=200, deadline=None)
@given(pc=phase_configs, frac=st.floats(0, 1, exclude_max=True))
def test_phase_partition(pc, frac):
    t_s = frac * pc.experiment_duration_s
    label = tag_phase(t_s * 1000, pc)
    expected = {
        PhaseLabel.WARMUP: t_s < pc.warmup_s,
        PhaseLabel.COOLDOWN: t_s >= pc.experiment_duration_s - pc.cooldown_s,
        PhaseLabel.ONLY_NOISE: pc.warmup_s <= t_s < pc.experiment_duration_s - pc.cooldown_s
        and pc.noise_start_s <= t_s < pc.noise_stop_s,
    }
    expected[PhaseLabel.NO_NOISE] = not any(expected.values())
    assert [k for k, v in expected.items() if v] == [label]


class TestTrim:
    def test_all_warmup(self):
        assert trim_warmup_cooldown([mk(t) for t in range(0, 60_000, 5000)], DEFAULTS) == []

    def test_mixed(self):
        got = trim_warmup_cooldown([mk(t * 1000) for t in (30, 100, 250, 1790)], DEFAULTS)
        assert [s.timestamp_ms for s in got] == [100_000, 250_000]

    def test_empty(self):
        assert trim_warmup_cooldown([], DEFAULTS) == []

    def test_order_preserved(self):
        samples = [mk(t * 1000) for t in (300, 100, 250)]
        assert trim_warmup_cooldown(samples, DEFAULTS) == samples


@settings(max_examples=50, deadline=None)
@given(ts=st.lists(st.floats(0, 1_800_000, allow_nan=False), max_size=50))
def test_trim_idempotent(ts):
    once = trim_warmup_cooldown([mk(t) for t in ts], DEFAULTS)
    assert trim_warmup_cooldown(once, DEFAULTS) == once


class TestAggregate:
    def test_odd_even_singleton(self):
        samples = [mk(5000 + i, lat) for i, lat in enumerate([10, 20, 30])]
        samples += [mk(7000 + i, lat) for i, lat in enumerate([10, 20, 30, 40])]
        series = aggregate_per_second_medians(samples)[(Version.V1, Endpoint.FLIGHTS)]
        assert series.points == ((5, 20), (7, 25))

        single = aggregate_per_second_medians([mk(0, 100)])
        assert single[(Version.V1, Endpoint.FLIGHTS)].points == ((0, 100),)

    def test_groups_by_version_and_endpoint(self):
        samples = [mk(0), mk(0, version=Version.V2), mk(0, endpoint=Endpoint.SEATS)]
        assert len(aggregate_per_second_medians(samples)) == 3

    def test_empty(self):
        assert aggregate_per_second_medians([]) == {}


@settings(max_examples=80, deadline=None)
@given(
    data=st.lists(
        st.tuples(st.integers(0, 9_999), st.integers(1, 1000)), min_size=1, max_size=60
    ),
    seed=st.integers(0, 1000),
)
def test_aggregate_matches_brute_force_and_ignores_order(data, seed):
    samples = [mk(t, lat) for t, lat in data]
    series = aggregate_per_second_medians(samples)[(Version.V1, Endpoint.FLIGHTS)]
    for sec, med in series.points:
        vals = sorted(lat for t, lat in data if t // 1000 == sec)
        k = len(vals)
        brute = vals[k // 2] if k % 2 else (vals[k // 2 - 1] + vals[k // 2]) / 2
        assert med == brute
    secs = series.seconds
    assert secs == sorted(set(secs)) == sorted({t // 1000 for t, _ in data})
    shuffled = samples[:]
    random.Random(seed).shuffle(shuffled)
    assert aggregate_per_second_medians(shuffled) == aggregate_per_second_medians(samples)


class TestSample:
    def test_invariants(self):
        with pytest.raises(ValueError):
            mk(-1)
        with pytest.raises(ValueError):
            mk(0, latency=0)
        with pytest.raises(ValueError):
            Sample(0, "checkout", Version.V1, 1.0, 200)

    def test_ok(self):
        assert mk(0).ok and not mk(0, status=0).ok and not mk(0, status=409).ok


sample_st = st.builds(
    Sample,
    timestamp_ms=st.floats(0, 1e7, allow_nan=False),
    endpoint=st.sampled_from(list(Endpoint)),
    version=st.sampled_from(list(Version)),
    latency_us=st.floats(1e-3, 1e9, allow_nan=False),
    status=st.sampled_from([0, 200, 201, 404, 409, 500]),
)


@settings(max_examples=50, deadline=None)
@given(samples=st.lists(sample_st, max_size=30))
def test_results_round_trip(samples):
    rf = ResultsFile(PhaseConfig().scaled(0.1), samples, {"version": "V1", "start_wall": 1.5e9})
    assert parse_results(serialize_results(rf)) == rf


def test_results_file_on_disk(tmp_path):
    rf = ResultsFile(DEFAULTS, [mk(1.25, 333.001)], {})
    path = write_results(tmp_path / "sub" / "r.jsonl", rf)
    assert read_results(path) == rf
    assert path.read_text().splitlines()[0].startswith('{"format": "duetbench-results"')


def test_parse_rejects_foreign_file():
    with pytest.raises(ValueError):
        parse_results('{"format": "csv"}\n')
    with pytest.raises(ValueError):
        parse_results("")


def test_series_accessors():
    s = PerSecondSeries(Version.V1, Endpoint.SEATS, ((1, 2.0), (3, 4.0)))
    assert s.seconds == [1, 3] and s.values == [2.0, 4.0] and len(s) == 2
