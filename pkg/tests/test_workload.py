import time
from collections import Counter

import pytest

from duetbench.core import Endpoint, PhaseConfig, Version
from duetbench.errors import ConfigError, DriverError
from duetbench.workload import Clock, HttpClient, WorkloadPlan, run_scenario_s2, run_workload, vu_rng

PHASES = PhaseConfig()


def plan(**kw):
    base = dict(s1_vus=0, s1_iterations_per_vu=0, s2_vus=0, s2_iterations_per_vu=0)
    base.update(kw)
    return WorkloadPlan(**base)


def test_defaults_match_reference_plan():
    p = WorkloadPlan()
    assert (p.s1_vus, p.s1_iterations_per_vu, p.s2_vus, p.s2_iterations_per_vu) == (50, 2000, 10, 380)
    assert p.max_samples == 50 * 2000 * 2 + 10 * 380 * 4 == 215_200


def test_invalid_plan():
    with pytest.raises(ConfigError):
        plan(s1_vus=-1)
    with pytest.raises(ConfigError):
        plan(request_timeout_ms=0)


def test_single_s1_iteration(sut):
    rf = run_workload(plan(s1_vus=1, s1_iterations_per_vu=1), sut.url, PHASES, Version.V2)
    assert [s.endpoint for s in rf.samples] == [Endpoint.DESTINATIONS, Endpoint.FLIGHTS]
    assert all(s.version is Version.V2 and s.status == 200 for s in rf.samples)


def test_single_s2_iteration(sut_factory):
    # two airports and many flights: every origin has departures
    sut = sut_factory(n_destinations=2, n_flights=20)
    rf = run_workload(plan(s2_vus=1, s2_iterations_per_vu=1), sut.url, PHASES)
    assert [s.endpoint for s in rf.samples] == [
        Endpoint.DESTINATIONS, Endpoint.FLIGHTS, Endpoint.SEATS, Endpoint.BOOKINGS
    ]
    assert rf.samples[-1].status == 201


def test_s2_stops_on_empty_flight_list(sut_factory):
    sut = sut_factory(n_flights=0)
    rf = run_workload(plan(s2_vus=1, s2_iterations_per_vu=3), sut.url, PHASES)
    assert len(rf.samples) == 6
    assert Counter(s.endpoint for s in rf.samples) == {Endpoint.DESTINATIONS: 3, Endpoint.FLIGHTS: 3}


def test_mixed_counts_and_bound(sut):
    p = plan(s1_vus=4, s1_iterations_per_vu=5, s2_vus=2, s2_iterations_per_vu=5)
    rf = run_workload(p, sut.url, PHASES)
    assert len(rf.samples) <= p.max_samples
    counts = Counter(s.endpoint for s in rf.samples)
    assert counts[Endpoint.DESTINATIONS] == 30
    ts = [s.timestamp_ms for s in rf.samples]
    assert ts == sorted(ts)
    assert rf.meta["version"] == "V1" and rf.meta["plan"]["s1_vus"] == 4


class RecordingClient(HttpClient):
    def __init__(self, *args, **kw):
        super().__init__(*args, **kw)
        self.paths = []

    def request(self, method, path, endpoint, body=None):
        self.paths.append((method, path, body))
        return super().request(method, path, endpoint, body)


def test_seeded_request_sequence(sut_factory):
    def paths(seed):
        sut = sut_factory(n_destinations=2, n_flights=30, seats_per_flight=300)
        client = RecordingClient(sut.url, Version.V1, Clock(time.time()), 5.0)
        rng = vu_rng(seed, "s2", 0)
        for _ in range(6):
            run_scenario_s2(client, rng)
        client.close()
        return client.paths

    first = paths(3)
    assert len(first) == 24
    assert paths(3) == first
    assert paths(4) != first


def test_unreachable_target():
    with pytest.raises(DriverError):
        run_workload(plan(s1_vus=1, s1_iterations_per_vu=1), "http://127.0.0.1:9", PHASES)


def test_errors_recorded_and_run_continues(sut):
    clock = Clock(time.time())
    client = HttpClient(sut.url, Version.V1, clock, 5.0)
    sample, _ = client.request("GET", "/flights/424242/seats", Endpoint.SEATS)
    assert sample.status == 404 and not sample.ok
    client.close()
    sut.stop()
    sample, payload = client.request("GET", "/destinations", Endpoint.DESTINATIONS)
    assert sample.status == 0 and payload is None and sample.latency_us > 0


def test_epoch_in_future_delays_start(sut):
    epoch = time.time() + 0.5
    rf = run_workload(plan(s1_vus=1, s1_iterations_per_vu=2), sut.url, PHASES, epoch=epoch)
    assert rf.meta["start_wall"] >= epoch - 0.01
    assert rf.meta["start_wall"] - epoch < 0.1


def test_max_duration_caps_run(sut_factory):
    sut = sut_factory(work_factor=2000)
    p = plan(s1_vus=2, s1_iterations_per_vu=10**6, max_duration_s=1.0)
    t = time.time()
    rf = run_workload(p, sut.url, PHASES, epoch=t)
    assert time.time() - t < 3.0
    assert rf.samples and rf.samples[-1].timestamp_ms < 2000
