"""Closed-loop load driver.

Each virtual user (VU) is a thread with its own keep-alive connection that
loops its scenario a fixed number of times, waiting for every response before
sending the next request. S1 searches flights; S2 searches, fetches seats and
books one.
"""

from __future__ import annotations

import http.client
import json
import logging
import random
import socket
import threading
import time
from dataclasses import asdict, dataclass
from typing import Any, Callable
from urllib.parse import quote, urlsplit

from duetbench.core import Endpoint, PhaseConfig, ResultsFile, Sample, Version
from duetbench.errors import ConfigError, DriverError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class WorkloadPlan:
    s1_vus: int = 50
    s1_iterations_per_vu: int = 2000
    s2_vus: int = 10
    s2_iterations_per_vu: int = 380
    request_timeout_ms: float = 10_000
    rng_seed: int = 0
    # Optional wall-clock cap, measured from the experiment epoch.
    max_duration_s: float | None = None

    def __post_init__(self):
        counts = (self.s1_vus, self.s1_iterations_per_vu, self.s2_vus, self.s2_iterations_per_vu)
        if min(counts) < 0:
            raise ConfigError("workload counts must be non-negative")
        if self.request_timeout_ms <= 0:
            raise ConfigError("request_timeout_ms must be positive")

    @property
    def max_samples(self) -> int:
        return self.s1_vus * self.s1_iterations_per_vu * 2 + self.s2_vus * self.s2_iterations_per_vu * 4

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


class Clock:
    """Milliseconds since a wall-clock epoch, advanced with the monotonic clock."""

    def __init__(self, epoch: float):
        self.epoch = epoch
        self._anchor_wall = time.time()
        self._anchor_perf = time.perf_counter()

    def wall(self) -> float:
        return self._anchor_wall + (time.perf_counter() - self._anchor_perf)

    def now_ms(self) -> float:
        return max(0.0, (self.wall() - self.epoch) * 1000.0)


class HttpClient:
    """One persistent HTTP/1.1 connection. Transport failures are reported as
    status 0 and force a reconnect on the next request."""

    def __init__(self, base_url: str, version: Version, clock: Clock, timeout_s: float,
                 deadline: float | None = None):
        parts = urlsplit(base_url)
        self.host = parts.hostname or "127.0.0.1"
        self.port = parts.port or 80
        self.version = version
        self.clock = clock
        self.timeout_s = timeout_s
        self.deadline = deadline
        self._conn: http.client.HTTPConnection | None = None

    def expired(self) -> bool:
        return self.deadline is not None and self.clock.wall() >= self.deadline

    def close(self) -> None:
        if self._conn is not None:
            self._conn.close()
            self._conn = None

    def request(self, method: str, path: str, endpoint: Endpoint,
                body: Any = None) -> tuple[Sample, Any]:
        data = None if body is None else json.dumps(body).encode()
        headers = {"Content-Type": "application/json"} if data is not None else {}
        start = time.perf_counter_ns()
        payload = None
        try:
            if self._conn is None:
                self._conn = http.client.HTTPConnection(self.host, self.port, timeout=self.timeout_s)
            self._conn.request(method, path, body=data, headers=headers)
            resp = self._conn.getresponse()
            raw = resp.read()
            status = resp.status
            if 200 <= status < 300:
                payload = json.loads(raw)
        except (OSError, http.client.HTTPException, ValueError):
            status = 0
            self.close()
        elapsed_us = max((time.perf_counter_ns() - start) / 1000.0, 0.001)
        sample = Sample(self.clock.now_ms(), endpoint, self.version, elapsed_us, status)
        return sample, payload


def _search(client: HttpClient, rng: random.Random, out: list[Sample]) -> list[dict] | None:
    sample, destinations = client.request("GET", "/destinations", Endpoint.DESTINATIONS)
    out.append(sample)
    if not destinations or client.expired():
        return None
    origin = rng.choice(destinations)
    sample, flights = client.request("GET", f"/flights?from={quote(origin)}", Endpoint.FLIGHTS)
    out.append(sample)
    return flights


def run_scenario_s1(client: HttpClient, rng: random.Random) -> list[Sample]:
    samples: list[Sample] = []
    _search(client, rng, samples)
    return samples


def run_scenario_s2(client: HttpClient, rng: random.Random) -> list[Sample]:
    samples: list[Sample] = []
    flights = _search(client, rng, samples)
    if not flights or client.expired():
        return samples
    flight_id = rng.choice(flights)["flight_id"]
    sample, seats = client.request("GET", f"/flights/{flight_id}/seats", Endpoint.SEATS)
    samples.append(sample)
    if not seats or not seats.get("available") or client.expired():
        return samples
    seat = rng.choice(seats["available"])
    sample, _ = client.request("POST", "/bookings", Endpoint.BOOKINGS,
                               body={"flight_id": flight_id, "seat_ids": [seat]})
    samples.append(sample)
    return samples


class Collector:
    """Thread-safe sink; samples from one VU keep their emission order."""

    def __init__(self):
        self._lock = threading.Lock()
        self._samples: list[Sample] = []

    def extend(self, samples: list[Sample]) -> None:
        with self._lock:
            self._samples.extend(samples)

    def samples(self) -> list[Sample]:
        with self._lock:
            return sorted(self._samples, key=lambda s: s.timestamp_ms)


def vu_rng(seed: int, scenario: str, vu: int) -> random.Random:
    return random.Random(f"{seed}:{scenario}:{vu}")


def check_reachable(target: str, timeout_s: float = 5.0) -> bool:
    parts = urlsplit(target)
    try:
        conn = http.client.HTTPConnection(parts.hostname, parts.port or 80, timeout=timeout_s)
        conn.request("GET", "/destinations")
        ok = conn.getresponse().status == 200
        conn.close()
        return ok
    except (OSError, http.client.HTTPException):
        return False


def run_workload(
    plan: WorkloadPlan,
    target: str,
    phase_config: PhaseConfig,
    version: Version = Version.V1,
    epoch: float | None = None,
) -> ResultsFile:
    """Drive ``target`` with all VUs and return the collected samples.

    If ``epoch`` (wall-clock seconds) lies in the future the driver sleeps until
    then, so two drivers handed the same epoch start together.
    """
    version = Version(version)
    if not check_reachable(target):
        raise DriverError(f"SUT at {target} is not reachable")
    if epoch is None:
        epoch = time.time()
    delay = epoch - time.time()
    if delay > 0:
        time.sleep(delay)
    clock = Clock(epoch)
    start_wall = clock.wall()
    deadline = None if plan.max_duration_s is None else epoch + plan.max_duration_s
    collector = Collector()
    timeout_s = plan.request_timeout_ms / 1000.0

    def vu_loop(scenario: Callable, name: str, vu: int, iterations: int) -> None:
        rng = vu_rng(plan.rng_seed, name, vu)
        client = HttpClient(target, version, clock, timeout_s, deadline)
        try:
            for _ in range(iterations):
                if client.expired():
                    break
                collector.extend(scenario(client, rng))
        finally:
            client.close()

    threads = [
        threading.Thread(target=vu_loop, args=(run_scenario_s1, "s1", i, plan.s1_iterations_per_vu),
                         name=f"s1-vu{i}", daemon=True)
        for i in range(plan.s1_vus)
    ] + [
        threading.Thread(target=vu_loop, args=(run_scenario_s2, "s2", i, plan.s2_iterations_per_vu),
                         name=f"s2-vu{i}", daemon=True)
        for i in range(plan.s2_vus)
    ]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    end_wall = clock.wall()
    samples = collector.samples()
    log.info("%s driver finished: %d samples in %.1f s", version.value, len(samples),
             end_wall - start_wall)
    meta = {
        "version": version.value,
        "target": target,
        "epoch": epoch,
        "start_wall": start_wall,
        "end_wall": end_wall,
        "plan": plan.to_dict(),
        "hostname": socket.gethostname(),
    }
    return ResultsFile(phase_config=phase_config, samples=samples, meta=meta)
