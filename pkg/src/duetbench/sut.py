"""Built-in flight-booking service used as the system under test.

Four routes over in-memory state::

    GET  /destinations
    GET  /flights?from=<airport>
    GET  /flights/<flight_id>/seats
    POST /bookings            body: {"flight_id": int, "seat_ids": [str, ...]}

Every request burns ``work_factor`` iterations of integer arithmetic before it
is answered so that CPU contention shows up in latency.
"""

from __future__ import annotations

import json
import logging
import random
import re
import string
import threading
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Any
from urllib.parse import parse_qs, urlsplit

from duetbench.errors import ConfigError

log = logging.getLogger(__name__)

SEAT_LETTERS = "ABCDEF"
_SEATS_ROUTE = re.compile(r"^/flights/(-?\d+)/seats$")


@dataclass(frozen=True)
class SutConfig:
    listen_port: int = 8080
    rng_seed: int = 1
    n_destinations: int = 20
    n_flights: int = 500
    seats_per_flight: int = 60
    work_factor: int = 20_000
    listen_host: str = "127.0.0.1"

    def __post_init__(self):
        if self.n_destinations < 2:
            raise ConfigError("n_destinations must be >= 2")
        if self.n_flights < 0 or self.seats_per_flight < 0 or self.work_factor < 0:
            raise ConfigError("flight, seat and work_factor counts must be non-negative")
        if self.n_destinations > 26**3:
            raise ConfigError("at most 17576 distinct three-letter airport codes")


@dataclass(frozen=True)
class Flight:
    flight_id: int
    origin: str
    destination: str
    seat_count: int

    def to_dict(self) -> dict[str, Any]:
        return {"flight_id": self.flight_id, "from": self.origin, "to": self.destination,
                "seat_count": self.seat_count}


@dataclass
class Dataset:
    destinations: list[str]
    flights: list[Flight]
    # flight_id -> seat_id -> booking_id or None
    seats: dict[int, dict[str, int | None]]
    bookings: list[tuple[int, int, tuple[str, ...]]] = field(default_factory=list)


def seat_ids(count: int) -> list[str]:
    per_row = len(SEAT_LETTERS)
    return [f"{i // per_row + 1}{SEAT_LETTERS[i % per_row]}" for i in range(count)]


def seed_dataset(config: SutConfig) -> Dataset:
    rng = random.Random(config.rng_seed)
    codes: set[str] = set()
    while len(codes) < config.n_destinations:
        codes.add("".join(rng.choice(string.ascii_uppercase) for _ in range(3)))
    destinations = sorted(codes)
    flights = []
    for fid in range(1, config.n_flights + 1):
        origin, dest = rng.sample(destinations, 2)
        flights.append(Flight(fid, origin, dest, config.seats_per_flight))
    seats = {f.flight_id: dict.fromkeys(seat_ids(f.seat_count)) for f in flights}
    return Dataset(destinations, flights, seats)


def busy_work(iterations: int) -> int:
    acc = 0
    for i in range(iterations):
        acc = (acc * 31 + i) & 0xFFFFFFFF
    return acc


class FlightService:
    """Request handlers over one dataset. Handlers return (status, json body)."""

    def __init__(self, config: SutConfig, dataset: Dataset | None = None):
        self.config = config
        self.dataset = dataset if dataset is not None else seed_dataset(config)
        self._by_origin: dict[str, list[Flight]] = {}
        for f in self.dataset.flights:
            self._by_origin.setdefault(f.origin, []).append(f)
        self._book_lock = threading.Lock()
        self._next_booking = 1
        self.checksum = 0

    def _work(self) -> None:
        self.checksum ^= busy_work(self.config.work_factor)

    def get_destinations(self) -> tuple[int, Any]:
        self._work()
        return 200, list(self.dataset.destinations)

    def get_flights(self, origin: str | None) -> tuple[int, Any]:
        self._work()
        return 200, [f.to_dict() for f in self._by_origin.get(origin or "", [])]

    def get_seats(self, flight_id: int) -> tuple[int, Any]:
        self._work()
        seats = self.dataset.seats.get(flight_id)
        if seats is None:
            return 404, {"error": f"unknown flight {flight_id}"}
        return 200, {"flight_id": flight_id,
                     "available": [s for s, b in seats.items() if b is None]}

    def post_booking(self, flight_id: Any, requested: Any) -> tuple[int, Any]:
        self._work()
        if (not isinstance(flight_id, int) or isinstance(flight_id, bool)
                or not isinstance(requested, list) or not requested
                or not all(isinstance(s, str) for s in requested)):
            return 400, {"error": "body must be {flight_id: int, seat_ids: [str, ...]}"}
        seats = self.dataset.seats.get(flight_id)
        if seats is None:
            return 404, {"error": f"unknown flight {flight_id}"}
        unknown = [s for s in requested if s not in seats]
        if unknown:
            return 404, {"error": f"unknown seats {unknown}"}
        if len(set(requested)) != len(requested):
            return 409, {"error": "duplicate seats in request"}
        # check-and-set under a single writer lock
        with self._book_lock:
            taken = [s for s in requested if seats[s] is not None]
            if taken:
                return 409, {"error": f"seats already booked {taken}"}
            booking_id = self._next_booking
            self._next_booking += 1
            for s in requested:
                seats[s] = booking_id
            self.dataset.bookings.append((booking_id, flight_id, tuple(requested)))
        return 201, {"booking_id": booking_id, "flight_id": flight_id, "seat_ids": requested}

    def available_count(self, flight_id: int) -> int:
        return sum(1 for b in self.dataset.seats[flight_id].values() if b is None)

    def booked_count(self, flight_id: int) -> int:
        return sum(len(seats) for _, fid, seats in self.dataset.bookings if fid == flight_id)

    def dispatch(self, method: str, target: str, body: bytes | None = None) -> tuple[int, Any]:
        parts = urlsplit(target)
        path = parts.path.rstrip("/") or "/"
        if method == "GET":
            if path == "/destinations":
                return self.get_destinations()
            if path == "/flights":
                origin = parse_qs(parts.query).get("from", [None])[0]
                return self.get_flights(origin)
            m = _SEATS_ROUTE.match(path)
            if m:
                return self.get_seats(int(m.group(1)))
        elif method == "POST" and path == "/bookings":
            try:
                payload = json.loads(body or b"")
            except ValueError:
                return 400, {"error": "malformed JSON"}
            if not isinstance(payload, dict):
                return 400, {"error": "body must be a JSON object"}
            return self.post_booking(payload.get("flight_id"), payload.get("seat_ids"))
        return 404, {"error": f"no route for {method} {path}"}


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    server: _SutServer

    def _respond(self, method: str) -> None:
        body = None
        if method == "POST":
            length = int(self.headers.get("Content-Length") or 0)
            body = self.rfile.read(length)
        try:
            status, payload = self.server.service.dispatch(method, self.path, body)
        except Exception:  # never take the process down on a bad request
            log.exception("handler failed for %s %s", method, self.path)
            status, payload = 500, {"error": "internal error"}
        data = json.dumps(payload).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def do_GET(self):
        self._respond("GET")

    def do_POST(self):
        self._respond("POST")

    def log_message(self, format, *args):
        pass


class _SutServer(ThreadingHTTPServer):
    daemon_threads = True
    request_queue_size = 256

    def __init__(self, address, service: FlightService):
        self.service = service
        super().__init__(address, _Handler)


def make_server(config: SutConfig) -> ThreadingHTTPServer:
    """Bind the service; call ``serve_forever`` on the result to run it."""
    return _SutServer((config.listen_host, config.listen_port), FlightService(config))


def serve(config: SutConfig) -> None:
    server = make_server(config)
    log.info("SUT listening on %s:%d", *server.server_address[:2])
    try:
        server.serve_forever()
    finally:
        server.server_close()
