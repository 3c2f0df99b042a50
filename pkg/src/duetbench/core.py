"""Measurement data model shared by every other module.

Samples are single requests; phase tagging splits an experiment timeline into
warmup, no-noise, noise and cooldown windows; per-second aggregation reduces a
stream of samples to one median latency per second.
"""

from __future__ import annotations

import enum
import json
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

from duetbench.errors import ConfigError

RESULTS_FORMAT = "duetbench-results"
RESULTS_FORMAT_VERSION = 1


class Endpoint(str, enum.Enum):
    DESTINATIONS = "destinations"
    FLIGHTS = "flights"
    SEATS = "seats"
    BOOKINGS = "bookings"


class Version(str, enum.Enum):
    V1 = "V1"
    V2 = "V2"


class PhaseLabel(str, enum.Enum):
    WARMUP = "Warmup"
    NO_NOISE = "NoNoise"
    ONLY_NOISE = "OnlyNoise"
    COOLDOWN = "Cooldown"


@dataclass(frozen=True, slots=True)
class Sample:
    """One measured request.

    ``timestamp_ms`` is the completion time relative to the experiment epoch.
    ``status`` is the HTTP status, or 0 for transport failures and timeouts.
    """

    timestamp_ms: float
    endpoint: Endpoint
    version: Version
    latency_us: float
    status: int

    def __post_init__(self):
        if self.timestamp_ms < 0:
            raise ValueError(f"negative timestamp: {self.timestamp_ms}")
        if not self.latency_us > 0:
            raise ValueError(f"latency must be positive: {self.latency_us}")
        if not isinstance(self.endpoint, Endpoint):
            object.__setattr__(self, "endpoint", Endpoint(self.endpoint))
        if not isinstance(self.version, Version):
            object.__setattr__(self, "version", Version(self.version))

    @property
    def ok(self) -> bool:
        return 200 <= self.status < 300

    def to_dict(self) -> dict[str, Any]:
        return {
            "timestamp_ms": self.timestamp_ms,
            "version": self.version.value,
            "endpoint": self.endpoint.value,
            "latency_us": self.latency_us,
            "status": self.status,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> Sample:
        return cls(
            timestamp_ms=d["timestamp_ms"],
            endpoint=Endpoint(d["endpoint"]),
            version=Version(d["version"]),
            latency_us=d["latency_us"],
            status=int(d["status"]),
        )


@dataclass(frozen=True)
class PhaseConfig:
    """Experiment timeline in seconds. Defaults follow the reference protocol:
    30 minute runs, noise between 200 s and 500 s, 60 s trimmed at each end."""

    experiment_duration_s: float = 1800.0
    noise_start_s: float = 200.0
    noise_stop_s: float = 500.0
    warmup_s: float = 60.0
    cooldown_s: float = 60.0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        ok = (
            0 <= self.warmup_s < self.noise_start_s < self.noise_stop_s
            <= self.experiment_duration_s - self.cooldown_s
        )
        if not ok or self.cooldown_s < 0:
            raise ConfigError(
                "phase config must satisfy 0 <= warmup < noise_start < noise_stop"
                f" <= duration - cooldown, got {self}"
            )

    @property
    def noise_duration_s(self) -> float:
        return self.noise_stop_s - self.noise_start_s

    def scaled(self, factor: float) -> PhaseConfig:
        if factor <= 0:
            raise ConfigError(f"scale factor must be positive, got {factor}")
        return PhaseConfig(
            experiment_duration_s=self.experiment_duration_s * factor,
            noise_start_s=self.noise_start_s * factor,
            noise_stop_s=self.noise_stop_s * factor,
            warmup_s=self.warmup_s * factor,
            cooldown_s=self.cooldown_s * factor,
        )

    def to_dict(self) -> dict[str, float]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> PhaseConfig:
        return cls(**{k: float(v) for k, v in d.items()})


@dataclass(frozen=True)
class PerSecondSeries:
    version: Version
    endpoint: Endpoint
    points: tuple[tuple[int, float], ...]

    @property
    def seconds(self) -> list[int]:
        return [s for s, _ in self.points]

    @property
    def values(self) -> list[float]:
        return [m for _, m in self.points]

    def __len__(self) -> int:
        return len(self.points)


def tag_phase(timestamp_ms: float, phase_config: PhaseConfig) -> PhaseLabel:
    # Half-open intervals throughout: a sample exactly at noise_start is noise.
    phase_config.validate()
    t = timestamp_ms / 1000.0
    if t < phase_config.warmup_s:
        return PhaseLabel.WARMUP
    if t >= phase_config.experiment_duration_s - phase_config.cooldown_s:
        return PhaseLabel.COOLDOWN
    if phase_config.noise_start_s <= t < phase_config.noise_stop_s:
        return PhaseLabel.ONLY_NOISE
    return PhaseLabel.NO_NOISE


def trim_warmup_cooldown(samples: Iterable[Sample], phase_config: PhaseConfig) -> list[Sample]:
    keep = (PhaseLabel.NO_NOISE, PhaseLabel.ONLY_NOISE)
    return [s for s in samples if tag_phase(s.timestamp_ms, phase_config) in keep]


def exact_median(values: Sequence[float]) -> float:
    """Median with the midpoint convention for even counts."""
    if not values:
        raise ValueError("median of empty sequence")
    ordered = sorted(values)
    n = len(ordered)
    mid = n // 2
    if n % 2:
        return ordered[mid]
    return (ordered[mid - 1] + ordered[mid]) / 2


def aggregate_per_second_medians(
    samples: Iterable[Sample],
) -> dict[tuple[Version, Endpoint], PerSecondSeries]:
    """Group samples by (version, endpoint, whole second) and take exact medians.

    Seconds without samples are absent from the series; nothing is interpolated.
    """
    groups: dict[tuple[Version, Endpoint], dict[int, list[float]]] = defaultdict(
        lambda: defaultdict(list)
    )
    for s in samples:
        second = math.floor(s.timestamp_ms / 1000)
        groups[(s.version, s.endpoint)][second].append(s.latency_us)
    out = {}
    for key, by_second in groups.items():
        points = tuple((sec, exact_median(by_second[sec])) for sec in sorted(by_second))
        out[key] = PerSecondSeries(version=key[0], endpoint=key[1], points=points)
    return out


@dataclass
class ResultsFile:
    """Contents of one newline-delimited results file.

    The first line is a JSON header carrying the phase config and free-form
    metadata (driver start time, SUT version label, plan); every following line
    is one sample.
    """

    phase_config: PhaseConfig
    samples: list[Sample] = field(default_factory=list)
    meta: dict[str, Any] = field(default_factory=dict)

    def header(self) -> dict[str, Any]:
        return {
            "format": RESULTS_FORMAT,
            "format_version": RESULTS_FORMAT_VERSION,
            "phase_config": self.phase_config.to_dict(),
            "meta": self.meta,
        }


def serialize_results(results: ResultsFile) -> str:
    lines = [json.dumps(results.header(), sort_keys=True)]
    lines.extend(json.dumps(s.to_dict(), sort_keys=True) for s in results.samples)
    return "\n".join(lines) + "\n"


def parse_results(text: str) -> ResultsFile:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise ValueError("results file is empty")
    header = json.loads(lines[0])
    if header.get("format") != RESULTS_FORMAT:
        raise ValueError(f"not a results file (format={header.get('format')!r})")
    if header.get("format_version") != RESULTS_FORMAT_VERSION:
        raise ValueError(f"unsupported results format version {header.get('format_version')}")
    return ResultsFile(
        phase_config=PhaseConfig.from_dict(header["phase_config"]),
        samples=[Sample.from_dict(json.loads(ln)) for ln in lines[1:]],
        meta=header.get("meta", {}),
    )


def write_results(path: str | Path, results: ResultsFile) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(serialize_results(results))
    return path


def read_results(path: str | Path) -> ResultsFile:
    return parse_results(Path(path).read_text())
