"""CPU noise generator.

Workers spin on integer arithmetic and, when capped, sleep for the rest of each
duty-cycle window: with a 100 ms window and a 30 % cap a worker computes for
30 ms and sleeps for 70 ms. Workers are separate processes by default so that
N workers really occupy N CPUs; ``mode="thread"`` keeps them in-process.
"""

from __future__ import annotations

import logging
import multiprocessing as mp
import threading
import time
from dataclasses import asdict, dataclass, field
from typing import Any, Protocol

from duetbench.errors import ConfigError

log = logging.getLogger(__name__)

_MASK = 0xFFFFFFFFFFFF
_SPIN_BATCH = 200


class StopSignal(Protocol):
    def is_set(self) -> bool: ...
    def wait(self, timeout: float | None = None) -> bool: ...


@dataclass(frozen=True)
class NoiseConfig:
    threads: int = 0
    max_cpu_pct: float = 100.0
    duration_s: float = 300.0
    window_ms: float = 100.0
    mode: str = "process"

    def __post_init__(self):
        if self.threads < 0:
            raise ConfigError("threads must be >= 0")
        if not 0 < self.max_cpu_pct <= 100:
            raise ConfigError("max_cpu_pct must be in (0, 100]")
        if self.duration_s < 0:
            raise ConfigError("duration_s must be >= 0")
        if self.window_ms <= 0:
            raise ConfigError("window_ms must be positive")
        if self.mode not in ("process", "thread"):
            raise ConfigError(f"unknown noise mode {self.mode!r}")

    def duty_cycle_ms(self) -> tuple[float, float]:
        """(busy, sleep) milliseconds per window."""
        busy = self.window_ms * self.max_cpu_pct / 100.0
        return busy, self.window_ms - busy

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass
class NoiseReport:
    workers: int
    start_wall: float | None = None
    stop_wall: float | None = None
    pids: list[int] = field(default_factory=list)
    cpu_seconds: list[float] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def busy_worker(max_cpu_pct: float, window_ms: float, stop_signal: StopSignal) -> int:
    """Burn CPU at ``max_cpu_pct`` of one core until ``stop_signal`` is set.

    Returns the arithmetic accumulator so the loop has an observable result.
    """
    window_s = window_ms / 1000.0
    busy_s = window_s * max_cpu_pct / 100.0
    sleep_s = window_s - busy_s
    acc = 1
    clock = time.perf_counter
    while not stop_signal.is_set():
        until = clock() + busy_s
        while clock() < until:
            for _ in range(_SPIN_BATCH):
                acc = (acc * 1103515245 + 12345) & _MASK
        if sleep_s > 0 and stop_signal.wait(sleep_s):
            break
    return acc


def _process_worker(max_cpu_pct, window_ms, stop, result, cpu_time):
    result.value = busy_worker(max_cpu_pct, window_ms, stop)
    cpu_time.value = time.process_time()


def _thread_worker(max_cpu_pct, window_ms, stop, slot, results):
    acc = busy_worker(max_cpu_pct, window_ms, stop)
    results[slot] = (acc, time.thread_time())


def run_noise(config: NoiseConfig, stop_signal: threading.Event | None = None) -> NoiseReport:
    """Run ``config.threads`` workers for ``config.duration_s`` seconds and join them.

    Setting ``stop_signal`` ends the run early.
    """
    report = NoiseReport(workers=config.threads)
    external = stop_signal or threading.Event()
    if config.threads == 0:
        external.wait(config.duration_s)
        return report

    if config.mode == "process":
        ctx = mp.get_context("fork")
        stop = ctx.Event()
        slots = [(ctx.Value("Q", 0, lock=False), ctx.Value("d", 0.0, lock=False))
                 for _ in range(config.threads)]
        workers = [
            ctx.Process(target=_process_worker, name=f"noise-{i}",
                        args=(config.max_cpu_pct, config.window_ms, stop, res, cpu), daemon=True)
            for i, (res, cpu) in enumerate(slots)
        ]
    else:
        stop = threading.Event()
        thread_results: dict[int, tuple[int, float]] = {}
        workers = [
            threading.Thread(target=_thread_worker, name=f"noise-{i}",
                             args=(config.max_cpu_pct, config.window_ms, stop, i, thread_results),
                             daemon=True)
            for i in range(config.threads)
        ]

    report.start_wall = time.time()
    for w in workers:
        w.start()
    if config.mode == "process":
        report.pids = [w.pid for w in workers]
    log.info("noise started: %d %s workers at %.0f%% cap", config.threads, config.mode,
             config.max_cpu_pct)
    try:
        external.wait(config.duration_s)
    finally:
        stop.set()
        for w in workers:
            w.join()
        report.stop_wall = time.time()
    if config.mode == "process":
        report.cpu_seconds = [cpu.value for _, cpu in slots]
    else:
        report.cpu_seconds = [thread_results.get(i, (0, 0.0))[1] for i in range(config.threads)]
    log.info("noise stopped after %.1f s", report.stop_wall - report.start_wall)
    return report


def schedule_noise(
    config: NoiseConfig,
    start_offset_s: float,
    experiment_epoch: float,
    stop_signal: threading.Event | None = None,
) -> NoiseReport:
    """Sleep until ``experiment_epoch + start_offset_s`` then run the noise.

    With zero workers nothing is spawned, but the call still returns at the
    scheduled end of the noise window.
    """
    if start_offset_s < 0:
        raise ConfigError("start_offset_s must be >= 0")
    stop_signal = stop_signal or threading.Event()
    delay = experiment_epoch + start_offset_s - time.time()
    if delay > 0 and stop_signal.wait(delay):
        return NoiseReport(workers=config.threads)
    return run_noise(config, stop_signal)
