"""Run complete duet experiments.

One experiment: plan CPUs, start both SUT instances under the chosen backend,
wait until both answer, fix a shared epoch, start both load drivers at that
epoch, run the noise generator (never isolated) inside its window, wait for
the drivers, tear everything down and write ``manifest.json``.

Output directory layout::

    manifest.json  results_v1.jsonl  results_v2.jsonl
    noise.log  experiment.log  sut_v1.log  sut_v2.log  driver_v1.log  driver_v2.log
"""

from __future__ import annotations

import dataclasses
import http.client
import json
import logging
import os
import platform
import socket
import subprocess
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any
from urllib.parse import urlsplit

import yaml

from duetbench import __version__
from duetbench.core import PhaseConfig, Version, read_results
from duetbench.errors import ConfigError, DriverError, DuetError, HealthTimeout
from duetbench.isolation import (
    CpuPlan,
    IsolatedHandle,
    IsolationBackend,
    MicroVmSpec,
    ProcessSpec,
    ResourceLimits,
    Role,
    apply_isolation,
    effective_cpus,
    plan_cpu_assignment,
    probe_backend,
    require_backend,
    teardown,
    wait,
)
from duetbench.noise import NoiseConfig
from duetbench.sut import SutConfig
from duetbench.workload import WorkloadPlan

log = logging.getLogger(__name__)

REFERENCE_THREAD_GRID = (0, 3, 6, 20, 40, 60)
MANIFEST = "manifest.json"


def results_name(version: Version) -> str:
    return f"results_{version.value.lower()}.jsonl"


@dataclass(frozen=True)
class SutSpec:
    """How to obtain one SUT instance. ``url`` points at an already running
    (possibly remote) service and skips the launch entirely."""

    sut: SutConfig = SutConfig(listen_port=0)
    command: tuple[str, ...] | None = None
    image: str | None = None
    runtime: str | None = None
    url: str | None = None
    firecracker_bin: str | None = None
    microvm: MicroVmSpec | None = None

    def identity(self) -> dict[str, Any]:
        d = _to_plain(self)
        d["sut"].pop("listen_port", None)
        d.pop("url", None)
        return d


@dataclass(frozen=True)
class CpuOptions:
    colocate_drivers: bool = True
    cpus_per_sut: int = 1
    cpus_per_driver: int = 1
    memory_bytes: int | None = None


@dataclass(frozen=True)
class ExperimentConfig:
    label: str = "experiment"
    output_dir: str = "runs/experiment"
    isolation: IsolationBackend = IsolationBackend.NONE
    sut_v1: SutSpec = SutSpec()
    sut_v2: SutSpec = SutSpec()
    cpu: CpuOptions = CpuOptions()
    workload: WorkloadPlan = WorkloadPlan()
    noise: NoiseConfig = NoiseConfig()
    phases: PhaseConfig = PhaseConfig()
    scale: float = 1.0
    health_timeout_s: float = 30.0
    startup_lead_s: float = 2.0
    max_start_skew_ms: float = 100.0

    def __post_init__(self):
        if self.scale <= 0:
            raise ConfigError("scale must be positive")
        self.effective_phases()

    @property
    def aa_test(self) -> bool:
        return self.sut_v1.identity() == self.sut_v2.identity()

    def effective_phases(self) -> PhaseConfig:
        return self.phases.scaled(self.scale) if self.scale != 1.0 else self.phases

    def effective_noise(self) -> NoiseConfig:
        return dataclasses.replace(self.noise, duration_s=self.effective_phases().noise_duration_s)

    def effective_workload(self) -> WorkloadPlan:
        phases = self.effective_phases()
        cap = self.workload.max_duration_s
        cap = phases.experiment_duration_s if cap is None else min(cap, phases.experiment_duration_s)
        return dataclasses.replace(self.workload, max_duration_s=cap)

    def to_dict(self) -> dict[str, Any]:
        return _to_plain(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> ExperimentConfig:
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            if "isolation" in d:
                d["isolation"] = IsolationBackend(d["isolation"])
            for key in ("sut_v1", "sut_v2"):
                if key in d:
                    d[key] = _sut_spec(d[key] or {})
            if "cpu" in d:
                d["cpu"] = CpuOptions(**(d["cpu"] or {}))
            if "workload" in d:
                d["workload"] = WorkloadPlan(**(d["workload"] or {}))
            if "noise" in d:
                d["noise"] = NoiseConfig(**(d["noise"] or {}))
            if "phases" in d:
                d["phases"] = PhaseConfig(**(d["phases"] or {}))
            return cls(**d)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid experiment config: {exc}") from exc


def _sut_spec(d: dict[str, Any]) -> SutSpec:
    d = dict(d)
    sut = dict(d.pop("sut", None) or {})
    sut.setdefault("listen_port", 0)
    if d.get("command") is not None:
        d["command"] = tuple(d["command"])
    if d.get("microvm") is not None:
        d["microvm"] = MicroVmSpec(**d["microvm"])
    return SutSpec(sut=SutConfig(**sut), **d)


def _to_plain(obj: Any) -> Any:
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, IsolationBackend):
        return obj.value
    if isinstance(obj, (list, tuple)):
        return [_to_plain(x) for x in obj]
    if isinstance(obj, dict):
        return {k: _to_plain(v) for k, v in obj.items()}
    return obj


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path} must contain a mapping")
    return ExperimentConfig.from_dict(data)


def dump_config(config: ExperimentConfig) -> str:
    return yaml.safe_dump(config.to_dict(), sort_keys=False)


def apply_overrides(config: ExperimentConfig, *, threads: int | None = None,
                    max_cpu: float | None = None, scale: float | None = None,
                    seed: int | None = None, isolation: str | None = None,
                    out: str | None = None, label: str | None = None) -> ExperimentConfig:
    """Command-line flags win over config file values."""
    changes: dict[str, Any] = {}
    noise = config.noise
    if threads is not None:
        noise = dataclasses.replace(noise, threads=threads)
    if max_cpu is not None:
        noise = dataclasses.replace(noise, max_cpu_pct=max_cpu)
    changes["noise"] = noise
    if scale is not None:
        changes["scale"] = scale
    if seed is not None:
        changes["workload"] = dataclasses.replace(config.workload, rng_seed=seed)
        changes["sut_v1"] = dataclasses.replace(
            config.sut_v1, sut=dataclasses.replace(config.sut_v1.sut, rng_seed=seed))
        changes["sut_v2"] = dataclasses.replace(
            config.sut_v2, sut=dataclasses.replace(config.sut_v2.sut, rng_seed=seed))
    if isolation is not None:
        changes["isolation"] = IsolationBackend(isolation)
    if out is not None:
        changes["output_dir"] = out
    if label is not None:
        changes["label"] = label
    return dataclasses.replace(config, **changes)


# -- helpers --------------------------------------------------------------------


def free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def _module_cmd(*args: str) -> list[str]:
    return [sys.executable, "-m", "duetbench", *args]


def sut_argv(spec: SutSpec, port: int) -> list[str]:
    c = spec.sut
    base = list(spec.command) if spec.command else _module_cmd("sut")
    return base + [
        "--port", str(port), "--host", c.listen_host, "--seed", str(c.rng_seed),
        "--destinations", str(c.n_destinations), "--flights", str(c.n_flights),
        "--seats-per-flight", str(c.seats_per_flight), "--work-factor", str(c.work_factor),
    ]


def driver_argv(target: str, version: Version, out: Path, epoch: float, plan: WorkloadPlan,
                phases: PhaseConfig) -> list[str]:
    argv = _module_cmd(
        "workload", "--target", target, "--version", version.value, "--out", str(out),
        "--epoch", repr(epoch),
        "--s1-vus", str(plan.s1_vus), "--s1-iterations", str(plan.s1_iterations_per_vu),
        "--s2-vus", str(plan.s2_vus), "--s2-iterations", str(plan.s2_iterations_per_vu),
        "--timeout-ms", repr(plan.request_timeout_ms), "--seed", str(plan.rng_seed),
        "--duration", repr(phases.experiment_duration_s),
        "--noise-start", repr(phases.noise_start_s), "--noise-stop", repr(phases.noise_stop_s),
        "--warmup", repr(phases.warmup_s), "--cooldown", repr(phases.cooldown_s),
    )
    if plan.max_duration_s is not None:
        argv += ["--max-duration", repr(plan.max_duration_s)]
    return argv


def noise_argv(noise: NoiseConfig, start_offset_s: float, epoch: float, log_path: Path) -> list[str]:
    return _module_cmd(
        "noise", "--threads", str(noise.threads), "--max-cpu", repr(noise.max_cpu_pct),
        "--duration", repr(noise.duration_s), "--window-ms", repr(noise.window_ms),
        "--mode", noise.mode, "--start-offset", repr(start_offset_s), "--epoch", repr(epoch),
        "--log", str(log_path),
    )


def wait_healthy(url: str, timeout_s: float, handle: IsolatedHandle | None = None) -> float:
    """Poll GET /destinations until it answers 200. Returns seconds waited."""
    parts = urlsplit(url)
    start = time.time()
    last_error = "no response"
    while time.time() - start < timeout_s:
        if handle is not None and handle.process is not None and handle.process.poll() is not None:
            raise HealthTimeout(f"SUT at {url} exited with code {handle.process.returncode}")
        try:
            conn = http.client.HTTPConnection(parts.hostname, parts.port or 80, timeout=2)
            conn.request("GET", "/destinations")
            status = conn.getresponse().status
            conn.close()
            if status == 200:
                return time.time() - start
            last_error = f"status {status}"
        except (OSError, http.client.HTTPException) as exc:
            last_error = str(exc)
        time.sleep(0.1)
    raise HealthTimeout(f"SUT at {url} not healthy after {timeout_s:.0f} s ({last_error})")


def host_facts(backend: IsolationBackend) -> dict[str, Any]:
    uname = platform.uname()
    return {
        "cpu_count": os.cpu_count(),
        "affinity": sorted(os.sched_getaffinity(0)),
        "kernel": uname.release,
        "system": uname.system,
        "machine": uname.machine,
        "hostname": uname.node,
        "python": platform.python_version(),
        "duetbench": __version__,
        "backend_probe": probe_backend(backend).to_dict(),
    }


class _ExperimentLog:
    """Attach a file handler to the package logger for one experiment."""

    def __init__(self, path: Path):
        self.handler = logging.FileHandler(path)
        self.handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
        self.logger = logging.getLogger("duetbench")

    def __enter__(self):
        self.logger.addHandler(self.handler)
        self._level = self.logger.level
        if self.logger.getEffectiveLevel() > logging.INFO:
            self.logger.setLevel(logging.INFO)
        return self

    def __exit__(self, *exc):
        self.logger.removeHandler(self.handler)
        self.logger.setLevel(self._level)
        self.handler.close()


@dataclass
class ExperimentResult:
    output_dir: Path
    manifest: dict[str, Any]
    results: dict[Version, Path] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.manifest.get("status") == "completed"


def _driver_backend(config: ExperimentConfig) -> IsolationBackend:
    if not config.cpu.colocate_drivers:
        return IsolationBackend.NONE
    if config.isolation is IsolationBackend.MICROVM:
        # drivers stay on the host and are pinned with cgroups
        return IsolationBackend.CGROUP_PIN
    return config.isolation


def run_experiment(config: ExperimentConfig) -> ExperimentResult:
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    phases = config.effective_phases()
    noise = config.effective_noise()
    plan = config.effective_workload()
    manifest: dict[str, Any] = {
        "label": config.label,
        "status": "running",
        "aa_test": config.aa_test,
        "config": config.to_dict(),
        "effective": {"phases": phases.to_dict(), "noise": noise.to_dict(), "workload": plan.to_dict()},
        "host": host_facts(config.isolation),
        "processes": [],
        "exit_statuses": {},
        "started_at": time.time(),
    }
    handles: dict[str, IsolatedHandle] = {}
    noise_proc: subprocess.Popen | None = None
    noise_log_file = None

    def write_manifest() -> None:
        (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True))

    with _ExperimentLog(out / "experiment.log"):
        log.info("experiment %s starting in %s (isolation=%s, noise threads=%d)", config.label,
                 out, config.isolation.value, noise.threads)
        try:
            require_backend(config.isolation, config.sut_v1.runtime or config.sut_v1.firecracker_bin)
            driver_backend = _driver_backend(config)
            if driver_backend is not config.isolation:
                require_backend(driver_backend)
            cpu_plan: CpuPlan | None = None
            if config.isolation is not IsolationBackend.NONE:
                cpu_plan = plan_cpu_assignment(len(os.sched_getaffinity(0)),
                                               config.cpu.colocate_drivers,
                                               config.cpu.cpus_per_sut, config.cpu.cpus_per_driver)
                manifest["cpu_plan"] = cpu_plan.to_dict()

            def limits_for(role: Role) -> ResourceLimits:
                if cpu_plan is None or cpu_plan.get(role) is None:
                    return ResourceLimits()
                mem = config.cpu.memory_bytes if role in (Role.SUT_V1, Role.SUT_V2) else None
                return ResourceLimits(cpu_plan.get(role), mem)

            targets: dict[Version, str] = {}
            for version, spec, role in ((Version.V1, config.sut_v1, Role.SUT_V1),
                                        (Version.V2, config.sut_v2, Role.SUT_V2)):
                key = f"sut_{version.value.lower()}"
                if spec.url:
                    targets[version] = spec.url.rstrip("/")
                    manifest["processes"].append({"role": key, "remote_url": spec.url})
                    continue
                port = spec.sut.listen_port or free_port()
                pspec = ProcessSpec(key, sut_argv(spec, port), log_path=str(out / f"{key}.log"),
                                    image=spec.image, runtime=spec.runtime,
                                    firecracker_bin=spec.firecracker_bin, microvm=spec.microvm)
                handle = apply_isolation(config.isolation, pspec, limits_for(role))
                handles[key] = handle
                record = {"role": key, **handle.record()}
                manifest["processes"].append(record)
                targets[version] = f"http://{handle.host}:{port}"
                if config.isolation is not IsolationBackend.MICROVM:
                    record["effective_cpus"] = sorted(effective_cpus(handle))
            for version, url in targets.items():
                waited = wait_healthy(url, config.health_timeout_s,
                                      handles.get(f"sut_{version.value.lower()}"))
                log.info("SUT %s healthy at %s after %.2f s", version.value, url, waited)
            manifest["targets"] = {v.value: u for v, u in targets.items()}

            epoch = time.time() + config.startup_lead_s
            manifest["epoch"] = epoch
            write_manifest()
            for version, role in ((Version.V1, Role.DRIVER_V1), (Version.V2, Role.DRIVER_V2)):
                key = f"driver_{version.value.lower()}"
                argv = driver_argv(targets[version], version, out / results_name(version), epoch,
                                   plan, phases)
                image = config.sut_v1.image if driver_backend is IsolationBackend.CONTAINER else None
                pspec = ProcessSpec(key, argv, log_path=str(out / f"{key}.log"), image=image,
                                    runtime=config.sut_v1.runtime, mounts=[f"{out.resolve()}:{out.resolve()}"])
                handle = apply_isolation(driver_backend, pspec, limits_for(role))
                handles[key] = handle
                manifest["processes"].append({"role": key, **handle.record()})

            noise_log_file = open(out / "noise.stdout", "ab")
            argv = noise_argv(noise, phases.noise_start_s, epoch, out / "noise.log")
            log.info("exec (unisolated): %s", " ".join(argv))
            noise_proc = subprocess.Popen(argv, stdout=noise_log_file, stderr=subprocess.STDOUT,
                                          stdin=subprocess.DEVNULL)
            manifest["processes"].append({"role": "noise", "backend": "unisolated",
                                          "pid": noise_proc.pid, "command": argv})
            manifest["noise_phase"] = {"workers": noise.threads, "start_offset_s": phases.noise_start_s,
                                       "stop_offset_s": phases.noise_stop_s}

            deadline = epoch + phases.experiment_duration_s + max(30.0, 0.1 * phases.experiment_duration_s)
            for key in ("driver_v1", "driver_v2"):
                code = wait(handles[key], max(deadline - time.time(), 1.0))
                manifest["exit_statuses"][key] = code
                if code != 0:
                    raise DriverError(f"{key} failed (exit status {code}); see {key}.log")

            headers = {v: read_results(out / results_name(v)).meta for v in Version}
            skew_ms = abs(headers[Version.V1]["start_wall"] - headers[Version.V2]["start_wall"]) * 1000
            manifest["driver_start_skew_ms"] = skew_ms
            manifest["skew_within_tolerance"] = skew_ms <= config.max_start_skew_ms
            if skew_ms > config.max_start_skew_ms:
                log.warning("driver start skew %.1f ms exceeds %.0f ms", skew_ms, config.max_start_skew_ms)

            remaining = epoch + phases.noise_stop_s - time.time() + 5
            try:
                manifest["exit_statuses"]["noise"] = noise_proc.wait(max(remaining, 1.0))
            except subprocess.TimeoutExpired:
                noise_proc.terminate()
                manifest["exit_statuses"]["noise"] = noise_proc.wait()
            manifest["status"] = "completed"
        except DuetError as exc:
            manifest["status"] = "failed"
            manifest["error"] = {"type": type(exc).__name__, "message": str(exc),
                                 "exit_code": exc.exit_code}
            log.error("experiment failed: %s", exc)
            raise
        except BaseException as exc:
            manifest["status"] = "failed"
            manifest["error"] = {"type": type(exc).__name__, "message": str(exc), "exit_code": 1}
            log.exception("experiment aborted")
            raise
        finally:
            if noise_proc is not None and noise_proc.poll() is None:
                noise_proc.terminate()
                noise_proc.wait()
            if noise_log_file is not None:
                noise_log_file.close()
            for key, handle in handles.items():
                if handle.process is not None and key not in manifest["exit_statuses"]:
                    manifest["exit_statuses"][key] = handle.process.poll()
                teardown(handle)
            manifest["finished_at"] = time.time()
            write_manifest()
            log.info("experiment %s %s", config.label, manifest["status"])

    return ExperimentResult(out, manifest, {v: out / results_name(v) for v in Version})


def run_sweep(base: ExperimentConfig, thread_counts=REFERENCE_THREAD_GRID) -> list[ExperimentResult]:
    """One experiment per noise thread count, strictly one after another."""
    root = Path(base.output_dir)
    root.mkdir(parents=True, exist_ok=True)
    results = []
    index: dict[str, Any] = {"label": base.label, "thread_counts": list(thread_counts), "experiments": []}
    for threads in thread_counts:
        cfg = dataclasses.replace(
            base,
            noise=dataclasses.replace(base.noise, threads=threads),
            output_dir=str(root / f"threads_{threads:02d}"),
        )
        result = run_experiment(cfg)
        results.append(result)
        index["experiments"].append({"threads": threads, "dir": Path(cfg.output_dir).name,
                                     "status": result.manifest["status"]})
        (root / "sweep.json").write_text(json.dumps(index, indent=2))
    return results
