"""Process isolation backends and CPU planning.

``none``       plain child process
``cgroup``     child placed in a fresh control group (cpuset + optional memory
               limit) with its scheduler affinity restricted to the same CPUs
``container``  OCI runtime (docker or podman CLI), ``--cpuset-cpus``/``--memory``
``microvm``    Firecracker guest configured over its API socket; the VMM
               process (and so every vCPU thread) is pinned to the CPU set

Every external command and control-file write is logged verbatim at INFO.
Failures to apply a limit raise ``IsolationError``; nothing falls back to an
unconfined launch.
"""

from __future__ import annotations

import enum
import http.client
import json
import logging
import os
import shlex
import shutil
import signal
import socket
import subprocess
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from duetbench.errors import CapabilityError, ConfigError, IsolationError

log = logging.getLogger(__name__)

CGROUP_ROOT = Path("/sys/fs/cgroup")
CGROUP_PREFIX = "duetbench-"


class IsolationBackend(str, enum.Enum):
    NONE = "none"
    CGROUP_PIN = "cgroup"
    CONTAINER = "container"
    MICROVM = "microvm"


class Role(str, enum.Enum):
    SUT_V1 = "SUT_V1"
    SUT_V2 = "SUT_V2"
    DRIVER_V1 = "DRIVER_V1"
    DRIVER_V2 = "DRIVER_V2"


@dataclass(frozen=True)
class CpuPlan:
    assignments: dict[Role, frozenset[int]]
    free: frozenset[int]

    def __post_init__(self):
        sets = list(self.assignments.values())
        for i, a in enumerate(sets):
            for b in sets[i + 1:]:
                if a & b:
                    raise ConfigError(f"CPU plan assigns overlapping sets {sorted(a)} / {sorted(b)}")
        a = self.assignments
        if len(a.get(Role.SUT_V1, ())) != len(a.get(Role.SUT_V2, ())):
            raise ConfigError("SUT CPU sets must be equally sized")
        if len(a.get(Role.DRIVER_V1, ())) != len(a.get(Role.DRIVER_V2, ())):
            raise ConfigError("driver CPU sets must be equally sized")

    def get(self, role: Role) -> frozenset[int] | None:
        return self.assignments.get(role)

    def to_dict(self) -> dict[str, Any]:
        return {"assignments": {r.value: sorted(c) for r, c in self.assignments.items()},
                "free": sorted(self.free)}


def plan_cpu_assignment(total_cpus: int, colocate_drivers: bool, cpus_per_sut: int = 1,
                        cpus_per_driver: int = 1) -> CpuPlan:
    """Consecutive CPU blocks: SUT_V1, SUT_V2, then DRIVER_V1, DRIVER_V2 when the
    drivers share the host. Whatever is left stays with the OS and the noise."""
    if cpus_per_sut < 1 or cpus_per_driver < 1:
        raise ConfigError("CPU counts per role must be >= 1")
    roles = [(Role.SUT_V1, cpus_per_sut), (Role.SUT_V2, cpus_per_sut)]
    if colocate_drivers:
        roles += [(Role.DRIVER_V1, cpus_per_driver), (Role.DRIVER_V2, cpus_per_driver)]
    needed = sum(n for _, n in roles)
    if total_cpus < needed:
        raise ConfigError(f"CPU plan needs {needed} CPUs, host has {total_cpus}")
    assignments = {}
    nxt = 0
    for role, n in roles:
        assignments[role] = frozenset(range(nxt, nxt + n))
        nxt += n
    return CpuPlan(assignments, frozenset(range(nxt, total_cpus)))


@dataclass(frozen=True)
class ResourceLimits:
    cpu_set: frozenset[int] = frozenset()
    memory_bytes: int | None = None

    def to_dict(self) -> dict[str, Any]:
        return {"cpu_set": sorted(self.cpu_set), "memory_bytes": self.memory_bytes}


@dataclass
class MicroVmSpec:
    kernel_image: str
    rootfs: str
    mem_size_mib: int = 512
    boot_args: str = "console=ttyS0 reboot=k panic=1 pci=off"
    tap_device: str | None = None
    guest_mac: str = "AA:FC:00:00:00:01"
    guest_ip: str | None = None


@dataclass
class ProcessSpec:
    """What to launch. ``argv`` is run directly for none/cgroup, inside
    ``image`` for containers, and ignored for microVMs (the guest image
    decides what runs)."""

    name: str
    argv: list[str]
    env: dict[str, str] = field(default_factory=dict)
    log_path: str | None = None
    image: str | None = None
    mounts: list[str] = field(default_factory=list)
    runtime: str | None = None
    firecracker_bin: str | None = None
    microvm: MicroVmSpec | None = None


@dataclass
class IsolatedHandle:
    backend: IsolationBackend
    name: str
    limits: ResourceLimits
    process: subprocess.Popen | None = None
    cgroup_dirs: list[Path] = field(default_factory=list)
    runtime: str | None = None
    container_id: str | None = None
    api_socket: str | None = None
    host: str = "127.0.0.1"
    launched_at: float = 0.0
    command: list[str] = field(default_factory=list)
    closed: bool = False
    _log_file: Any = None

    @property
    def pid(self) -> int | None:
        return self.process.pid if self.process is not None else None

    def record(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "backend": self.backend.value,
            "pid": self.pid,
            "container_id": self.container_id,
            "cgroups": [str(p) for p in self.cgroup_dirs],
            "limits": self.limits.to_dict(),
            "command": self.command,
            "launched_at": self.launched_at,
        }


@dataclass
class ProbeReport:
    backend: IsolationBackend
    available: bool
    detail: str
    facts: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {"backend": self.backend.value, "available": self.available,
                "detail": self.detail, "facts": self.facts}


def _run_logged(cmd: list[str], **kw) -> subprocess.CompletedProcess:
    log.info("exec: %s", shlex.join(cmd))
    return subprocess.run(cmd, capture_output=True, text=True, **kw)


def _write_control(path: Path, value: str) -> None:
    log.info("write %s <- %s", path, value)
    path.write_text(value)


def format_cpu_list(cpus) -> str:
    return ",".join(str(c) for c in sorted(cpus))


def parse_cpu_list(text: str) -> set[int]:
    out: set[int] = set()
    for part in text.strip().split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part:
            lo, hi = part.split("-")
            out.update(range(int(lo), int(hi) + 1))
        else:
            out.add(int(part))
    return out


# -- control groups -------------------------------------------------------------


@dataclass(frozen=True)
class CgroupLayout:
    version: int
    cpuset_base: Path
    memory_base: Path | None


def _own_cgroup_paths() -> dict[str, str]:
    """controller -> path relative to the hierarchy root, from /proc/self/cgroup."""
    paths = {}
    for line in Path("/proc/self/cgroup").read_text().splitlines():
        _, controllers, rel = line.split(":", 2)
        if controllers == "":
            paths["unified"] = rel
        for c in controllers.split(","):
            if c:
                paths[c] = rel
    return paths


def detect_cgroups(root: Path = CGROUP_ROOT) -> CgroupLayout | None:
    """Find a writable hierarchy with the cpuset controller. Prefers v2."""
    try:
        own = _own_cgroup_paths()
    except OSError:
        return None
    for v2_root in (root, root / "unified"):
        controllers = v2_root / "cgroup.controllers"
        if controllers.exists() and "cpuset" in controllers.read_text().split():
            base = v2_root / own.get("unified", "/").lstrip("/")
            if os.access(base, os.W_OK):
                return CgroupLayout(2, base, base)
    cpuset = root / "cpuset"
    if (cpuset / "cpuset.cpus").exists():
        base = cpuset / own.get("cpuset", "/").lstrip("/")
        if os.access(base, os.W_OK):
            mem_root = root / "memory"
            mem = mem_root / own.get("memory", "/").lstrip("/")
            return CgroupLayout(1, base, mem if os.access(mem, os.W_OK) else None)
    return None


def _create_cgroups(layout: CgroupLayout, name: str, limits: ResourceLimits) -> list[Path]:
    created: list[Path] = []
    try:
        if layout.version == 2:
            wanted = "+cpuset" + (" +memory" if limits.memory_bytes else "")
            _write_control(layout.cpuset_base / "cgroup.subtree_control", wanted)
            group = layout.cpuset_base / name
            group.mkdir()
            created.append(group)
            _write_control(group / "cpuset.cpus", format_cpu_list(limits.cpu_set))
            if limits.memory_bytes:
                _write_control(group / "memory.max", str(limits.memory_bytes))
        else:
            group = layout.cpuset_base / name
            group.mkdir()
            created.append(group)
            _write_control(group / "cpuset.cpus", format_cpu_list(limits.cpu_set))
            mems = (layout.cpuset_base / "cpuset.mems").read_text().strip()
            _write_control(group / "cpuset.mems", mems)
            if limits.memory_bytes:
                if layout.memory_base is None:
                    raise IsolationError("memory limit requested but memory cgroup is not writable")
                mem_group = layout.memory_base / name
                mem_group.mkdir()
                created.append(mem_group)
                _write_control(mem_group / "memory.limit_in_bytes", str(limits.memory_bytes))
    except OSError as exc:
        _remove_cgroups(created)
        raise IsolationError(f"could not configure control group {name}: {exc}") from exc
    except IsolationError:
        _remove_cgroups(created)
        raise
    return created


def _remove_cgroups(dirs: list[Path]) -> None:
    for d in reversed(dirs):
        for _ in range(50):
            try:
                d.rmdir()
                log.info("rmdir %s", d)
                break
            except FileNotFoundError:
                break
            except OSError:
                # the kernel releases a group shortly after its last task exits
                time.sleep(0.05)
        else:
            log.warning("could not remove control group %s", d)


def residual_cgroups(root: Path = CGROUP_ROOT) -> list[Path]:
    layout = detect_cgroups(root)
    if layout is None:
        return []
    bases = {layout.cpuset_base, layout.memory_base} - {None}
    return sorted(p for b in bases for p in b.glob(CGROUP_PREFIX + "*") if p.is_dir())


# -- probing --------------------------------------------------------------------


def _container_runtime(preferred: str | None = None) -> str | None:
    for cand in ([preferred] if preferred else ["docker", "podman"]):
        path = shutil.which(cand) if cand else None
        if path:
            return path
    return None


def probe_backend(backend: IsolationBackend | str, executable: str | None = None) -> ProbeReport:
    """Report whether the host can run ``backend``. ``executable`` overrides the
    container runtime or Firecracker binary looked up on PATH."""
    backend = IsolationBackend(backend)
    if backend is IsolationBackend.NONE:
        return ProbeReport(backend, True, "always available")
    if backend is IsolationBackend.CGROUP_PIN:
        layout = detect_cgroups()
        if layout is None:
            return ProbeReport(backend, False, "no writable cgroup hierarchy with the cpuset controller")
        return ProbeReport(backend, True, f"cgroup v{layout.version} at {layout.cpuset_base}",
                           {"cgroup_version": layout.version,
                            "memory_limits": layout.memory_base is not None})
    if backend is IsolationBackend.CONTAINER:
        runtime = _container_runtime(executable)
        if runtime is None:
            return ProbeReport(backend, False, "no container runtime (docker or podman) on PATH")
        res = _run_logged([runtime, "info"], timeout=30)
        if res.returncode != 0:
            return ProbeReport(backend, False, f"{runtime} info failed: {res.stderr.strip()[:200]}")
        return ProbeReport(backend, True, f"runtime {runtime}", {"runtime": runtime})
    fc = shutil.which(executable or "firecracker")
    kvm = Path("/dev/kvm")
    if not kvm.exists() or not os.access(kvm, os.R_OK | os.W_OK):
        return ProbeReport(backend, False, "/dev/kvm missing or not accessible")
    if fc is None:
        return ProbeReport(backend, False, "firecracker binary not found")
    return ProbeReport(backend, True, f"firecracker at {fc}", {"firecracker": fc})


def require_backend(backend: IsolationBackend | str, executable: str | None = None) -> ProbeReport:
    report = probe_backend(backend, executable)
    if not report.available:
        raise CapabilityError(f"isolation backend {report.backend.value} unavailable: {report.detail}")
    return report


# -- launching ------------------------------------------------------------------


def _open_log(spec: ProcessSpec):
    if spec.log_path:
        return open(spec.log_path, "ab")
    return None


def _popen(argv: list[str], spec: ProcessSpec, preexec=None) -> tuple[subprocess.Popen, Any]:
    log.info("exec: %s", shlex.join(argv))
    log_file = _open_log(spec)
    out = log_file if log_file is not None else subprocess.DEVNULL
    env = {**os.environ, **spec.env}
    proc = subprocess.Popen(argv, env=env, stdout=out, stderr=subprocess.STDOUT,
                            stdin=subprocess.DEVNULL, preexec_fn=preexec, start_new_session=True)
    return proc, log_file


def _confine_self(cgroup_dirs: list[str], cpus: set[int]):
    def preexec():
        pid = str(os.getpid())
        for d in cgroup_dirs:
            with open(os.path.join(d, "cgroup.procs"), "w") as f:
                f.write(pid)
        if cpus:
            os.sched_setaffinity(0, cpus)
    return preexec


def _check_limits(limits: ResourceLimits, backend: IsolationBackend) -> None:
    if backend is not IsolationBackend.NONE and not limits.cpu_set:
        raise ConfigError(f"backend {backend.value} needs a non-empty cpu_set")
    if limits.cpu_set:
        host = os.sched_getaffinity(0)
        missing = set(limits.cpu_set) - host
        if missing:
            raise IsolationError(f"CPUs {sorted(missing)} are not available to this process")


def apply_isolation(backend: IsolationBackend | str, spec: ProcessSpec,
                    limits: ResourceLimits) -> IsolatedHandle:
    backend = IsolationBackend(backend)
    _check_limits(limits, backend)
    name = f"{CGROUP_PREFIX}{spec.name}-{uuid.uuid4().hex[:8]}"
    handle = IsolatedHandle(backend=backend, name=name, limits=limits, launched_at=time.time())
    if backend is IsolationBackend.NONE:
        handle.command = list(spec.argv)
        handle.process, handle._log_file = _popen(spec.argv, spec)
        return handle
    if backend is IsolationBackend.CGROUP_PIN:
        return _apply_cgroup(handle, spec, limits)
    if backend is IsolationBackend.CONTAINER:
        return _apply_container(handle, spec, limits)
    return _apply_microvm(handle, spec, limits)


def _apply_cgroup(handle: IsolatedHandle, spec: ProcessSpec, limits: ResourceLimits) -> IsolatedHandle:
    layout = detect_cgroups()
    if layout is None:
        raise CapabilityError("cgroup backend unavailable: no writable cpuset hierarchy")
    handle.cgroup_dirs = _create_cgroups(layout, handle.name, limits)
    handle.command = list(spec.argv)
    try:
        handle.process, handle._log_file = _popen(
            spec.argv, spec, _confine_self([str(d) for d in handle.cgroup_dirs], set(limits.cpu_set)))
    except (OSError, subprocess.SubprocessError) as exc:
        _remove_cgroups(handle.cgroup_dirs)
        raise IsolationError(f"could not launch {spec.name} in {handle.name}: {exc}") from exc
    actual = effective_cpus(handle)
    if actual != set(limits.cpu_set):
        teardown(handle)
        raise IsolationError(f"{spec.name}: affinity {sorted(actual)} != requested {sorted(limits.cpu_set)}")
    return handle


def _apply_container(handle: IsolatedHandle, spec: ProcessSpec, limits: ResourceLimits) -> IsolatedHandle:
    runtime = _container_runtime(spec.runtime)
    if runtime is None:
        raise CapabilityError("container backend unavailable: no runtime on PATH")
    if not spec.image:
        raise ConfigError(f"container backend needs an image for {spec.name}")
    cmd = [runtime, "run", "-d", "--name", handle.name, "--network", "host",
           "--cpuset-cpus", format_cpu_list(limits.cpu_set)]
    if limits.memory_bytes:
        cmd += ["--memory", f"{limits.memory_bytes}b"]
    for k, v in spec.env.items():
        cmd += ["-e", f"{k}={v}"]
    for m in spec.mounts:
        cmd += ["-v", m]
    cmd += [spec.image, *spec.argv]
    handle.runtime = runtime
    handle.command = cmd
    res = _run_logged(cmd, timeout=120)
    if res.returncode != 0:
        raise IsolationError(f"{runtime} run failed for {spec.name}: {res.stderr.strip()[:500]}")
    handle.container_id = res.stdout.strip().splitlines()[-1]
    actual = effective_cpus(handle)
    if actual != set(limits.cpu_set):
        teardown(handle)
        raise IsolationError(f"{spec.name}: container cpuset {sorted(actual)} != {sorted(limits.cpu_set)}")
    return handle


class _UnixHTTPConnection(http.client.HTTPConnection):
    def __init__(self, path: str, timeout: float = 5.0):
        super().__init__("localhost", timeout=timeout)
        self._path = path

    def connect(self):
        self.sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
        self.sock.settimeout(self.timeout)
        self.sock.connect(self._path)


def firecracker_requests(vm: MicroVmSpec, limits: ResourceLimits) -> list[tuple[str, dict[str, Any]]]:
    """API calls, in order, that configure and boot one guest."""
    calls = [
        ("/machine-config", {"vcpu_count": len(limits.cpu_set), "mem_size_mib": vm.mem_size_mib,
                             "smt": False}),
        ("/boot-source", {"kernel_image_path": vm.kernel_image, "boot_args": vm.boot_args}),
        ("/drives/rootfs", {"drive_id": "rootfs", "path_on_host": vm.rootfs,
                            "is_root_device": True, "is_read_only": False}),
    ]
    if vm.tap_device:
        calls.append(("/network-interfaces/eth0", {"iface_id": "eth0", "host_dev_name": vm.tap_device,
                                                   "guest_mac": vm.guest_mac}))
    calls.append(("/actions", {"action_type": "InstanceStart"}))
    return calls


def _firecracker_put(sock_path: str, path: str, body: dict[str, Any]) -> None:
    data = json.dumps(body)
    log.info("firecracker PUT %s %s", path, data)
    conn = _UnixHTTPConnection(sock_path)
    try:
        conn.request("PUT", path, body=data, headers={"Content-Type": "application/json",
                                                      "Accept": "application/json"})
        resp = conn.getresponse()
        text = resp.read().decode(errors="replace")
    except OSError as exc:
        raise IsolationError(f"firecracker API {path}: {exc}") from exc
    finally:
        conn.close()
    if not 200 <= resp.status < 300:
        raise IsolationError(f"firecracker API {path} returned {resp.status}: {text[:300]}")


def _apply_microvm(handle: IsolatedHandle, spec: ProcessSpec, limits: ResourceLimits) -> IsolatedHandle:
    if spec.microvm is None:
        raise ConfigError(f"microvm backend needs a guest description for {spec.name}")
    fc = shutil.which(spec.firecracker_bin or "firecracker")
    if fc is None:
        raise CapabilityError("microvm backend unavailable: firecracker binary not found")
    sock = f"/tmp/{handle.name}.sock"
    handle.api_socket = sock
    handle.command = [fc, "--api-sock", sock]
    # vCPU threads inherit the VMM's affinity
    handle.process, handle._log_file = _popen(handle.command, spec,
                                              _confine_self([], set(limits.cpu_set)))
    try:
        deadline = time.time() + 10
        while not os.path.exists(sock):
            if handle.process.poll() is not None or time.time() > deadline:
                raise IsolationError(f"firecracker did not open its API socket {sock}")
            time.sleep(0.02)
        for path, body in firecracker_requests(spec.microvm, limits):
            _firecracker_put(sock, path, body)
    except IsolationError:
        teardown(handle)
        raise
    if spec.microvm.guest_ip:
        handle.host = spec.microvm.guest_ip
    return handle


# -- inspection and teardown ----------------------------------------------------


def effective_cpus(handle: IsolatedHandle) -> set[int]:
    """CPUs the confined workload may run on, as reported by the OS or runtime."""
    if handle.container_id:
        res = _run_logged([handle.runtime, "inspect", "-f", "{{.HostConfig.CpusetCpus}}",
                           handle.container_id], timeout=30)
        if res.returncode != 0:
            raise IsolationError(f"inspect failed: {res.stderr.strip()[:200]}")
        return parse_cpu_list(res.stdout)
    if handle.pid is None:
        raise IsolationError(f"{handle.name} has no process to inspect")
    return set(os.sched_getaffinity(handle.pid))


def wait(handle: IsolatedHandle, timeout: float | None = None) -> int | None:
    """Block until the workload exits; returns its exit code, or None on timeout."""
    if handle.container_id:
        try:
            res = _run_logged([handle.runtime, "wait", handle.container_id], timeout=timeout)
        except subprocess.TimeoutExpired:
            return None
        try:
            return int(res.stdout.strip().splitlines()[-1])
        except (ValueError, IndexError):
            return res.returncode or None
    try:
        return handle.process.wait(timeout)
    except subprocess.TimeoutExpired:
        return None


def poll(handle: IsolatedHandle) -> int | None:
    if handle.container_id:
        res = _run_logged([handle.runtime, "inspect", "-f", "{{.State.Running}}", handle.container_id],
                          timeout=30)
        return None if res.stdout.strip() == "true" else 0
    return handle.process.poll()


def teardown(handle: IsolatedHandle, grace_s: float = 5.0) -> None:
    """Stop the workload and release its control groups / container. Idempotent."""
    if handle.closed:
        return
    handle.closed = True
    if handle.container_id:
        _run_logged([handle.runtime, "rm", "-f", handle.container_id], timeout=60)
    proc = handle.process
    if proc is not None and proc.poll() is None:
        try:
            os.killpg(proc.pid, signal.SIGTERM)
        except ProcessLookupError:
            pass
        try:
            proc.wait(grace_s)
        except subprocess.TimeoutExpired:
            try:
                os.killpg(proc.pid, signal.SIGKILL)
            except ProcessLookupError:
                pass
            proc.wait()
    if handle._log_file is not None:
        handle._log_file.close()
    _remove_cgroups(handle.cgroup_dirs)
    if handle.api_socket and os.path.exists(handle.api_socket):
        os.unlink(handle.api_socket)
