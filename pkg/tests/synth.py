"""Synthetic results files for analysis tests."""

import random

from duetbench.core import Endpoint, PhaseConfig, ResultsFile, Sample, Version

SMALL_PHASES = PhaseConfig(experiment_duration_s=120, noise_start_s=30, noise_stop_s=60,
                           warmup_s=10, cooldown_s=10)


def synthetic_results(version, phases=SMALL_PHASES, seed=0, per_second=5, factor=1.0,
                      base_us=1000.0, jitter=0.05, endpoints=tuple(Endpoint), noise_boost=1.0,
                      status=200):
    """Lognormal-ish latencies, ``per_second`` requests per endpoint per second.

    ``factor`` scales every latency; ``noise_boost`` multiplies jitter inside
    the noise window.
    """
    rng = random.Random(seed)
    samples = []
    for sec in range(int(phases.experiment_duration_s)):
        in_noise = phases.noise_start_s <= sec < phases.noise_stop_s
        sigma = jitter * (noise_boost if in_noise else 1.0)
        for i, ep in enumerate(endpoints):
            for k in range(per_second):
                t_ms = sec * 1000 + (k * 1000 + i * 37) / per_second % 1000
                lat = base_us * (i + 1) * factor * rng.lognormvariate(0, sigma)
                samples.append(Sample(t_ms, ep, Version(version), lat, status))
    return ResultsFile(phase_config=phases, samples=samples, meta={"version": Version(version).value})
