"""Post-hoc analysis of duet results.

For every endpoint and every phase split (no noise, only noise, all data) the
per-second median series of both versions go through the two detectors. The
per-second percent deviations v2 vs v1 feed the boxplots, and verdicts across
a sweep are counted into a false-positive table.
"""

from __future__ import annotations

import csv
import enum
import json
import logging
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from duetbench.core import (
    Endpoint,
    PerSecondSeries,
    PhaseConfig,
    PhaseLabel,
    ResultsFile,
    Sample,
    Version,
    aggregate_per_second_medians,
    read_results,
    tag_phase,
)
from duetbench.errors import InsufficientDataError
from duetbench.stats import (
    DEFAULT_ALPHA,
    DEFAULT_BOOTSTRAP_ITERATIONS,
    DEFAULT_CONFIDENCE,
    Decision,
    bootstrap_ci,
    ci_overlap_verdict,
    relative_change,
    wilcoxon_rank_sum,
    wilcoxon_verdict,
)

log = logging.getLogger(__name__)


class PhaseSplit(str, enum.Enum):
    NO_NOISE = "NoNoise"
    ONLY_NOISE = "OnlyNoise"
    ALL_DATA = "AllData"

    @property
    def title(self) -> str:
        return {"NoNoise": "no noise", "OnlyNoise": "only noise", "AllData": "all data"}[self.value]


class Detector(str, enum.Enum):
    CI_OVERLAP = "CiOverlap"
    WILCOXON = "Wilcoxon"

    @property
    def title(self) -> str:
        return "CI Overlap" if self is Detector.CI_OVERLAP else "Wilcoxon Rank-Sum Test"


@dataclass(frozen=True)
class AnalysisOptions:
    iterations: int = DEFAULT_BOOTSTRAP_ITERATIONS
    confidence: float = DEFAULT_CONFIDENCE
    alpha: float = DEFAULT_ALPHA
    seed: int = 0
    # "per_second" runs the rank-sum test on per-second medians, "raw" on requests
    wilcoxon_input: str = "per_second"
    coupling: str = "common"
    endpoints: tuple[Endpoint, ...] = tuple(Endpoint)


@dataclass(frozen=True)
class ChangeVerdict:
    detector: Detector
    split: PhaseSplit
    endpoint: Endpoint
    relative_change: float | None
    decision: Decision
    ci_low: float | None = None
    ci_high: float | None = None
    p_value: float | None = None
    n_v1: int = 0
    n_v2: int = 0
    note: str = ""

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        for k in ("detector", "split", "endpoint", "decision"):
            d[k] = d[k].value
        return d


@dataclass(frozen=True)
class BoxStats:
    n: int
    median: float
    q1: float
    q3: float
    whisker_low: float
    whisker_high: float
    n_outliers: int

    @property
    def iqr(self) -> float:
        return self.q3 - self.q1


def box_stats(values: Sequence[float]) -> BoxStats | None:
    """Quartiles plus whiskers at the furthest points within 1.5 IQR."""
    if not len(values):
        return None
    a = np.asarray(values, dtype=float)
    q1, med, q3 = np.percentile(a, [25, 50, 75])
    iqr = q3 - q1
    lo_fence, hi_fence = q1 - 1.5 * iqr, q3 + 1.5 * iqr
    inside = a[(a >= lo_fence) & (a <= hi_fence)]
    return BoxStats(
        n=int(a.size), median=float(med), q1=float(q1), q3=float(q3),
        whisker_low=float(inside.min()), whisker_high=float(inside.max()),
        n_outliers=int(a.size - inside.size),
    )


def split_by_phase(samples: Iterable[Sample], phase_config: PhaseConfig) -> dict[PhaseSplit, list[Sample]]:
    out: dict[PhaseSplit, list[Sample]] = {s: [] for s in PhaseSplit}
    for s in samples:
        label = tag_phase(s.timestamp_ms, phase_config)
        if label is PhaseLabel.NO_NOISE:
            out[PhaseSplit.NO_NOISE].append(s)
        elif label is PhaseLabel.ONLY_NOISE:
            out[PhaseSplit.ONLY_NOISE].append(s)
        else:
            continue
        out[PhaseSplit.ALL_DATA].append(s)
    return out


def per_second_relative_change_series(series_v1: PerSecondSeries | None,
                                      series_v2: PerSecondSeries | None) -> list[tuple[int, float]]:
    """(second, percent deviation of v2 from v1) for seconds both series cover."""
    if series_v1 is None or series_v2 is None:
        return []
    v1 = dict(series_v1.points)
    return [(sec, 100.0 * (m2 / v1[sec] - 1.0)) for sec, m2 in series_v2.points if sec in v1]


@dataclass
class ExperimentAnalysis:
    label: str
    configuration: str
    verdicts: list[ChangeVerdict]
    distributions: dict[tuple[Endpoint, PhaseSplit], list[tuple[int, float]]]
    error_counts: dict[str, int]
    sample_counts: dict[str, int]
    aa_test: bool = True

    def verdict(self, detector: Detector, endpoint: Endpoint, split: PhaseSplit) -> ChangeVerdict:
        for v in self.verdicts:
            if v.detector is detector and v.endpoint is endpoint and v.split is split:
                return v
        raise KeyError((detector, endpoint, split))

    def box_stats(self) -> dict[tuple[Endpoint, PhaseSplit], BoxStats | None]:
        return {k: box_stats([p for _, p in pts]) for k, pts in self.distributions.items()}

    def to_dict(self) -> dict[str, Any]:
        boxes = {}
        for (ep, split), b in self.box_stats().items():
            boxes.setdefault(ep.value, {})[split.value] = None if b is None else {**asdict(b), "iqr": b.iqr}
        return {
            "label": self.label,
            "configuration": self.configuration,
            "aa_test": self.aa_test,
            "error_counts": self.error_counts,
            "sample_counts": self.sample_counts,
            "verdicts": [v.to_dict() for v in self.verdicts],
            "boxplot_stats": boxes,
        }


def _cell_verdicts(endpoint: Endpoint, split: PhaseSplit, s1: PerSecondSeries | None,
                   s2: PerSecondSeries | None, raw1: list[float], raw2: list[float],
                   options: AnalysisOptions) -> list[ChangeVerdict]:
    x = s1.values if s1 is not None else []
    y = s2.values if s2 is not None else []
    common = dict(split=split, endpoint=endpoint, n_v1=len(x), n_v2=len(y))
    try:
        rc = relative_change(x, y)
    except InsufficientDataError as exc:
        return [ChangeVerdict(d, relative_change=None, decision=Decision.UNDECIDED, note=str(exc), **common)
                for d in Detector]
    ci = bootstrap_ci(x, y, options.iterations, options.confidence, options.seed, options.coupling)
    ci_v = ChangeVerdict(Detector.CI_OVERLAP, relative_change=rc, decision=ci_overlap_verdict(ci),
                         ci_low=ci[0], ci_high=ci[1], **common)
    if options.wilcoxon_input == "raw":
        test_x, test_y = raw1, raw2
    else:
        test_x, test_y = x, y
    # the rank-sum test compares v2 against v1, so v1 is the first sample
    res = wilcoxon_rank_sum(test_x, test_y)
    w_v = ChangeVerdict(Detector.WILCOXON, relative_change=rc,
                        decision=wilcoxon_verdict(res.p_value, options.alpha),
                        p_value=res.p_value, note=res.method, **common)
    return [ci_v, w_v]


def analyze_experiment(results_v1: ResultsFile, results_v2: ResultsFile, phase_config: PhaseConfig,
                       options: AnalysisOptions = AnalysisOptions(), label: str = "experiment",
                       configuration: str = "", aa_test: bool = True) -> ExperimentAnalysis:
    """Run both detectors on every endpoint x phase split.

    Non-2xx and failed requests are left out of every latency series but
    counted per version in ``error_counts``.
    """
    if options.wilcoxon_input not in ("per_second", "raw"):
        raise ValueError(f"unknown wilcoxon_input {options.wilcoxon_input!r}")
    splits: dict[Version, dict[PhaseSplit, list[Sample]]] = {}
    error_counts = {}
    sample_counts = {}
    for version, rf in ((Version.V1, results_v1), (Version.V2, results_v2)):
        ok = [s for s in rf.samples if s.ok]
        error_counts[version.value] = len(rf.samples) - len(ok)
        sample_counts[version.value] = len(rf.samples)
        splits[version] = split_by_phase(ok, phase_config)

    verdicts: list[ChangeVerdict] = []
    distributions = {}
    for split in PhaseSplit:
        # keyed by endpoint only: each file holds one version, whatever its samples are tagged
        series = {v: {ep: s for (_, ep), s in aggregate_per_second_medians(splits[v][split]).items()}
                  for v in Version}
        for endpoint in options.endpoints:
            s1 = series[Version.V1].get(endpoint)
            s2 = series[Version.V2].get(endpoint)
            raw1 = [s.latency_us for s in splits[Version.V1][split] if s.endpoint is endpoint]
            raw2 = [s.latency_us for s in splits[Version.V2][split] if s.endpoint is endpoint]
            verdicts.extend(_cell_verdicts(endpoint, split, s1, s2, raw1, raw2, options))
            distributions[(endpoint, split)] = per_second_relative_change_series(s1, s2)
    return ExperimentAnalysis(label, configuration, verdicts, distributions, error_counts,
                              sample_counts, aa_test)


# -- false-positive accounting ---------------------------------------------------


@dataclass
class FalsePositiveTable:
    """Per experiment label: how many endpoint x configuration cells each
    detector flagged as changed, for each phase split."""

    labels: list[str] = field(default_factory=list)
    counts: dict[str, dict[tuple[Detector, PhaseSplit], int]] = field(default_factory=dict)
    undecided: dict[str, dict[tuple[Detector, PhaseSplit], int]] = field(default_factory=dict)
    grid_size: dict[str, int] = field(default_factory=dict)
    aa_test: dict[str, bool] = field(default_factory=dict)

    def count(self, label: str, detector: Detector, split: PhaseSplit) -> int:
        return self.counts[label][(detector, split)]

    def to_dict(self) -> dict[str, Any]:
        rows = []
        for label in self.labels:
            rows.append({
                "experiment": label,
                "aa_test": self.aa_test[label],
                "grid_size": self.grid_size[label],
                "counts": {d.value: {s.value: self.counts[label][(d, s)] for s in PhaseSplit}
                           for d in Detector},
                "undecided": {d.value: {s.value: self.undecided[label][(d, s)] for s in PhaseSplit}
                              for d in Detector},
            })
        return {"rows": rows}


def false_positive_table(analyses: Iterable[ExperimentAnalysis]) -> FalsePositiveTable:
    table = FalsePositiveTable()
    cells: dict[str, set] = defaultdict(set)
    for a in analyses:
        if a.label not in table.counts:
            table.labels.append(a.label)
            table.counts[a.label] = Counter({(d, s): 0 for d in Detector for s in PhaseSplit})
            table.undecided[a.label] = Counter({(d, s): 0 for d in Detector for s in PhaseSplit})
            table.aa_test[a.label] = True
        table.aa_test[a.label] &= a.aa_test
        for v in a.verdicts:
            cells[a.label].add((a.configuration, v.endpoint))
            if v.decision is Decision.CHANGE_DETECTED:
                table.counts[a.label][(v.detector, v.split)] += 1
            elif v.decision is Decision.UNDECIDED:
                table.undecided[a.label][(v.detector, v.split)] += 1
    for label in table.labels:
        table.counts[label] = dict(table.counts[label])
        table.undecided[label] = dict(table.undecided[label])
        table.grid_size[label] = len(cells[label])
    return table


def render_fp_table(table: FalsePositiveTable) -> str:
    """Aligned plain text: one row per experiment, detector x split columns."""
    all_aa = all(table.aa_test.get(label, True) for label in table.labels)
    prefix = "FP by" if all_aa else "Changes by"
    split_titles = [s.title for s in PhaseSplit]
    label_w = max([len("Experiment")] + [len(label) for label in table.labels])
    col_w = max(len(t) for t in split_titles)
    group_w = 3 * col_w + 2 * 3
    head1 = " | ".join([" " * label_w] + [f"{prefix} {d.title}".center(group_w) for d in Detector])
    head2 = " | ".join(["Experiment".ljust(label_w)] + [" | ".join(t.center(col_w) for t in split_titles)] * 2)
    lines = [head1, head2, "-" * len(head2)]
    for label in table.labels:
        cells = [str(table.count(label, d, s)).rjust(col_w) for d in Detector for s in PhaseSplit]
        lines.append(" | ".join([label.ljust(label_w)] + [" | ".join(cells[:3]), " | ".join(cells[3:])]))
    lines.append("")
    for label in table.labels:
        n_undecided = sum(table.undecided[label].values())
        extra = f", {n_undecided} undecided cells" if n_undecided else ""
        lines.append(f"{label}: {table.grid_size[label]} observations (configurations x endpoints){extra}")
    return "\n".join(lines) + "\n"


# -- directories ---------------------------------------------------------------


@dataclass
class ExperimentInputs:
    directory: Path
    label: str
    configuration: str
    results_v1: ResultsFile
    results_v2: ResultsFile
    phase_config: PhaseConfig
    aa_test: bool


def discover_experiments(root: str | Path) -> list[Path]:
    root = Path(root)
    if (root / "results_v1.jsonl").exists():
        return [root]
    return sorted(p.parent for p in root.rglob("results_v1.jsonl"))


def load_experiment(directory: str | Path, label: str | None = None) -> ExperimentInputs:
    directory = Path(directory)
    manifest = {}
    if (directory / "manifest.json").exists():
        manifest = json.loads((directory / "manifest.json").read_text())
    rf1 = read_results(directory / "results_v1.jsonl")
    rf2 = read_results(directory / "results_v2.jsonl")
    phases = rf1.phase_config
    if "effective" in manifest:
        phases = PhaseConfig.from_dict(manifest["effective"]["phases"])
        configuration = str(manifest["effective"]["noise"]["threads"])
    else:
        configuration = directory.name
    return ExperimentInputs(
        directory=directory,
        label=label or manifest.get("label") or directory.name,
        configuration=configuration,
        results_v1=rf1,
        results_v2=rf2,
        phase_config=phases,
        aa_test=manifest.get("aa_test", True),
    )


def analyze_directory(root: str | Path, options: AnalysisOptions = AnalysisOptions(),
                      label: str | None = None) -> list[ExperimentAnalysis]:
    dirs = discover_experiments(root)
    if not dirs:
        raise FileNotFoundError(f"no results_v1.jsonl under {root}")
    analyses = []
    for d in dirs:
        inp = load_experiment(d, label)
        log.info("analyzing %s (%s, configuration %s)", d, inp.label, inp.configuration)
        analyses.append(analyze_experiment(inp.results_v1, inp.results_v2, inp.phase_config, options,
                                           inp.label, inp.configuration, inp.aa_test))
    return analyses


BOXPLOT_COLUMNS = ["experiment", "endpoint", "split", "config", "second", "percent_change"]


def write_analysis(analyses: list[ExperimentAnalysis], out_dir: str | Path) -> FalsePositiveTable:
    """Write verdicts.json, fp_table.json, fp_table.txt, boxplot.csv and boxstats.csv."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    table = false_positive_table(analyses)
    (out / "verdicts.json").write_text(json.dumps([a.to_dict() for a in analyses], indent=2))
    (out / "fp_table.json").write_text(json.dumps(table.to_dict(), indent=2))
    (out / "fp_table.txt").write_text(render_fp_table(table))
    with open(out / "boxplot.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(BOXPLOT_COLUMNS)
        for a in analyses:
            for (ep, split), pts in a.distributions.items():
                for sec, pct in pts:
                    w.writerow([a.label, ep.value, split.value, a.configuration, sec, repr(pct)])
    with open(out / "boxstats.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["experiment", "endpoint", "split", "config", "n", "median", "q1", "q3",
                    "whisker_low", "whisker_high", "n_outliers"])
        for a in analyses:
            for (ep, split), b in a.box_stats().items():
                if b is not None:
                    w.writerow([a.label, ep.value, split.value, a.configuration, b.n, b.median, b.q1,
                                b.q3, b.whisker_low, b.whisker_high, b.n_outliers])
    return table


def read_boxplot_csv(path: str | Path) -> dict[tuple[str, str, str, str], list[float]]:
    """(experiment, endpoint, split, config) -> percent changes."""
    data: dict[tuple[str, str, str, str], list[float]] = defaultdict(list)
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            key = (row["experiment"], row["endpoint"], row["split"], row["config"])
            data[key].append(float(row["percent_change"]))
    return dict(data)
