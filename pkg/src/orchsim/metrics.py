"""Per-pod time-series sampling, aggregation queries, and step summaries.

A sample holds the usage of one pod during one tick; rate metrics
(net_rx/net_tx) are already per-tick deltas, i.e. bytes per tick, and
throughput is therefore defined as bytes per tick throughout. For a query,
the value of a group at tick t is the sum of its samples at t; the
aggregate then folds those per-tick values, so `max` reads as "peak
concurrent" and `avg` as "mean per tick".
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path

from .cluster import Cluster, PodPhase
from .errors import EmptyWindow, UnknownMetric, UnknownPod, UnknownStep

METRICS = (
    "cpu_millicores_used",
    "memory_bytes_used",
    "net_rx_bytes",
    "net_tx_bytes",
    "gpus_allocated",
)

STEP_LABEL = "step"


@dataclass(frozen=True)
class Sample:
    tick: int
    pod: str
    cpu_millicores_used: int = 0
    memory_bytes_used: int = 0
    net_rx_bytes: int = 0
    net_tx_bytes: int = 0
    gpus_allocated: int = 0


@dataclass
class StepSummary:
    step: str
    pods: int
    cpus: int
    gpus: int
    data_processed_bytes: int
    memory_peak_bytes: int
    total_ticks: int

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "StepSummary":
        return cls(**{k: raw[k] for k in cls.__dataclass_fields__})


class MetricsStore:
    """Sample sink plus read-only aggregation queries.

    When bound to a cluster, record_sample only accepts samples for pods
    that are currently Running (or that terminated during the sample's
    tick). Unbound stores skip that check, which keeps synthetic-series
    tests independent of cluster plumbing.
    """

    def __init__(self, cluster: Cluster | None = None):
        self.cluster = cluster
        self._samples: dict[tuple[int, str], Sample] = {}

    def record_sample(self, sample: Sample) -> None:
        if self.cluster is not None:
            pod = self.cluster.pods.get(sample.pod)
            if pod is None:
                raise UnknownPod(f"no pod {sample.pod!r}")
            if pod.phase is not PodPhase.RUNNING and pod.end_tick != sample.tick:
                raise UnknownPod(f"pod {sample.pod!r} was not running at tick {sample.tick}")
        # last write wins for a duplicate (tick, pod)
        self._samples[(sample.tick, sample.pod)] = sample

    def samples(self) -> list[Sample]:
        return [self._samples[k] for k in sorted(self._samples)]

    def __len__(self) -> int:
        return len(self._samples)

    def query(
        self,
        metric: str,
        agg: str,
        window: tuple[int, int],
        group_by: str = "none",
    ) -> list[tuple[str, float]]:
        """Aggregate a metric over a tick window, optionally grouped.

        Returns (group, value) pairs sorted by group name; the group for
        `none` is the empty string.
        """
        if metric not in METRICS:
            raise UnknownMetric(f"unknown metric {metric!r}")
        if agg not in ("max", "sum", "avg"):
            raise ValueError(f"unknown aggregation {agg!r}")
        if group_by not in ("pod", "step", "none"):
            raise ValueError(f"unknown group_by {group_by!r}")
        lo, hi = window
        selected = [s for s in self.samples() if lo <= s.tick <= hi]
        if not selected:
            raise EmptyWindow(f"no samples in ticks [{lo}, {hi}]")

        per_tick: dict[tuple[str, int], int] = {}
        for s in selected:
            group = self._group_of(s, group_by)
            key = (group, s.tick)
            per_tick[key] = per_tick.get(key, 0) + getattr(s, metric)

        series: dict[str, list[int]] = {}
        for (group, _tick), value in sorted(per_tick.items()):
            series.setdefault(group, []).append(value)

        out = []
        for group in sorted(series):
            values = series[group]
            if agg == "max":
                result = float(max(values))
            elif agg == "sum":
                result = float(sum(values))
            else:
                result = sum(values) / len(values)
            out.append((group, result))
        return out

    def _group_of(self, sample: Sample, group_by: str) -> str:
        if group_by == "pod":
            return sample.pod
        if group_by == "step":
            if self.cluster is not None:
                for pod in self.cluster.all_pod_records():
                    if pod.full_name == sample.pod:
                        return pod.spec.labels.get(STEP_LABEL, "")
            return ""
        return ""

    def export_jsonl(self, path: Path | str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for sample in self.samples():
                fh.write(json.dumps(asdict(sample), sort_keys=True) + "\n")


def summarize_step(
    cluster: Cluster,
    metrics: MetricsStore,
    step: str,
    data_processed_bytes: int,
) -> StepSummary:
    """Roll one step's pods and samples up into the summary-table row set.

    CPU/GPU columns are peak *concurrently allocated* requests, derived from
    pod lifetimes; the memory column is the peak of summed per-tick usage
    samples; total time spans first pod start to last pod end.
    """
    pods = [
        p
        for p in cluster.all_pod_records()
        if p.spec.labels.get(STEP_LABEL) == step and p.start_tick is not None
    ]
    if not pods:
        raise UnknownStep(f"no pods ran for step {step!r}")

    first_start = min(p.start_tick for p in pods)
    last_end = max(p.end_tick if p.end_tick is not None else cluster.now for p in pods)

    peak_cpu_m = 0
    peak_gpu = 0
    for tick in range(first_start, last_end + 1):
        cpu_m = 0
        gpu = 0
        for p in pods:
            end = p.end_tick if p.end_tick is not None else cluster.now
            if p.start_tick <= tick <= end:
                cpu_m += p.spec.requests.cpu_millicores
                gpu += p.spec.requests.gpu_count
        peak_cpu_m = max(peak_cpu_m, cpu_m)
        peak_gpu = max(peak_gpu, gpu)

    pod_names = {p.full_name for p in pods}
    peak_memory = 0
    for tick in range(first_start, last_end + 1):
        total = sum(
            s.memory_bytes_used
            for s in metrics.samples()
            if s.tick == tick and s.pod in pod_names
        )
        peak_memory = max(peak_memory, total)

    return StepSummary(
        step=step,
        pods=len(pod_names),
        cpus=-(-peak_cpu_m // 1000),
        gpus=peak_gpu,
        data_processed_bytes=data_processed_bytes,
        memory_peak_bytes=peak_memory,
        total_ticks=last_end - first_start,
    )


def fmt_bytes(value: int) -> str:
    if value < 1000:
        return f"{value}B"
    for unit, scale in (("TB", 10**12), ("GB", 10**9), ("MB", 10**6), ("KB", 10**3)):
        if value >= scale:
            return f"{value / scale:.1f}{unit}"
    return f"{value}B"


def fmt_duration(ticks: int, tick_seconds: int = 1) -> str:
    if ticks <= 0:
        return "NA"
    return f"{ticks * tick_seconds}s"


_ROWS = (
    ("# of Pods", lambda s, ts: str(s.pods)),
    ("# of CPUs", lambda s, ts: str(s.cpus)),
    ("# of GPUs", lambda s, ts: str(s.gpus)),
    ("Data Processed", lambda s, ts: fmt_bytes(s.data_processed_bytes)),
    ("Memory", lambda s, ts: fmt_bytes(s.memory_peak_bytes)),
    ("Total Time", lambda s, ts: fmt_duration(s.total_ticks, ts)),
)


def render_table(summaries: list[StepSummary], tick_seconds: int = 1) -> str:
    """Fixed-width resource summary, one column per step; byte-stable."""
    if not summaries:
        raise ValueError("at least one summary is required")
    header = [""] + [s.step for s in summaries]
    rows = [header]
    for label, cell in _ROWS:
        rows.append([label] + [cell(s, tick_seconds) for s in summaries])
    widths = [max(len(row[i]) for row in rows) for i in range(len(header))]
    lines = []
    for row in rows:
        cells = [row[i].ljust(widths[i]) for i in range(len(row))]
        lines.append("  ".join(cells).rstrip())
    return "\n".join(lines) + "\n"
