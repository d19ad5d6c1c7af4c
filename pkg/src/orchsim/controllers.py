"""Reconciliation control loop for Jobs and ReplicaSets.

Each tick diffs declared specs against observed pod states and issues
corrective actions: Jobs create pods up to their parallelism until enough
have succeeded, ReplicaSets hold a live replica count, and both replace
pods lost to node churn. Evictions never count against a Job's backoff
limit; only task-level failures do, because node churn is not a task
failure. The tick ordering (faults, Jobs, ReplicaSets, scheduler, task
advance, sampling) is fixed so identical inputs replay identically.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

from .cluster import Cluster, Pod, PodPhase, PodSpec
from .errors import QuotaExceeded
from .metrics import MetricsStore, Sample
from .scheduling import Scheduler


class JobState(str, Enum):
    RUNNING = "Running"
    COMPLETE = "Complete"
    FAILED = "Failed"


@dataclass
class JobSpec:
    name: str
    namespace: str
    parallelism: int
    completions: int
    template: PodSpec
    backoff_limit: int = 6

    def __post_init__(self) -> None:
        if self.parallelism < 1 or self.completions < 1 or self.backoff_limit < 0:
            raise ValueError("parallelism/completions must be >= 1, backoff_limit >= 0")


@dataclass
class JobStatus:
    succeeded: int = 0
    failed_attempts: int = 0
    active: int = 0
    state: JobState = JobState.RUNNING
    stalled_reason: str | None = None


@dataclass
class ReplicaSetSpec:
    name: str
    namespace: str
    replicas: int
    template: PodSpec

    def __post_init__(self) -> None:
        if self.replicas < 0:
            raise ValueError("replicas must be >= 0")


@dataclass
class TickReport:
    tick: int
    bindings: int = 0
    pods_created: int = 0
    pods_completed: int = 0
    pods_failed: int = 0
    pods_evicted: int = 0
    jobs_completed: list[str] = field(default_factory=list)


@dataclass
class TickOutcome:
    """What one pod's task did during one tick."""

    done: bool = False
    failed: bool = False
    busy: bool = False
    cpu_millicores_used: int = 0
    memory_bytes_used: int = 0
    net_rx_bytes: int = 0
    net_tx_bytes: int = 0


class TaskRuntime:
    """Interface the control loop drives; the pipeline provides the real one."""

    def begin_tick(self, now: int) -> None:
        pass

    def advance_pod(self, pod: Pod, now: int) -> TickOutcome:
        return TickOutcome(done=True, busy=True)

    def forget_pod(self, full_name: str) -> None:
        pass

    def set_transfer_fault_rate(self, rate: float) -> None:
        pass


@dataclass
class _FaultEvent:
    tick: int
    kind: str
    target: str | None = None
    value: float | None = None
    applied: bool = False


@dataclass
class _JobRecord:
    spec: JobSpec
    status: JobStatus = field(default_factory=JobStatus)
    owned: list[str] = field(default_factory=list)
    seq: int = 0


@dataclass
class _ReplicaSetRecord:
    spec: ReplicaSetSpec
    owned: list[str] = field(default_factory=list)
    seq: int = 0


_LIVE = (PodPhase.PENDING, PodPhase.SCHEDULED, PodPhase.RUNNING)


class ControlPlane:
    def __init__(
        self,
        cluster: Cluster,
        runtime: TaskRuntime | None = None,
        metrics: MetricsStore | None = None,
    ):
        self.cluster = cluster
        self.scheduler = Scheduler(cluster)
        self.runtime = runtime or TaskRuntime()
        self.metrics = metrics
        self._jobs: dict[tuple[str, str], _JobRecord] = {}
        self._replicasets: dict[tuple[str, str], _ReplicaSetRecord] = {}
        self._order: list[tuple[str, tuple[str, str]]] = []  # registration order
        self._events: list[_FaultEvent] = []
        self._kills: list[_FaultEvent] = []
        self.applied_events: list[dict] = []
        self.busy_advances = 0  # monotone; progress signal for stall detection

    # -- registration ---------------------------------------------------------

    def register_job(self, spec: JobSpec) -> None:
        key = (spec.namespace, spec.name)
        if key in self._jobs:
            raise ValueError(f"job {spec.namespace}/{spec.name} already registered")
        self._jobs[key] = _JobRecord(spec=spec)
        self._order.append(("job", key))

    def register_replicaset(self, spec: ReplicaSetSpec) -> None:
        key = (spec.namespace, spec.name)
        if key in self._replicasets:
            raise ValueError(f"replicaset {spec.namespace}/{spec.name} already registered")
        self._replicasets[key] = _ReplicaSetRecord(spec=spec)
        self._order.append(("replicaset", key))

    def scale_replicaset(self, namespace: str, name: str, replicas: int) -> None:
        self._replicasets[(namespace, name)].spec.replicas = replicas

    def job_status(self, namespace: str, name: str) -> JobStatus:
        rec = self._jobs[(namespace, name)]
        self._refresh_job_counters(rec)
        return rec.status

    def job_pods(self, namespace: str, name: str) -> list[Pod]:
        rec = self._jobs[(namespace, name)]
        return [self._pod_record(p) for p in rec.owned]

    def add_fault_event(
        self, tick: int, kind: str, target: str | None = None, value: float | None = None
    ) -> None:
        if tick < 0:
            raise ValueError("fault tick must be non-negative")
        ev = _FaultEvent(tick=tick, kind=kind, target=target, value=value)
        if kind == "pod_kill":
            self._kills.append(ev)
        elif kind in ("node_offline", "node_online", "transfer_fault_rate"):
            self._events.append(ev)
        else:
            raise ValueError(f"unknown fault kind {kind!r}")

    # -- reconciliation ---------------------------------------------------------

    def _pod_record(self, full_name: str) -> Pod:
        pod = self.cluster.pods.get(full_name)
        if pod is None:
            pod = self.cluster.removed_pods[full_name]
        return pod

    def _refresh_job_counters(self, rec: _JobRecord) -> None:
        pods = [self._pod_record(p) for p in rec.owned]
        rec.status.succeeded = sum(1 for p in pods if p.phase is PodPhase.SUCCEEDED)
        rec.status.failed_attempts = sum(1 for p in pods if p.phase is PodPhase.FAILED)
        rec.status.active = sum(1 for p in pods if p.phase in _LIVE)
        if rec.status.succeeded >= rec.spec.completions:
            rec.status.state = JobState.COMPLETE
        elif rec.status.failed_attempts > rec.spec.backoff_limit:
            rec.status.state = JobState.FAILED
        else:
            rec.status.state = JobState.RUNNING

    def reconcile_job(self, namespace: str, name: str) -> int:
        """Create missing pods for one Job; returns how many were created."""
        rec = self._jobs[(namespace, name)]
        self._refresh_job_counters(rec)
        status = rec.status
        if status.state is not JobState.RUNNING:
            return 0
        want = min(
            rec.spec.parallelism - status.active,
            rec.spec.completions - status.succeeded - status.active,
        )
        created = 0
        for _ in range(max(0, want)):
            rec.seq += 1
            template = rec.spec.template
            spec = PodSpec(
                name=f"{rec.spec.name}-{rec.seq:04d}",
                namespace=namespace,
                requests=template.requests,
                task=template.task,
                restartable=template.restartable,
                labels=dict(template.labels),
                node_selector=dict(template.node_selector),
            )
            try:
                full = self.cluster.admit_pod(spec, owner=f"job:{namespace}/{name}")
            except QuotaExceeded as err:
                # the job stalls rather than fails; retried next tick
                status.stalled_reason = str(err)
                rec.seq -= 1
                break
            rec.owned.append(full)
            created += 1
        else:
            status.stalled_reason = None
        status.active += created
        return created

    def reconcile_replicaset(self, namespace: str, name: str) -> int:
        """Converge live pod count to `replicas`; returns the applied delta."""
        rec = self._replicasets[(namespace, name)]
        live = [
            self._pod_record(p)
            for p in rec.owned
            if self._pod_record(p).phase in _LIVE and p in self.cluster.pods
        ]
        delta = rec.spec.replicas - len(live)
        if delta > 0:
            created = 0
            for _ in range(delta):
                rec.seq += 1
                template = rec.spec.template
                spec = PodSpec(
                    name=f"{rec.spec.name}-{rec.seq:04d}",
                    namespace=namespace,
                    requests=template.requests,
                    task=template.task,
                    restartable=template.restartable,
                    labels=dict(template.labels),
                    node_selector=dict(template.node_selector),
                )
                try:
                    full = self.cluster.admit_pod(spec, owner=f"rs:{namespace}/{name}")
                except QuotaExceeded:
                    rec.seq -= 1
                    break
                rec.owned.append(full)
                created += 1
            return created
        if delta < 0:
            surplus = sorted(live, key=lambda p: p.seq, reverse=True)[: -delta]
            for pod in surplus:
                self.cluster.remove_pod(pod.full_name)
                self.runtime.forget_pod(pod.full_name)
            return delta
        return 0

    # -- the tick ---------------------------------------------------------------

    def control_loop_tick(self) -> TickReport:
        c = self.cluster
        c.now += 1
        now = c.now
        report = TickReport(tick=now)

        # (1) node lifecycle and other scheduled fault events
        for ev in self._events:
            if ev.applied or ev.tick > now:
                continue
            if ev.kind == "node_offline":
                evicted = c.set_node_ready(ev.target, False)
                for name in evicted:
                    self.runtime.forget_pod(name)
                report.pods_evicted += len(evicted)
            elif ev.kind == "node_online":
                c.set_node_ready(ev.target, True)
            elif ev.kind == "transfer_fault_rate":
                self.runtime.set_transfer_fault_rate(ev.value or 0.0)
            ev.applied = True
            self.applied_events.append(
                {"tick": now, "kind": ev.kind, "target": ev.target, "value": ev.value}
            )

        # (2) reconcile every Job, then every ReplicaSet, in registration order
        for kind, key in self._order:
            if kind == "job":
                rec = self._jobs[key]
                before = rec.status.state
                report.pods_created += self.reconcile_job(*key)
                if before is not JobState.COMPLETE and rec.status.state is JobState.COMPLETE:
                    report.jobs_completed.append(f"{key[0]}/{key[1]}")
        for kind, key in self._order:
            if kind == "replicaset":
                delta = self.reconcile_replicaset(*key)
                if delta > 0:
                    report.pods_created += delta

        # (3) bind pending pods
        report.bindings = len(self.scheduler.schedule_pending())

        # (3b) queue housekeeping (lease expiry) before tasks run
        self.runtime.begin_tick(now)

        # (4) advance every bound pod's task by one tick
        advancing = sorted(
            (p for p in c.pods.values() if p.phase in (PodPhase.SCHEDULED, PodPhase.RUNNING)),
            key=lambda p: p.seq,
        )
        for pod in advancing:
            if pod.phase is PodPhase.SCHEDULED:
                c.start_pod(pod.full_name)
            kill = self._match_kill(pod, now)
            if kill is not None:
                kill.applied = True
                self.applied_events.append(
                    {"tick": now, "kind": "pod_kill", "target": kill.target, "value": None}
                )
                c.fail_pod(pod.full_name)
                self.runtime.forget_pod(pod.full_name)
                report.pods_failed += 1
                self._sample(pod, now, TickOutcome())
                continue
            outcome = self.runtime.advance_pod(pod, now)
            self._sample(pod, now, outcome)
            if outcome.busy:
                self.busy_advances += 1
            if outcome.failed:
                c.fail_pod(pod.full_name)
                self.runtime.forget_pod(pod.full_name)
                report.pods_failed += 1
            elif outcome.done:
                c.succeed_pod(pod.full_name)
                self.runtime.forget_pod(pod.full_name)
                report.pods_completed += 1
        return report

    def _match_kill(self, pod: Pod, now: int) -> _FaultEvent | None:
        """A kill event crashes the first matching pod at its task advance."""
        for ev in self._kills:
            if ev.applied or ev.tick > now:
                continue
            target = ev.target or ""
            if pod.full_name.startswith(target) or pod.spec.name.startswith(target):
                return ev
        return None

    def _sample(self, pod: Pod, now: int, outcome: TickOutcome) -> None:
        if self.metrics is None:
            return
        self.metrics.record_sample(
            Sample(
                tick=now,
                pod=pod.full_name,
                cpu_millicores_used=outcome.cpu_millicores_used,
                memory_bytes_used=outcome.memory_bytes_used,
                net_rx_bytes=outcome.net_rx_bytes,
                net_tx_bytes=outcome.net_tx_bytes,
                gpus_allocated=pod.spec.requests.gpu_count,
            )
        )
