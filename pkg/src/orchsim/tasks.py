"""Task runtime: what each pod actually does, one tick at a time.

Work is simulated at tick granularity, but a message's data-plane effects
(completion-set inserts, fetches, the merged put, the ack) land atomically
at the end of its transfer window. A worker that dies mid-window therefore
leaves no partial state behind: its lease expires and the message is
redelivered cleanly. A worker that outlives its lease still applies its
effects, gets a stale-lease ack, and the redelivered copy sees every url
complete and skips the work.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

from .cluster import Cluster, Pod
from .controllers import TaskRuntime, TickOutcome
from .errors import StaleLease, UnknownMessage
from .metrics import StepSummary
from .seeding import content_bytes
from .transfer import (
    DownloadConfig,
    FetchStats,
    MergedContainer,
    SimFetcher,
    SourceCatalog,
    decode_url_list,
    encode_url_list,
    merged_key,
    process_message,
)
from .workqueue import CompletionSet, WorkQueue

MEMORY_OVERHEAD_BYTES = 64_000_000
MEMORY_PER_INPUT_BYTE = 1.2
IDLE_CPU_DIVISOR = 10


def working_set(input_bytes: int, request_bytes: int) -> int:
    model = round(input_bytes * MEMORY_PER_INPUT_BYTE) + MEMORY_OVERHEAD_BYTES
    return min(model, request_bytes) if request_bytes else model


def digest_expand(material: str, size: int) -> bytes:
    """Deterministic pseudo-content derived purely from input identity."""
    seed = int.from_bytes(hashlib.sha256(material.encode("utf-8")).digest()[:8], "little")
    return content_bytes(seed, size, "derived")


@dataclass
class StepContext:
    """Everything one step's tasks share while the step runs."""

    name: str
    kind: str
    namespace: str
    params: dict
    queue: WorkQueue | None = None
    completions: CompletionSet | None = None
    download: DownloadConfig | None = None
    bandwidth: int = 0
    url_batches: list[list[str]] = field(default_factory=list)
    partitions: list[list[str]] = field(default_factory=list)
    slot_owner: dict[int, str] = field(default_factory=dict)
    slot_done: set[int] = field(default_factory=set)
    data_processed: int = 0
    fetch_stats: list[FetchStats] = field(default_factory=list)
    service_pods: list[str] = field(default_factory=list)
    respawns: int = 0


class _Task:
    def __init__(self, runtime: "PipelineRuntime", ctx: StepContext, pod: Pod):
        self.runtime = runtime
        self.ctx = ctx
        self.pod = pod

    def _outcome(self, busy: bool, input_bytes: int = 0, **net) -> TickOutcome:
        requests = self.pod.spec.requests
        cpu = requests.cpu_millicores if busy else requests.cpu_millicores // IDLE_CPU_DIVISOR
        return TickOutcome(
            busy=busy,
            cpu_millicores_used=cpu,
            memory_bytes_used=working_set(input_bytes, requests.memory_bytes),
            **net,
        )

    def advance(self, now: int) -> TickOutcome:
        raise NotImplementedError


class QueueServiceTask(_Task):
    """Holds the queue's resources for the step; stopped by the runner."""

    def advance(self, now: int) -> TickOutcome:
        return self._outcome(busy=False)


class CoordinatorTask(_Task):
    """Seeds the queue once, then monitors until every message is done."""

    def advance(self, now: int) -> TickOutcome:
        queue = self.ctx.queue
        if queue.total_pushed == 0:
            for batch in self.ctx.url_batches:
                queue.push(encode_url_list(batch))
            return self._outcome(busy=True)
        if queue.drained:
            out = self._outcome(busy=False)
            out.done = True
            return out
        return self._outcome(busy=False)


class DownloadWorkerTask(_Task):
    """claim -> transfer window -> (effects + ack) loop until the queue drains."""

    def __init__(self, runtime, ctx, pod):
        super().__init__(runtime, ctx, pod)
        self._message = None
        self._finish_tick = 0
        self._planned_bytes = 0
        self._rx_left = 0

    def advance(self, now: int) -> TickOutcome:
        ctx = self.ctx
        queue = ctx.queue
        if self._message is None:
            msg = queue.claim(self.pod.full_name, ctx.download.lease_ticks, now)
            if msg is None:
                if queue.drained:
                    out = self._outcome(busy=False)
                    out.done = True
                    return out
                return self._outcome(busy=False)
            self._message = msg
            urls = decode_url_list(msg.payload)
            pending = [u for u in urls if u not in ctx.completions]
            self._planned_bytes = sum(
                self.runtime.catalog.section_size(u, ctx.download.section) for u in pending
            )
            duration = max(1, -(-self._planned_bytes // ctx.bandwidth)) if ctx.bandwidth else 1
            self._finish_tick = now + duration - 1
            self._rx_left = self._planned_bytes

        if now >= self._finish_tick:
            return self._complete(now)
        rx = self._rx_left // (self._finish_tick - now + 1)
        self._rx_left -= rx
        return self._outcome(busy=True, input_bytes=self._planned_bytes, net_rx_bytes=rx)

    def _complete(self, now: int) -> TickOutcome:
        ctx = self.ctx
        msg = self._message
        urls = decode_url_list(msg.payload)
        stats = FetchStats()
        fetched, _new = process_message(
            msg.id,
            urls,
            self.runtime.fetcher,
            ctx.completions,
            self.runtime.cluster.store,
            ctx.download,
            stats=stats,
        )
        if stats.attempts:
            ctx.fetch_stats.append(stats)
        ctx.data_processed += fetched
        put_bytes = 0
        if fetched:
            key = merged_key(ctx.download.key_prefix, msg.id)
            put_bytes = self.runtime.cluster.store.stat(
                ctx.namespace, ctx.download.output_bucket, key
            ).size_bytes
        try:
            ctx.queue.ack(msg.id, self.pod.full_name)
        except (StaleLease, UnknownMessage):
            pass  # lease moved on, or the other claimant already acked; our
            # effects are idempotent either way
        rx = self._rx_left
        self._message = None
        self._planned_bytes = 0
        self._rx_left = 0
        return self._outcome(busy=True, input_bytes=fetched, net_rx_bytes=rx, net_tx_bytes=put_bytes)


class TrainTask(_Task):
    """Digest-reduce a sample of merged containers into a model object."""

    def __init__(self, runtime, ctx, pod):
        super().__init__(runtime, ctx, pod)
        params = ctx.params
        store = runtime.cluster.store
        keys = store.list(ctx.namespace, params["input_bucket"], "merged/")
        self._keys = keys[: params["sample_containers"]]
        self._input_bytes = 0
        for key in self._keys:
            blob = store.get(ctx.namespace, params["input_bucket"], key)
            self._input_bytes += len(MergedContainer.decode(blob).payload)
        self._ticks = params["ticks"]
        self._elapsed = 0
        self._rx_left = self._input_bytes

    def advance(self, now: int) -> TickOutcome:
        self._elapsed += 1
        if self._elapsed < self._ticks:
            rx = self._rx_left // (self._ticks - self._elapsed + 1)
            self._rx_left -= rx
            return self._outcome(busy=True, input_bytes=self._input_bytes, net_rx_bytes=rx)
        ctx = self.ctx
        store = self.runtime.cluster.store
        params = ctx.params
        etags = [store.stat(ctx.namespace, params["input_bucket"], k).etag for k in self._keys]
        model = digest_expand("model:" + ",".join(etags), params["model_size_bytes"])
        store.put(ctx.namespace, params["output_bucket"], params["model_key"], model)
        ctx.data_processed += self._input_bytes
        out = self._outcome(
            busy=True,
            input_bytes=self._input_bytes,
            net_rx_bytes=self._rx_left,
            net_tx_bytes=len(model),
        )
        self._rx_left = 0
        out.done = True
        return out


class InferTask(_Task):
    """Run one partition of containers through the stored model."""

    def __init__(self, runtime, ctx, pod, slot: int):
        super().__init__(runtime, ctx, pod)
        self.slot = slot
        self._keys = ctx.partitions[slot]
        self._ticks = max(1, len(self._keys) * ctx.params["ticks_per_item"])
        self._elapsed = 0
        store = runtime.cluster.store
        self._input_bytes = 0
        for key in self._keys:
            blob = store.get(ctx.namespace, ctx.params["input_bucket"], key)
            self._input_bytes += len(MergedContainer.decode(blob).payload)
        self._rx_left = self._input_bytes

    def advance(self, now: int) -> TickOutcome:
        self._elapsed += 1
        if self._elapsed < self._ticks:
            rx = self._rx_left // (self._ticks - self._elapsed + 1)
            self._rx_left -= rx
            return self._outcome(busy=True, input_bytes=self._input_bytes, net_rx_bytes=rx)
        ctx = self.ctx
        store = self.runtime.cluster.store
        params = ctx.params
        tx = 0
        model_etag = store.stat(ctx.namespace, params["model_bucket"], params["model_key"]).etag
        for key in self._keys:
            blob = store.get(ctx.namespace, params["input_bucket"], key)
            payload_len = len(MergedContainer.decode(blob).payload)
            out_size = max(1, round(payload_len * params["output_fraction"]))
            obj_etag = store.stat(ctx.namespace, params["input_bucket"], key).etag
            content = digest_expand(f"pred:{model_etag}:{obj_etag}", out_size)
            store.put(
                ctx.namespace,
                params["output_bucket"],
                "pred/" + key.rsplit("/", 1)[-1],
                content,
            )
            tx += out_size
        ctx.data_processed += self._input_bytes
        ctx.slot_done.add(self.slot)
        out = self._outcome(
            busy=True,
            input_bytes=self._input_bytes,
            net_rx_bytes=self._rx_left,
            net_tx_bytes=tx,
        )
        self._rx_left = 0
        out.done = True
        return out


class SummaryTask(_Task):
    """Emit the run-so-far statistics as a machine-readable object."""

    def advance(self, now: int) -> TickOutcome:
        ctx = self.ctx
        store = self.runtime.cluster.store
        params = ctx.params
        read_bytes = 0
        for key in store.list(ctx.namespace, params["input_bucket"]):
            read_bytes += store.stat(ctx.namespace, params["input_bucket"], key).size_bytes
        stats = {
            "schema_version": 1,
            "steps": [s.to_dict() for s in self.runtime.completed_summaries],
        }
        content = json.dumps(stats, sort_keys=True, indent=1).encode("utf-8")
        store.put(ctx.namespace, params["output_bucket"], params["output_key"], content)
        ctx.data_processed += read_bytes
        out = self._outcome(
            busy=True, input_bytes=read_bytes, net_rx_bytes=read_bytes, net_tx_bytes=len(content)
        )
        out.done = True
        return out


class PipelineRuntime(TaskRuntime):
    """Binds pods to task objects and owns per-step shared state."""

    def __init__(self, cluster: Cluster, catalog: SourceCatalog, fetcher):
        self.cluster = cluster
        self.catalog = catalog
        self.fetcher = fetcher
        self.contexts: dict[str, StepContext] = {}
        self.completed_summaries: list[StepSummary] = []
        self._tasks: dict[str, _Task] = {}

    def begin_tick(self, now: int) -> None:
        self.cluster.queues.expire_all(now)

    def set_transfer_fault_rate(self, rate: float) -> None:
        if isinstance(self.fetcher, SimFetcher):
            self.fetcher.fault_rate = rate

    def forget_pod(self, full_name: str) -> None:
        task = self._tasks.pop(full_name, None)
        if isinstance(task, InferTask):
            ctx = task.ctx
            if ctx.slot_owner.get(task.slot) == full_name and task.slot not in ctx.slot_done:
                del ctx.slot_owner[task.slot]

    def advance_pod(self, pod: Pod, now: int) -> TickOutcome:
        task = self._tasks.get(pod.full_name)
        if task is None:
            task = self._make_task(pod)
            self._tasks[pod.full_name] = task
        # cleanup on done/failed happens via forget_pod from the control loop
        return task.advance(now)

    def _make_task(self, pod: Pod) -> _Task:
        step = pod.spec.labels.get("step", "")
        ctx = self.contexts[step]
        role = pod.spec.task
        if role == "queue-service":
            return QueueServiceTask(self, ctx, pod)
        if role == "coordinator":
            return CoordinatorTask(self, ctx, pod)
        if role == "download-worker":
            return DownloadWorkerTask(self, ctx, pod)
        if role == "train":
            return TrainTask(self, ctx, pod)
        if role == "infer":
            return InferTask(self, ctx, pod, self._assign_slot(ctx, pod))
        if role == "summary":
            return SummaryTask(self, ctx, pod)
        raise ValueError(f"pod {pod.full_name!r} has unknown task {role!r}")

    def _assign_slot(self, ctx: StepContext, pod: Pod) -> int:
        for slot in range(len(ctx.partitions)):
            if slot in ctx.slot_done or slot in ctx.slot_owner:
                continue
            ctx.slot_owner[slot] = pod.full_name
            return slot
        raise RuntimeError(f"no free work slot for pod {pod.full_name!r}")
