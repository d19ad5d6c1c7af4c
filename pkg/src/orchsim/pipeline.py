"""Declarative multi-step workflow spec and runner.

A pipeline is a JSON document naming an ordered list of steps over one
namespace: a queue-driven download fan-out, single-pod stages, an evenly
partitioned fan-out, and a summary emitter. Each step materializes as a Job
(plus service pods for the queue step) and the control loop ticks until the
step completes. Steps can also run in isolation against an exported state
directory and must behave exactly as they would inside the full run.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .cluster import Cluster, PodPhase, PodSpec, TERMINAL_PHASES
from .controllers import ControlPlane, JobSpec, JobState
from .errors import (
    MissingInput,
    ParseError,
    RunFailed,
    ValidationError,
)
from .metrics import MetricsStore, StepSummary, render_table, summarize_step
from .object_store import ETAG_ALGORITHM, ObjectStore
from .resources import ResourceVector
from .seeding import derive_seed
from .tasks import PipelineRuntime, StepContext
from .transfer import (
    DownloadConfig,
    HttpFetcher,
    SimFetcher,
    SourceCatalog,
    build_catalog,
)
from .faults import FaultSchedule

STEP_KINDS = ("queue_fanout", "single", "partitioned_fanout", "summary")

# service pods (queue holder + coordinator) of a queue_fanout step
SERVICE_REQUESTS = ResourceVector(cpu_millicores=1000, gpu_count=0, memory_bytes=2_000_000_000)

DEFAULT_SUBSET_FRACTION = 0.5407
DEFAULT_MODEL_SIZE_FRACTION = 0.000838
DEFAULT_INFER_OUTPUT_FRACTION = 0.0236


def partition_even(n_items: int, k: int) -> list[int]:
    """Split n items into k parts whose sizes differ by at most one.

    Larger parts come first, so the result is deterministic and sums to n.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if n_items < 0:
        raise ValueError("n_items must be >= 0")
    q, r = divmod(n_items, k)
    return [q + 1] * r + [q] * (k - r)


# -- spec parsing --------------------------------------------------------------


@dataclass
class CatalogConfig:
    files: int = 1000
    sections: dict[str, float] = field(
        default_factory=lambda: {"ivt": DEFAULT_SUBSET_FRACTION, "other": 1 - DEFAULT_SUBSET_FRACTION}
    )
    total_bytes: int = 50_000_000
    subset_section: str = "ivt"
    seed: int | None = None


@dataclass
class QueueConfig:
    urls_per_message: int = 100
    lease_ticks: int = 60
    retry_limit: int = 3


@dataclass
class StepSpec:
    name: str
    kind: str
    workers: int
    requests: ResourceVector
    task: dict


@dataclass
class PipelineSpec:
    name: str
    namespace: str
    catalog: CatalogConfig
    queue: QueueConfig
    steps: list[StepSpec]
    tick_seconds: int = 1
    stall_limit: int = 500


def _require(obj: dict, context: str, required: tuple[str, ...], optional: tuple[str, ...]):
    unknown = set(obj) - set(required) - set(optional)
    if unknown:
        raise ParseError(f"unknown field {sorted(unknown)[0]!r} in {context}")
    missing = [k for k in required if k not in obj]
    if missing:
        raise ParseError(f"missing field {missing[0]!r} in {context}")


def _parse_task(kind: str, raw: dict, catalog: CatalogConfig) -> dict:
    if kind == "queue_fanout":
        _require(
            raw,
            "queue_fanout task",
            ("output_bucket",),
            ("fetch_parallelism", "bandwidth_bytes_per_tick", "queue_name", "completion_set"),
        )
        return {
            "output_bucket": str(raw["output_bucket"]),
            "fetch_parallelism": int(raw.get("fetch_parallelism", 20)),
            "bandwidth_bytes_per_tick": int(raw.get("bandwidth_bytes_per_tick", 2_000_000)),
            "queue_name": str(raw.get("queue_name", "url-batches")),
            "completion_set": str(raw.get("completion_set", "downloaded")),
        }
    if kind == "single":
        _require(
            raw,
            "single task",
            ("input_bucket", "output_bucket"),
            ("ticks", "sample_containers", "model_size_bytes", "model_key"),
        )
        default_model = max(1024, round(catalog.total_bytes * DEFAULT_MODEL_SIZE_FRACTION))
        size = raw.get("model_size_bytes")
        return {
            "input_bucket": str(raw["input_bucket"]),
            "output_bucket": str(raw["output_bucket"]),
            "ticks": int(raw.get("ticks", 20)),
            "sample_containers": int(raw.get("sample_containers", 1)),
            "model_size_bytes": int(size) if size is not None else default_model,
            "model_key": str(raw.get("model_key", "model/weights")),
        }
    if kind == "partitioned_fanout":
        _require(
            raw,
            "partitioned_fanout task",
            ("input_bucket", "model_bucket", "output_bucket"),
            ("model_key", "ticks_per_item", "output_fraction", "input_prefix"),
        )
        return {
            "input_bucket": str(raw["input_bucket"]),
            "model_bucket": str(raw["model_bucket"]),
            "model_key": str(raw.get("model_key", "model/weights")),
            "output_bucket": str(raw["output_bucket"]),
            "ticks_per_item": int(raw.get("ticks_per_item", 1)),
            "output_fraction": float(raw.get("output_fraction", DEFAULT_INFER_OUTPUT_FRACTION)),
            "input_prefix": str(raw.get("input_prefix", "merged/")),
        }
    if kind == "summary":
        _require(raw, "summary task", ("input_bucket", "output_bucket"), ("output_key",))
        return {
            "input_bucket": str(raw["input_bucket"]),
            "output_bucket": str(raw["output_bucket"]),
            "output_key": str(raw.get("output_key", "stats/summary.json")),
        }
    raise ParseError(f"unknown step kind {kind!r}")


def parse_spec(text: bytes | str) -> PipelineSpec:
    """Parse and structurally validate a pipeline spec document."""
    if isinstance(text, bytes):
        text = text.decode("utf-8")
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as err:
        raise ParseError(err.msg, line=err.lineno) from None
    if not isinstance(raw, dict):
        raise ParseError("pipeline spec must be a JSON object")
    _require(
        raw,
        "pipeline",
        ("name", "namespace", "steps"),
        ("catalog", "queue", "tick_seconds", "stall_limit"),
    )

    raw_catalog = raw.get("catalog", {})
    _require(
        raw_catalog,
        "catalog",
        (),
        ("files", "sections", "total_bytes", "subset_section", "seed"),
    )
    catalog = CatalogConfig()
    if "files" in raw_catalog:
        catalog.files = int(raw_catalog["files"])
    if "sections" in raw_catalog:
        catalog.sections = {str(k): float(v) for k, v in raw_catalog["sections"].items()}
    if "total_bytes" in raw_catalog:
        catalog.total_bytes = int(raw_catalog["total_bytes"])
    if "subset_section" in raw_catalog:
        catalog.subset_section = str(raw_catalog["subset_section"])
    elif "sections" in raw_catalog:
        catalog.subset_section = sorted(catalog.sections)[0]
    if raw_catalog.get("seed") is not None:
        catalog.seed = int(raw_catalog["seed"])

    raw_queue = raw.get("queue", {})
    _require(raw_queue, "queue", (), ("urls_per_message", "lease_ticks", "retry_limit"))
    queue = QueueConfig(
        urls_per_message=int(raw_queue.get("urls_per_message", 100)),
        lease_ticks=int(raw_queue.get("lease_ticks", 60)),
        retry_limit=int(raw_queue.get("retry_limit", 3)),
    )

    steps = []
    for i, raw_step in enumerate(raw["steps"]):
        context = f"steps[{i}]"
        _require(raw_step, context, ("name", "kind", "workers", "requests", "task"), ())
        kind = str(raw_step["kind"])
        if kind not in STEP_KINDS:
            raise ParseError(f"unknown step kind {kind!r} in {context}")
        try:
            requests = ResourceVector.from_dict(raw_step["requests"])
        except ValueError as err:
            raise ParseError(f"{err} in {context}") from None
        steps.append(
            StepSpec(
                name=str(raw_step["name"]),
                kind=kind,
                workers=int(raw_step["workers"]),
                requests=requests,
                task=_parse_task(kind, raw_step["task"], catalog),
            )
        )

    spec = PipelineSpec(
        name=str(raw["name"]),
        namespace=str(raw["namespace"]),
        catalog=catalog,
        queue=queue,
        steps=steps,
        tick_seconds=int(raw.get("tick_seconds", 1)),
        stall_limit=int(raw.get("stall_limit", 500)),
    )
    _validate_structure(spec)
    return spec


def _validate_structure(spec: PipelineSpec) -> None:
    names = [s.name for s in spec.steps]
    if len(set(names)) != len(names):
        raise ValidationError("duplicate step names")
    if not spec.steps:
        raise ValidationError("pipeline has no steps")
    if spec.catalog.files < 1:
        raise ValidationError("catalog.files must be >= 1")
    if spec.catalog.subset_section not in spec.catalog.sections:
        raise ValidationError(
            f"subset section {spec.catalog.subset_section!r} not in catalog sections"
        )
    if spec.queue.urls_per_message < 1 or spec.queue.lease_ticks < 1 or spec.queue.retry_limit < 1:
        raise ValidationError("queue settings must be >= 1")
    for step in spec.steps:
        if step.workers < 1:
            raise ValidationError(f"step {step.name!r}: workers must be >= 1")
        if step.kind in ("single", "summary") and step.workers != 1:
            raise ValidationError(f"step {step.name!r}: kind {step.kind!r} requires workers=1")


# -- cluster fixture -----------------------------------------------------------


@dataclass
class ClusterFixture:
    nodes: list[dict]
    namespaces: list[dict]


def parse_cluster_fixture(text: bytes | str) -> ClusterFixture:
    if isinstance(text, bytes):
        text = text.decode("utf-8")
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as err:
        raise ParseError(err.msg, line=err.lineno) from None
    _require(raw, "cluster fixture", ("nodes", "namespaces"), ())
    nodes = []
    for i, n in enumerate(raw["nodes"]):
        _require(
            n,
            f"nodes[{i}]",
            ("name", "cpu_millicores", "gpu_count", "memory_bytes"),
            ("labels",),
        )
        nodes.append(
            {
                "name": str(n["name"]),
                "cpu_millicores": int(n["cpu_millicores"]),
                "gpu_count": int(n["gpu_count"]),
                "memory_bytes": int(n["memory_bytes"]),
                "labels": {str(k): str(v) for k, v in n.get("labels", {}).items()},
            }
        )
    namespaces = []
    for i, ns in enumerate(raw["namespaces"]):
        _require(ns, f"namespaces[{i}]", ("name", "admin"), ("quota",))
        entry = {"name": str(ns["name"]), "admin": str(ns["admin"]), "quota": None}
        if ns.get("quota") is not None:
            try:
                entry["quota"] = ResourceVector.from_dict(ns["quota"])
            except ValueError as err:
                raise ParseError(f"{err} in namespaces[{i}]") from None
        namespaces.append(entry)
    return ClusterFixture(nodes=nodes, namespaces=namespaces)


def build_cluster(fixture: ClusterFixture, validate: bool = True) -> Cluster:
    cluster = Cluster(validate=validate)
    for n in fixture.nodes:
        cluster.register_node(
            n["name"],
            ResourceVector(n["cpu_millicores"], n["gpu_count"], n["memory_bytes"]),
            labels=n["labels"],
        )
    for ns in fixture.namespaces:
        cluster.create_namespace(ns["name"], quota=ns["quota"], admin=ns["admin"])
    return cluster


# -- validation ----------------------------------------------------------------


@dataclass(frozen=True)
class Issue:
    severity: str  # "error" | "warning"
    step: str
    message: str


def validate(spec: PipelineSpec, fixture: ClusterFixture) -> list[Issue]:
    """Cross-check a parsed spec against a cluster fixture; issues are data."""
    issues: list[Issue] = []
    ns_names = {ns["name"] for ns in fixture.namespaces}
    if spec.namespace not in ns_names:
        issues.append(Issue("error", "", f"namespace {spec.namespace!r} not in cluster fixture"))
        return issues
    quota = next(ns["quota"] for ns in fixture.namespaces if ns["name"] == spec.namespace)
    capacities = [
        ResourceVector(n["cpu_millicores"], n["gpu_count"], n["memory_bytes"])
        for n in fixture.nodes
    ]
    total_gpus = sum(c.gpu_count for c in capacities)

    produced: set[str] = set()
    for step in spec.steps:
        if not any(c.covers(step.requests) for c in capacities):
            issues.append(
                Issue("error", step.name, "no node can fit the step's pod template")
            )
        want = step.requests.scale(step.workers)
        if step.kind == "queue_fanout":
            want = want + SERVICE_REQUESTS.scale(2)
        if step.requests.gpu_count * step.workers > total_gpus:
            issues.append(
                Issue(
                    "warning",
                    step.name,
                    "parallelism exceeds cluster GPU capacity; step will stall",
                )
            )
        if quota is not None and quota.exceeded_by(want):
            issues.append(
                Issue(
                    "warning",
                    step.name,
                    "declared parallelism exceeds the namespace quota; "
                    f"admission will stall on {', '.join(quota.exceeded_by(want))}",
                )
            )
        # bucket dataflow closure
        task = step.task
        if step.kind == "single" and task["input_bucket"] not in produced:
            issues.append(
                Issue("error", step.name, f"input bucket {task['input_bucket']!r} is never produced")
            )
        if step.kind == "partitioned_fanout":
            for bucket_field in ("input_bucket", "model_bucket"):
                if task[bucket_field] not in produced:
                    issues.append(
                        Issue(
                            "error",
                            step.name,
                            f"input bucket {task[bucket_field]!r} is never produced",
                        )
                    )
        if step.kind == "summary" and task["input_bucket"] not in produced:
            issues.append(
                Issue("error", step.name, f"input bucket {task['input_bucket']!r} is never produced")
            )
        produced.add(task["output_bucket"])
    return issues


# -- run report ------------------------------------------------------------------


@dataclass
class RunReport:
    pipeline: str
    seed: int
    mode: str
    tick_seconds: int
    total_ticks: int
    summaries: list[StepSummary]
    fault_events_applied: list[dict]
    table: str
    data_digest: str
    digest: str
    etag_algorithm: str = ETAG_ALGORITHM
    schema_version: int = 1

    def to_json(self) -> str:
        doc = {
            "schema_version": self.schema_version,
            "pipeline": self.pipeline,
            "seed": self.seed,
            "mode": self.mode,
            "etag_algorithm": self.etag_algorithm,
            "tick_seconds": self.tick_seconds,
            "total_ticks": self.total_ticks,
            "steps": [s.to_dict() for s in self.summaries],
            "fault_events_applied": self.fault_events_applied,
            "table": self.table,
            "data_digest": self.data_digest,
            "digest": self.digest,
        }
        return json.dumps(doc, sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunReport":
        raw = json.loads(text)
        return cls(
            pipeline=raw["pipeline"],
            seed=raw["seed"],
            mode=raw["mode"],
            tick_seconds=raw["tick_seconds"],
            total_ticks=raw["total_ticks"],
            summaries=[StepSummary.from_dict(s) for s in raw["steps"]],
            fault_events_applied=raw["fault_events_applied"],
            table=raw["table"],
            data_digest=raw["data_digest"],
            digest=raw["digest"],
            etag_algorithm=raw["etag_algorithm"],
            schema_version=raw["schema_version"],
        )


def compute_data_digest(store: ObjectStore, namespace: str, exclude: set[str]) -> str:
    """Hash every data object's (bucket, key, etag); report buckets excluded."""
    material = []
    for bucket in store.buckets(namespace):
        if bucket in exclude:
            continue
        for key in store.list(namespace, bucket):
            material.append(f"{bucket}/{key}:{store.stat(namespace, bucket, key).etag}")
    return hashlib.sha256("\n".join(material).encode("utf-8")).hexdigest()


def compute_full_digest(data_digest: str, summaries: list[StepSummary]) -> str:
    doc = json.dumps([s.to_dict() for s in summaries], sort_keys=True)
    return hashlib.sha256((data_digest + "\n" + doc).encode("utf-8")).hexdigest()


# -- state export/import ----------------------------------------------------------


def export_state(
    cluster: Cluster, path: Path | str, summaries: list[StepSummary] | None = None
) -> None:
    root = Path(path)
    cluster.store.export_dir(root / "objects")
    for queue in cluster.queues.all_queues():
        target = root / "queues" / queue.namespace / (queue.name + ".jsonl")
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text(queue.dump_lines() + "\n")
    for cset in cluster.queues.all_completion_sets():
        target = root / "completions" / cset.namespace / (cset.name + ".json")
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text(json.dumps({"keys": cset.keys()}, indent=1))
    if summaries is not None:
        root.mkdir(parents=True, exist_ok=True)
        (root / "summaries.json").write_text(
            json.dumps([s.to_dict() for s in summaries], sort_keys=True, indent=1)
        )


def load_state_summaries(path: Path | str) -> list[StepSummary]:
    target = Path(path) / "summaries.json"
    if not target.is_file():
        return []
    return [StepSummary.from_dict(raw) for raw in json.loads(target.read_text())]


def import_state(cluster: Cluster, path: Path | str) -> None:
    root = Path(path)
    cluster.store.import_dir(root / "objects")
    queues_dir = root / "queues"
    if queues_dir.is_dir():
        for f in sorted(queues_dir.glob("*/*.jsonl")):
            namespace, name = f.parent.name, f.stem
            if not cluster.queues.has_queue(namespace, name):
                cluster.queues.create_queue(namespace, name)
            cluster.queues.queue(namespace, name).load_lines(f.read_text())
    comp_dir = root / "completions"
    if comp_dir.is_dir():
        for f in sorted(comp_dir.glob("*/*.json")):
            namespace, name = f.parent.name, f.stem
            if not cluster.queues.has_completion_set(namespace, name):
                cluster.queues.create_completion_set(namespace, name)
            cluster.queues.completion_set(namespace, name).load_keys(
                json.loads(f.read_text())["keys"]
            )


# -- runner -----------------------------------------------------------------------


@dataclass
class RunResult:
    report: RunReport
    cluster: Cluster
    metrics: MetricsStore
    control: ControlPlane
    runtime: PipelineRuntime
    catalog: SourceCatalog
    summaries: list[StepSummary]


class Runner:
    """Drives one pipeline (or one isolated step) over a fresh cluster."""

    def __init__(
        self,
        spec: PipelineSpec,
        fixture: ClusterFixture,
        seed: int = 0,
        faults: FaultSchedule | None = None,
        mode: str = "sim",
        catalog_url: str | None = None,
        store_root: Path | str | None = None,
    ):
        if mode not in ("sim", "integration"):
            raise ValueError(f"unknown mode {mode!r}")
        if mode == "integration" and not catalog_url:
            raise ValueError("integration mode needs a catalog server URL")
        self.spec = spec
        self.fixture = fixture
        self.seed = seed
        self.mode = mode
        self.cluster = build_cluster(fixture)
        if store_root is not None:
            self.cluster.attach_store(
                ObjectStore(
                    clock=lambda: self.cluster.now,
                    root=store_root,
                    namespace_guard=lambda ns: ns in self.cluster.namespaces,
                )
            )
        catalog_seed = spec.catalog.seed if spec.catalog.seed is not None else derive_seed(seed, "catalog")
        self.catalog = build_catalog(
            files=spec.catalog.files,
            sections=spec.catalog.sections,
            total_bytes=spec.catalog.total_bytes,
            subset_section=spec.catalog.subset_section,
            seed=catalog_seed,
        )
        if mode == "sim":
            fetcher = SimFetcher(self.catalog)
        else:
            fetcher = HttpFetcher(catalog_url)
        self.metrics = MetricsStore(self.cluster)
        self.runtime = PipelineRuntime(self.cluster, self.catalog, fetcher)
        self.control = ControlPlane(self.cluster, runtime=self.runtime, metrics=self.metrics)
        if faults is not None:
            for ev in faults.events:
                self.control.add_fault_event(ev.tick, ev.kind, ev.target, ev.value)
        self._report_buckets: set[str] = {
            s.task["output_bucket"] for s in spec.steps if s.kind == "summary"
        }

    # -- full run -------------------------------------------------------------

    def run(self) -> RunResult:
        issues = validate(self.spec, self.fixture)
        errors = [i for i in issues if i.severity == "error"]
        if errors:
            first = errors[0]
            raise RunFailed(first.step or "dataflow", f"validation: {first.message}")
        summaries = []
        for step in self.spec.steps:
            summaries.append(self._run_one_step(step))
        return self._result(summaries)

    def _result(self, summaries: list[StepSummary]) -> RunResult:
        data_digest = compute_data_digest(
            self.cluster.store, self.spec.namespace, self._report_buckets
        )
        digest = compute_full_digest(data_digest, summaries)
        report = RunReport(
            pipeline=self.spec.name,
            seed=self.seed,
            mode=self.mode,
            tick_seconds=self.spec.tick_seconds,
            total_ticks=self.cluster.now,
            summaries=summaries,
            fault_events_applied=list(self.control.applied_events),
            table=render_table(summaries, self.spec.tick_seconds),
            data_digest=data_digest,
            digest=digest,
        )
        return RunResult(
            report=report,
            cluster=self.cluster,
            metrics=self.metrics,
            control=self.control,
            runtime=self.runtime,
            catalog=self.catalog,
            summaries=summaries,
        )

    # -- single step ------------------------------------------------------------

    def run_step(
        self,
        step_name: str,
        pre_state: Path | str | None = None,
        out_state: Path | str | None = None,
    ) -> RunResult:
        """Run exactly one step against imported pre-state, then export."""
        step = next((s for s in self.spec.steps if s.name == step_name), None)
        if step is None:
            raise ValidationError(f"no step named {step_name!r}")
        if pre_state is not None:
            import_state(self.cluster, pre_state)
            self.runtime.completed_summaries.extend(load_state_summaries(pre_state))
        self._check_inputs(step)
        summary = self._run_one_step(step)
        if out_state is not None:
            export_state(self.cluster, out_state, summaries=self.runtime.completed_summaries)
        return self._result([summary])

    def _check_inputs(self, step: StepSpec) -> None:
        store = self.cluster.store
        ns = self.spec.namespace
        task = step.task
        if step.kind == "single":
            if not store.has_bucket(ns, task["input_bucket"]) or not store.list(
                ns, task["input_bucket"]
            ):
                raise MissingInput(f"bucket {task['input_bucket']!r} is empty or missing")
        elif step.kind == "partitioned_fanout":
            if not store.has_bucket(ns, task["input_bucket"]) or not store.list(
                ns, task["input_bucket"], task["input_prefix"]
            ):
                raise MissingInput(f"bucket {task['input_bucket']!r} is empty or missing")
            if not store.has_bucket(ns, task["model_bucket"]):
                raise MissingInput(f"bucket {task['model_bucket']!r} is missing")
            if task["model_key"] not in store.list(ns, task["model_bucket"]):
                raise MissingInput(f"object {task['model_bucket']}/{task['model_key']} is missing")
        elif step.kind == "summary":
            if not store.has_bucket(ns, task["input_bucket"]):
                raise MissingInput(f"bucket {task['input_bucket']!r} is missing")

    # -- step machinery -----------------------------------------------------------

    def _run_one_step(self, step: StepSpec) -> StepSummary:
        ctx = self._materialize(step)
        last_activity = self.cluster.now
        last_counter = self._activity_counter()
        while not self._step_complete(step, ctx):
            report = self.control.control_loop_tick()
            self._respawn_services(step, ctx)
            counter = self._activity_counter()
            moved = (
                counter != last_counter
                or report.bindings
                or report.pods_created
                or report.pods_completed
                or report.pods_failed
                or report.pods_evicted
            )
            if moved:
                last_activity = self.cluster.now
                last_counter = counter
            elif self.cluster.now - last_activity >= self.spec.stall_limit:
                raise RunFailed(step.name, self._diagnose(step))
        self._finalize(step, ctx)
        summary = summarize_step(self.cluster, self.metrics, step.name, ctx.data_processed)
        self.runtime.completed_summaries.append(summary)
        return summary

    def _respawn_services(self, step: StepSpec, ctx: StepContext) -> None:
        """Replace dead queue/coordinator pods; their state is step-level."""
        for full in list(ctx.service_pods):
            pod = self.cluster.pods.get(full)
            if pod is None or pod.phase not in (PodPhase.EVICTED, PodPhase.FAILED):
                continue
            role = pod.spec.task
            suffix = pod.spec.labels.get("role", "svc")
            ctx.respawns += 1
            replacement = self.cluster.admit_pod(
                PodSpec(
                    name=f"{step.name}-{suffix}-r{ctx.respawns}",
                    namespace=self.spec.namespace,
                    requests=SERVICE_REQUESTS,
                    task=role,
                    labels=dict(pod.spec.labels),
                )
            )
            ctx.service_pods.remove(full)
            ctx.service_pods.append(replacement)

    def _activity_counter(self) -> int:
        return self.cluster.queues.op_count + self.control.busy_advances

    def _diagnose(self, step: StepSpec) -> str:
        for pod in self.cluster.pending_pods():
            if not self.control.scheduler.feasible_nodes(pod.full_name):
                return f"no feasible node for pod {pod.full_name!r}"
        status = self.control.job_status(self.spec.namespace, step.name)
        if status.stalled_reason:
            return f"admission stalled: {status.stalled_reason}"
        return "no progress"

    def _ensure_bucket(self, bucket: str) -> None:
        if not self.cluster.store.has_bucket(self.spec.namespace, bucket):
            self.cluster.store.create_bucket(self.spec.namespace, bucket)

    def _materialize(self, step: StepSpec) -> StepContext:
        ns = self.spec.namespace
        ctx = StepContext(
            name=step.name, kind=step.kind, namespace=ns, params=dict(step.task)
        )
        self._ensure_bucket(step.task["output_bucket"])
        labels = {"step": step.name}

        if step.kind == "queue_fanout":
            qname = step.task["queue_name"]
            if not self.cluster.queues.has_queue(ns, qname):
                self.cluster.queues.create_queue(ns, qname)
            ctx.queue = self.cluster.queues.queue(ns, qname)
            sname = step.task["completion_set"]
            if not self.cluster.queues.has_completion_set(ns, sname):
                self.cluster.queues.create_completion_set(ns, sname)
            ctx.completions = self.cluster.queues.completion_set(ns, sname)
            ctx.bandwidth = step.task["bandwidth_bytes_per_tick"]
            ctx.download = DownloadConfig(
                section=self.catalog.subset_section,
                namespace=ns,
                output_bucket=step.task["output_bucket"],
                completion_set=sname,
                parallelism=step.task["fetch_parallelism"],
                retry_limit=self.spec.queue.retry_limit,
                lease_ticks=self.spec.queue.lease_ticks,
            )
            urls = self.catalog.urls()
            size = self.spec.queue.urls_per_message
            ctx.url_batches = [urls[i : i + size] for i in range(0, len(urls), size)]
            # dedicated queue pod and a seed-then-monitor coordinator
            for role, suffix in (("queue-service", "queue"), ("coordinator", "coordinator")):
                full = self.cluster.admit_pod(
                    PodSpec(
                        name=f"{step.name}-{suffix}",
                        namespace=ns,
                        requests=SERVICE_REQUESTS,
                        task=role,
                        labels=dict(labels, role=suffix),
                    )
                )
                ctx.service_pods.append(full)
            template_task = "download-worker"
            completions = step.workers
        elif step.kind == "single":
            template_task = "train"
            completions = 1
        elif step.kind == "partitioned_fanout":
            keys = self.cluster.store.list(ns, step.task["input_bucket"], step.task["input_prefix"])
            sizes = partition_even(len(keys), step.workers)
            offset = 0
            for size in sizes:
                ctx.partitions.append(keys[offset : offset + size])
                offset += size
            template_task = "infer"
            completions = step.workers
        else:  # summary
            template_task = "summary"
            completions = 1

        self.runtime.contexts[step.name] = ctx
        self.control.register_job(
            JobSpec(
                name=step.name,
                namespace=ns,
                parallelism=step.workers,
                completions=completions,
                template=PodSpec(
                    name=step.name,
                    namespace=ns,
                    requests=step.requests,
                    task=template_task,
                    labels=dict(labels, role="worker"),
                ),
            )
        )
        return ctx

    def _step_complete(self, step: StepSpec, ctx: StepContext) -> bool:
        status = self.control.job_status(self.spec.namespace, step.name)
        if status.state is not JobState.COMPLETE:
            return False
        for full in ctx.service_pods:
            pod = self.cluster.pods.get(full) or self.cluster.removed_pods.get(full)
            if pod is not None and pod.spec.task == "coordinator":
                if pod.phase not in TERMINAL_PHASES:
                    return False
        return True

    def _finalize(self, step: StepSpec, ctx: StepContext) -> None:
        for full in ctx.service_pods:
            pod = self.cluster.pods.get(full)
            if pod is None:
                continue
            if pod.phase is PodPhase.RUNNING:
                self.cluster.succeed_pod(full)
                self.runtime.forget_pod(full)
            elif pod.phase in (PodPhase.PENDING, PodPhase.SCHEDULED):
                self.cluster.remove_pod(full)
                self.runtime.forget_pod(full)
