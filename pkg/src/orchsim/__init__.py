"""orchsim: a deterministic mini-orchestrator and workflow cluster simulator."""

from .cluster import Cluster, Node, Namespace, Pod, PodPhase, PodSpec
from .controllers import ControlPlane, JobSpec, JobState, JobStatus, ReplicaSetSpec, TickReport
from .metrics import MetricsStore, Sample, StepSummary, render_table
from .pipeline import (
    PipelineSpec,
    Runner,
    RunReport,
    parse_cluster_fixture,
    parse_spec,
    partition_even,
    validate,
)
from .resources import ResourceVector
from .scheduling import Binding, Scheduler
from .workqueue import CompletionSet, QueueRegistry, WorkQueue

__version__ = "0.1.0"

__all__ = [
    "Binding",
    "Cluster",
    "CompletionSet",
    "ControlPlane",
    "JobSpec",
    "JobState",
    "JobStatus",
    "MetricsStore",
    "Namespace",
    "Node",
    "PipelineSpec",
    "Pod",
    "PodPhase",
    "PodSpec",
    "QueueRegistry",
    "ReplicaSetSpec",
    "RunReport",
    "Runner",
    "Sample",
    "Scheduler",
    "StepSummary",
    "TickReport",
    "WorkQueue",
    "__version__",
    "parse_cluster_fixture",
    "parse_spec",
    "partition_even",
    "render_table",
    "validate",
]
