"""Authoritative store of nodes, namespaces, quotas, and pods.

All mutations are applied one at a time in submission order (the store is a
single serialization point); capacity and quota invariants are re-checked
after every mutation while validation is enabled. Quota is charged when a
pod is admitted (Pending) and released when it reaches a terminal phase.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from enum import Enum

from .errors import (
    DuplicateName,
    IllegalTransition,
    InvariantViolation,
    QuotaExceeded,
    UnknownNamespace,
    UnknownNode,
    UnknownPod,
)
from .object_store import ObjectStore
from .resources import ZERO, ResourceVector
from .workqueue import QueueRegistry

_NAME_RE = re.compile(r"^[A-Za-z0-9][A-Za-z0-9._-]*$")


def _check_name(kind: str, name: str) -> None:
    if not _NAME_RE.match(name):
        raise ValueError(f"invalid {kind} name {name!r}")


class PodPhase(str, Enum):
    PENDING = "Pending"
    SCHEDULED = "Scheduled"
    RUNNING = "Running"
    SUCCEEDED = "Succeeded"
    FAILED = "Failed"
    EVICTED = "Evicted"


TERMINAL_PHASES = {PodPhase.SUCCEEDED, PodPhase.FAILED, PodPhase.EVICTED}

# Evicted is reachable from Scheduled too: a node can go offline before the
# pod's first running tick. Evicted pods never resume; controllers replace.
_LEGAL = {
    (PodPhase.PENDING, PodPhase.SCHEDULED),
    (PodPhase.SCHEDULED, PodPhase.RUNNING),
    (PodPhase.SCHEDULED, PodPhase.EVICTED),
    (PodPhase.RUNNING, PodPhase.SUCCEEDED),
    (PodPhase.RUNNING, PodPhase.FAILED),
    (PodPhase.RUNNING, PodPhase.EVICTED),
}


@dataclass
class Node:
    name: str
    capacity: ResourceVector
    ready: bool = True
    labels: dict[str, str] = field(default_factory=dict)
    allocated: ResourceVector = ZERO

    @property
    def free(self) -> ResourceVector:
        return self.capacity.subtract(self.allocated)


@dataclass
class Namespace:
    name: str
    admin: str
    quota: ResourceVector | None = None
    usage: ResourceVector = ZERO


@dataclass
class PodSpec:
    name: str
    namespace: str
    requests: ResourceVector = ZERO
    task: str = ""
    restartable: bool = True
    labels: dict[str, str] = field(default_factory=dict)
    node_selector: dict[str, str] = field(default_factory=dict)


@dataclass
class Pod:
    spec: PodSpec
    phase: PodPhase = PodPhase.PENDING
    node: str | None = None
    owner: str | None = None
    start_tick: int | None = None
    end_tick: int | None = None
    seq: int = 0  # admission order, monotone across the cluster

    @property
    def full_name(self) -> str:
        return f"{self.spec.namespace}/{self.spec.name}"


class Cluster:
    """The serialized store every other module mutates through."""

    def __init__(self, validate: bool = True):
        self.now = 0
        self.nodes: dict[str, Node] = {}
        self.namespaces: dict[str, Namespace] = {}
        self.pods: dict[str, Pod] = {}
        self.removed_pods: dict[str, Pod] = {}
        self.queues = QueueRegistry(namespace_guard=lambda ns: ns in self.namespaces)
        self.store = ObjectStore(
            clock=lambda: self.now, namespace_guard=lambda ns: ns in self.namespaces
        )
        self._seq = 0
        self._validate = validate

    def attach_store(self, store: ObjectStore) -> None:
        """Swap in a differently-backed object store (e.g. filesystem)."""
        self.store = store

    # -- nodes ---------------------------------------------------------------

    def register_node(
        self,
        name: str,
        capacity: ResourceVector,
        labels: dict[str, str] | None = None,
    ) -> Node:
        _check_name("node", name)
        if name in self.nodes:
            raise DuplicateName(f"node {name!r} already registered")
        node = Node(name=name, capacity=capacity, labels=dict(labels or {}))
        self.nodes[name] = node
        self._after_mutation()
        return node

    def set_node_ready(self, name: str, ready: bool) -> list[str]:
        """Mark a node (un)ready; taking it offline evicts every bound pod."""
        node = self.nodes.get(name)
        if node is None:
            raise UnknownNode(f"no node {name!r}")
        evicted: list[str] = []
        node.ready = ready
        if not ready:
            for pod in self._pods_in_seq_order():
                if pod.node == name and pod.phase in (PodPhase.SCHEDULED, PodPhase.RUNNING):
                    self._transition(pod, PodPhase.EVICTED)
                    pod.end_tick = self.now
                    self._release(pod)
                    evicted.append(pod.full_name)
            node.allocated = ZERO
        self._after_mutation()
        return evicted

    # -- namespaces ----------------------------------------------------------

    def create_namespace(
        self, name: str, quota: ResourceVector | None = None, admin: str = "admin"
    ) -> Namespace:
        _check_name("namespace", name)
        if name in self.namespaces:
            raise DuplicateName(f"namespace {name!r} already exists")
        ns = Namespace(name=name, admin=admin, quota=quota)
        self.namespaces[name] = ns
        self._after_mutation()
        return ns

    def namespace_usage(self, name: str) -> ResourceVector:
        ns = self.namespaces.get(name)
        if ns is None:
            raise UnknownNamespace(f"no namespace {name!r}")
        return ns.usage

    # -- pods ----------------------------------------------------------------

    def admit_pod(self, spec: PodSpec, owner: str | None = None) -> str:
        _check_name("pod", spec.name)
        ns = self.namespaces.get(spec.namespace)
        if ns is None:
            raise UnknownNamespace(f"no namespace {spec.namespace!r}")
        full = f"{spec.namespace}/{spec.name}"
        if full in self.pods or full in self.removed_pods:
            raise DuplicateName(f"pod {full!r} already exists")
        if ns.quota is not None:
            wanted = ns.usage + spec.requests
            violated = ns.quota.exceeded_by(wanted)
            if violated:
                raise QuotaExceeded(spec.namespace, violated)
        self._seq += 1
        pod = Pod(spec=spec, owner=owner, seq=self._seq)
        self.pods[full] = pod
        ns.usage = ns.usage + spec.requests
        self._after_mutation()
        return full

    def pod(self, full_name: str) -> Pod:
        pod = self.pods.get(full_name)
        if pod is None:
            raise UnknownPod(f"no pod {full_name!r}")
        return pod

    def bind_pod(self, full_name: str, node_name: str) -> None:
        pod = self.pod(full_name)
        node = self.nodes.get(node_name)
        if node is None:
            raise UnknownNode(f"no node {node_name!r}")
        if not node.ready:
            raise IllegalTransition(f"node {node_name!r} is not ready")
        if not node.free.covers(pod.spec.requests):
            raise IllegalTransition(f"node {node_name!r} lacks capacity for {full_name!r}")
        self._transition(pod, PodPhase.SCHEDULED)
        pod.node = node_name
        node.allocated = node.allocated + pod.spec.requests
        self._after_mutation()

    def start_pod(self, full_name: str) -> None:
        pod = self.pod(full_name)
        self._transition(pod, PodPhase.RUNNING)
        if pod.start_tick is None:
            pod.start_tick = self.now
        self._after_mutation()

    def succeed_pod(self, full_name: str) -> None:
        self._finish(full_name, PodPhase.SUCCEEDED)

    def fail_pod(self, full_name: str) -> None:
        self._finish(full_name, PodPhase.FAILED)

    def remove_pod(self, full_name: str) -> None:
        """Delete a pod outright (controller downscale); not a phase change."""
        pod = self.pod(full_name)
        if pod.phase not in TERMINAL_PHASES:
            self._release(pod)
            if pod.node is not None and pod.phase in (PodPhase.SCHEDULED, PodPhase.RUNNING):
                node = self.nodes[pod.node]
                node.allocated = node.allocated.subtract(pod.spec.requests)
        del self.pods[full_name]
        pod.end_tick = self.now
        self.removed_pods[full_name] = pod
        self._after_mutation()

    def _finish(self, full_name: str, phase: PodPhase) -> None:
        pod = self.pod(full_name)
        self._transition(pod, phase)
        pod.end_tick = self.now
        if pod.node is not None:
            node = self.nodes[pod.node]
            node.allocated = node.allocated.subtract(pod.spec.requests)
        self._release(pod)
        self._after_mutation()

    def _release(self, pod: Pod) -> None:
        ns = self.namespaces[pod.spec.namespace]
        ns.usage = ns.usage.subtract(pod.spec.requests)

    def _transition(self, pod: Pod, phase: PodPhase) -> None:
        if (pod.phase, phase) not in _LEGAL:
            raise IllegalTransition(
                f"pod {pod.full_name!r}: {pod.phase.value} -> {phase.value} is not allowed"
            )
        pod.phase = phase

    def _pods_in_seq_order(self) -> list[Pod]:
        return sorted(self.pods.values(), key=lambda p: p.seq)

    def pending_pods(self) -> list[Pod]:
        """Pending pods in (namespace, admission order)."""
        return sorted(
            (p for p in self.pods.values() if p.phase is PodPhase.PENDING),
            key=lambda p: (p.spec.namespace, p.seq),
        )

    def all_pod_records(self) -> list[Pod]:
        """Live plus removed pods, for metrics and summaries."""
        return sorted(
            list(self.pods.values()) + list(self.removed_pods.values()),
            key=lambda p: p.seq,
        )

    # -- invariants ----------------------------------------------------------

    def check_invariants(self) -> None:
        for node in self.nodes.values():
            if not node.capacity.covers(node.allocated):
                raise InvariantViolation(f"node {node.name!r}: allocated exceeds capacity")
            bound = ZERO
            for pod in self.pods.values():
                if pod.node == node.name and pod.phase in (
                    PodPhase.SCHEDULED,
                    PodPhase.RUNNING,
                ):
                    bound = bound + pod.spec.requests
            if bound != node.allocated:
                raise InvariantViolation(
                    f"node {node.name!r}: allocated {node.allocated} != bound sum {bound}"
                )
        for ns in self.namespaces.values():
            if ns.quota is not None and not ns.quota.covers(ns.usage):
                raise InvariantViolation(f"namespace {ns.name!r}: usage exceeds quota")
            charged = ZERO
            for pod in self.pods.values():
                if pod.spec.namespace == ns.name and pod.phase not in TERMINAL_PHASES:
                    charged = charged + pod.spec.requests
            if charged != ns.usage:
                raise InvariantViolation(
                    f"namespace {ns.name!r}: usage {ns.usage} != charged sum {charged}"
                )
        for pod in self.pods.values():
            if pod.phase in (PodPhase.SCHEDULED, PodPhase.RUNNING):
                if pod.node is None or not self.nodes[pod.node].ready:
                    raise InvariantViolation(
                        f"pod {pod.full_name!r} is {pod.phase.value} without a ready node"
                    )

    def _after_mutation(self) -> None:
        if self._validate:
            self.check_invariants()
