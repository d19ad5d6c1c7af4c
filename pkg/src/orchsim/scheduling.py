"""Deterministic pod scheduler.

First-fit over a most-free-GPU-first node order: feasible nodes are sorted
by (descending free GPU, descending free CPU, ascending name) and each
Pending pod binds to the first one. Capacity is updated as bindings land,
so later pods in the same pass see the shrunken free capacity. No
preemption, no priorities; node selectors are exact-match label subsets.
"""

from __future__ import annotations

from dataclasses import dataclass

from .cluster import Cluster, Pod, PodPhase


@dataclass(frozen=True)
class Binding:
    pod: str
    node: str
    tick: int


class Scheduler:
    def __init__(self, cluster: Cluster):
        self.cluster = cluster

    def feasible_nodes(self, pod_full_name: str) -> list[str]:
        """Ready nodes that can hold the pod, in binding-preference order."""
        pod = self.cluster.pod(pod_full_name)
        if pod.phase is not PodPhase.PENDING:
            raise ValueError(f"pod {pod_full_name!r} is not Pending")
        return [n.name for n in self._ordered_feasible(pod)]

    def _ordered_feasible(self, pod: Pod):
        selector = pod.spec.node_selector
        candidates = []
        for node in self.cluster.nodes.values():
            if not node.ready:
                continue
            if selector and any(node.labels.get(k) != v for k, v in selector.items()):
                continue
            if node.free.covers(pod.spec.requests):
                candidates.append(node)
        candidates.sort(key=lambda n: (-n.free.gpu_count, -n.free.cpu_millicores, n.name))
        return candidates

    def schedule_pending(self) -> list[Binding]:
        """Bind every bindable Pending pod; unbindable pods stay Pending."""
        bindings: list[Binding] = []
        for pod in self.cluster.pending_pods():
            feasible = self._ordered_feasible(pod)
            if not feasible:
                continue
            node = feasible[0]
            self.cluster.bind_pod(pod.full_name, node.name)
            bindings.append(Binding(pod=pod.full_name, node=node.name, tick=self.cluster.now))
        return bindings
