"""Namespace-scoped, lease-based at-least-once work queue.

Messages are claimed under a tick-bounded lease rather than destructively
popped: a worker that dies mid-message simply lets its lease expire and the
message returns to Ready for redelivery. An insert-only completion set lets
consumers turn at-least-once delivery into exactly-once side effects.
"""

from __future__ import annotations

import base64
import json
import threading
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable

from .errors import (
    DuplicateName,
    StaleLease,
    UnknownMessage,
    UnknownNamespace,
    UnknownQueue,
    UnknownSet,
)


class MessageState(str, Enum):
    READY = "Ready"
    LEASED = "Leased"
    DONE = "Done"


@dataclass
class QueueMessage:
    id: int
    payload: bytes
    state: MessageState = MessageState.READY
    lease_owner: str | None = None
    lease_expiry: int | None = None
    delivery_count: int = 0

    def dump_dict(self) -> dict:
        return {
            "id": self.id,
            "payload_b64": base64.b64encode(self.payload).decode("ascii"),
            "state": self.state.value,
            "lease_owner": self.lease_owner,
            "lease_expiry": self.lease_expiry,
            "delivery_count": self.delivery_count,
        }

    @classmethod
    def from_dump(cls, raw: dict) -> "QueueMessage":
        return cls(
            id=int(raw["id"]),
            payload=base64.b64decode(raw["payload_b64"]),
            state=MessageState(raw["state"]),
            lease_owner=raw.get("lease_owner"),
            lease_expiry=raw.get("lease_expiry"),
            delivery_count=int(raw.get("delivery_count", 0)),
        )


class WorkQueue:
    """FIFO-by-id message queue with atomic claim/ack under a single lock."""

    def __init__(self, namespace: str, name: str):
        self.namespace = namespace
        self.name = name
        self._messages: dict[int, QueueMessage] = {}
        self._next_id = 1
        self._lock = threading.Lock()
        self.op_count = 0  # monotone; progress signal for stall detection

    @property
    def qualified_name(self) -> str:
        return f"{self.namespace}/{self.name}"

    def push(self, payload: bytes) -> int:
        with self._lock:
            msg = QueueMessage(id=self._next_id, payload=payload)
            self._messages[msg.id] = msg
            self._next_id += 1
            self.op_count += 1
            return msg.id

    def claim(self, worker: str, lease_ticks: int, now: int) -> QueueMessage | None:
        """Lease the lowest-id Ready message to `worker`, or None if drained."""
        if lease_ticks < 1:
            raise ValueError("lease_ticks must be >= 1")
        with self._lock:
            for msg in sorted(self._messages.values(), key=lambda m: m.id):
                if msg.state is MessageState.READY:
                    msg.state = MessageState.LEASED
                    msg.lease_owner = worker
                    msg.lease_expiry = now + lease_ticks
                    msg.delivery_count += 1
                    self.op_count += 1
                    return msg
            return None

    def ack(self, message_id: int, worker: str) -> None:
        with self._lock:
            msg = self._messages.get(message_id)
            if msg is None or msg.state is MessageState.DONE:
                raise UnknownMessage(f"no ackable message {message_id} in {self.qualified_name}")
            if msg.state is not MessageState.LEASED or msg.lease_owner != worker:
                raise StaleLease(
                    f"worker {worker!r} no longer holds the lease on message {message_id}"
                )
            msg.state = MessageState.DONE
            msg.lease_owner = None
            msg.lease_expiry = None
            self.op_count += 1

    def expire_leases(self, now: int) -> list[int]:
        """Return expired leases to Ready; called once per control-loop tick."""
        redelivered = []
        with self._lock:
            for msg in sorted(self._messages.values(), key=lambda m: m.id):
                if msg.state is MessageState.LEASED and msg.lease_expiry is not None:
                    if msg.lease_expiry <= now:
                        msg.state = MessageState.READY
                        msg.lease_owner = None
                        msg.lease_expiry = None
                        redelivered.append(msg.id)
            if redelivered:
                self.op_count += 1
        return redelivered

    def counts(self) -> dict[str, int]:
        with self._lock:
            out = {"Ready": 0, "Leased": 0, "Done": 0}
            for msg in self._messages.values():
                out[msg.state.value] += 1
            return out

    @property
    def total_pushed(self) -> int:
        return self._next_id - 1

    @property
    def drained(self) -> bool:
        """True once every pushed message has been acked Done."""
        c = self.counts()
        return self.total_pushed > 0 and c["Ready"] == 0 and c["Leased"] == 0

    def messages(self) -> list[QueueMessage]:
        with self._lock:
            return sorted(self._messages.values(), key=lambda m: m.id)

    def dump_lines(self) -> str:
        """Debug/export format: one JSON message per line, all fields."""
        return "\n".join(json.dumps(m.dump_dict(), sort_keys=True) for m in self.messages())

    def load_lines(self, text: str) -> None:
        with self._lock:
            for line in text.splitlines():
                if not line.strip():
                    continue
                msg = QueueMessage.from_dump(json.loads(line))
                self._messages[msg.id] = msg
                self._next_id = max(self._next_id, msg.id + 1)


class CompletionSet:
    """Insert-only key set; `record` returns True exactly once per key."""

    def __init__(self, namespace: str, name: str):
        self.namespace = namespace
        self.name = name
        self._keys: set[str] = set()
        self._lock = threading.Lock()
        self.true_count = 0  # number of record() calls that returned True

    def record(self, key: str) -> bool:
        with self._lock:
            if key in self._keys:
                return False
            self._keys.add(key)
            self.true_count += 1
            return True

    def __contains__(self, key: str) -> bool:
        return key in self._keys

    def __len__(self) -> int:
        return len(self._keys)

    def keys(self) -> list[str]:
        return sorted(self._keys)

    def load_keys(self, keys: Iterable[str]) -> None:
        with self._lock:
            self._keys.update(keys)
            self.true_count = len(self._keys)


def split_qualified(caller_namespace: str, name: str) -> tuple[str, str]:
    """Resolve a bare or fully qualified name against the caller's namespace."""
    if "/" in name:
        ns, _, local = name.partition("/")
        if not ns or not local or "/" in local:
            raise ValueError(f"malformed qualified name {name!r}")
        return ns, local
    return caller_namespace, name


class QueueRegistry:
    """Per-namespace registries of queues and completion sets.

    Local names are scoped: two namespaces may each own a queue "q" without
    collision, and cross-namespace access requires the "namespace/q" form.
    """

    def __init__(self, namespace_guard: Callable[[str], bool] | None = None):
        self._queues: dict[tuple[str, str], WorkQueue] = {}
        self._sets: dict[tuple[str, str], CompletionSet] = {}
        self._guard = namespace_guard

    def _check_namespace(self, namespace: str) -> None:
        if self._guard is not None and not self._guard(namespace):
            raise UnknownNamespace(f"namespace {namespace!r} does not exist")

    def create_queue(self, namespace: str, name: str) -> WorkQueue:
        self._check_namespace(namespace)
        key = (namespace, name)
        if key in self._queues:
            raise DuplicateName(f"queue {namespace}/{name} already exists")
        queue = WorkQueue(namespace, name)
        self._queues[key] = queue
        return queue

    def create_completion_set(self, namespace: str, name: str) -> CompletionSet:
        self._check_namespace(namespace)
        key = (namespace, name)
        if key in self._sets:
            raise DuplicateName(f"completion set {namespace}/{name} already exists")
        cset = CompletionSet(namespace, name)
        self._sets[key] = cset
        return cset

    def queue(self, caller_namespace: str, name: str) -> WorkQueue:
        key = split_qualified(caller_namespace, name)
        queue = self._queues.get(key)
        if queue is None:
            raise UnknownQueue(f"no queue {key[1]!r} in namespace {key[0]!r}")
        return queue

    def completion_set(self, caller_namespace: str, name: str) -> CompletionSet:
        key = split_qualified(caller_namespace, name)
        cset = self._sets.get(key)
        if cset is None:
            raise UnknownSet(f"no completion set {key[1]!r} in namespace {key[0]!r}")
        return cset

    def has_queue(self, namespace: str, name: str) -> bool:
        return (namespace, name) in self._queues

    def has_completion_set(self, namespace: str, name: str) -> bool:
        return (namespace, name) in self._sets

    def all_queues(self) -> list[WorkQueue]:
        return [self._queues[k] for k in sorted(self._queues)]

    def all_completion_sets(self) -> list[CompletionSet]:
        return [self._sets[k] for k in sorted(self._sets)]

    def expire_all(self, now: int) -> dict[str, list[int]]:
        redelivered = {}
        for queue in self.all_queues():
            ids = queue.expire_leases(now)
            if ids:
                redelivered[queue.qualified_name] = ids
        return redelivered

    @property
    def op_count(self) -> int:
        return sum(q.op_count for q in self.all_queues())
