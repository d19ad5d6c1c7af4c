"""Fault schedules: scripted node churn, pod crashes, and transfer faults.

Nodes can join and leave the cluster at any tick; a pod_kill event crashes
the first matching pod at its next task advance (so it lands even on
single-tick tasks); transfer_fault_rate changes the injected fetch-failure
probability from its tick onward.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .errors import ParseError, ValidationError

FAULT_KINDS = ("node_offline", "node_online", "pod_kill", "transfer_fault_rate")


@dataclass(frozen=True)
class FaultEvent:
    tick: int
    kind: str
    target: str | None = None
    value: float | None = None


@dataclass
class FaultSchedule:
    events: list[FaultEvent] = field(default_factory=list)

    def sorted_events(self) -> list[FaultEvent]:
        return sorted(self.events, key=lambda e: (e.tick, e.kind, e.target or ""))


def parse_fault_schedule(text: bytes | str, node_names: set[str] | None = None) -> FaultSchedule:
    """Parse a faults file; node targets are checked against the fixture.

    Pod-kill targets are name prefixes of pods that only exist at runtime,
    so they are validated as non-empty strings only.
    """
    if isinstance(text, bytes):
        text = text.decode("utf-8")
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as err:
        raise ParseError(err.msg, line=err.lineno) from None
    if not isinstance(raw, dict) or "events" not in raw:
        raise ParseError("faults file must be an object with an 'events' list")
    unknown = set(raw) - {"events"}
    if unknown:
        raise ParseError(f"unknown field {sorted(unknown)[0]!r} in faults file")
    events = []
    for i, ev in enumerate(raw["events"]):
        context = f"events[{i}]"
        unknown = set(ev) - {"tick", "kind", "target", "value"}
        if unknown:
            raise ParseError(f"unknown field {sorted(unknown)[0]!r} in {context}")
        if "tick" not in ev or "kind" not in ev:
            raise ParseError(f"missing tick/kind in {context}")
        tick = int(ev["tick"])
        kind = str(ev["kind"])
        if tick < 0:
            raise ValidationError(f"{context}: tick must be non-negative")
        if kind not in FAULT_KINDS:
            raise ParseError(f"unknown fault kind {kind!r} in {context}")
        target = ev.get("target")
        value = ev.get("value")
        if kind in ("node_offline", "node_online"):
            if not target:
                raise ValidationError(f"{context}: {kind} needs a target node")
            if node_names is not None and target not in node_names:
                raise ValidationError(f"{context}: unknown node {target!r}")
        elif kind == "pod_kill":
            if not target:
                raise ValidationError(f"{context}: pod_kill needs a target name prefix")
        elif kind == "transfer_fault_rate":
            if value is None or not 0.0 <= float(value) < 1.0:
                raise ValidationError(f"{context}: transfer_fault_rate needs a value in [0, 1)")
            value = float(value)
        events.append(FaultEvent(tick=tick, kind=kind, target=target, value=value))
    return FaultSchedule(events=events)
