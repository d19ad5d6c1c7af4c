"""Resource quantities used for node capacity, pod requests, quotas, and usage.

All quantities are integers (millicores and bytes) so that repeated
add/subtract cycles can never drift the store's accounting.
"""

from __future__ import annotations

from dataclasses import dataclass

COMPONENTS = ("cpu_millicores", "gpu_count", "memory_bytes")


@dataclass(frozen=True)
class ResourceVector:
    cpu_millicores: int = 0
    gpu_count: int = 0
    memory_bytes: int = 0

    def __post_init__(self) -> None:
        for name in COMPONENTS:
            value = getattr(self, name)
            if not isinstance(value, int) or value < 0:
                raise ValueError(f"{name} must be a non-negative integer, got {value!r}")

    def __add__(self, other: "ResourceVector") -> "ResourceVector":
        return ResourceVector(
            self.cpu_millicores + other.cpu_millicores,
            self.gpu_count + other.gpu_count,
            self.memory_bytes + other.memory_bytes,
        )

    def subtract(self, other: "ResourceVector") -> "ResourceVector":
        """Componentwise subtraction; raises if any component would go negative."""
        diff = {}
        for name in COMPONENTS:
            value = getattr(self, name) - getattr(other, name)
            if value < 0:
                raise ValueError(f"subtraction drives {name} negative ({value})")
            diff[name] = value
        return ResourceVector(**diff)

    def covers(self, other: "ResourceVector") -> bool:
        """True when every component of `other` fits within this vector."""
        return all(getattr(self, n) >= getattr(other, n) for n in COMPONENTS)

    def exceeded_by(self, other: "ResourceVector") -> list[str]:
        """Names of components where `other` is strictly larger than this vector."""
        return [n for n in COMPONENTS if getattr(other, n) > getattr(self, n)]

    def scale(self, factor: int) -> "ResourceVector":
        return ResourceVector(*(getattr(self, n) * factor for n in COMPONENTS))

    def as_dict(self) -> dict[str, int]:
        return {n: getattr(self, n) for n in COMPONENTS}

    @classmethod
    def from_dict(cls, raw: dict) -> "ResourceVector":
        unknown = set(raw) - set(COMPONENTS)
        if unknown:
            raise ValueError(f"unknown resource components: {sorted(unknown)}")
        return cls(**{n: int(raw.get(n, 0)) for n in COMPONENTS})


ZERO = ResourceVector()
