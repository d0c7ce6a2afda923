from enum import Enum


class PolicyKind(Enum):
    PRESCHED = "presched"
    LAYER_GREEDY = "greedy"
    ONDEMAND_ONLY = "ondemand"
    FIXED_PREFETCH = "fixed"
    ORACLE = "oracle"


class SchedulerPolicy:
    """A scheduling policy; `prefetch_count` is only set for `fixed:<c>`."""

    __slots__ = ("kind", "prefetch_count")

    def __init__(self, kind: PolicyKind, prefetch_count: int | None = None) -> None:
        if (kind == PolicyKind.FIXED_PREFETCH) != (prefetch_count is not None):
            message = f"Policy '{kind.value}' does not accept prefetch count {prefetch_count}"
            raise ValueError(message)
        if prefetch_count is not None and prefetch_count < 0:
            message = f"Prefetch count must be >= 0, got {prefetch_count}"
            raise ValueError(message)
        self.kind = kind
        self.prefetch_count = prefetch_count

    def __str__(self) -> str:
        if self.kind == PolicyKind.FIXED_PREFETCH:
            return f"{self.kind.value}:{self.prefetch_count}"
        return self.kind.value

    def __repr__(self) -> str:
        return f"SchedulerPolicy({self})"

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SchedulerPolicy):
            return NotImplemented
        return (self.kind, self.prefetch_count) == (other.kind, other.prefetch_count)

    def __hash__(self) -> int:
        return hash((self.kind, self.prefetch_count))
