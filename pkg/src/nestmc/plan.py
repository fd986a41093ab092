"""Particle counts per nesting level."""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class NestingPlan:
    """``counts[i]`` children are drawn at every node of depth ``i``.

    ``depth`` (the number of switches) is ``len(counts)``.
    """

    counts: tuple[int, ...]

    def __post_init__(self):
        counts = tuple(int(n) for n in self.counts)
        if not counts:
            raise ValueError("a plan needs at least one level")
        if any(n < 1 for n in counts):
            raise ValueError(f"particle counts must be >= 1, got {counts}")
        object.__setattr__(self, "counts", counts)

    @property
    def depth(self) -> int:
        return len(self.counts)

    @property
    def n_outer(self) -> int:
        return self.counts[0]

    @classmethod
    def from_base(cls, base, ipart: int = 0, depth: int | None = None) -> NestingPlan:
        """First ``depth`` entries of ``base``, each scaled by ``2**ipart``."""
        base = tuple(base)
        depth = len(base) if depth is None else depth
        if not 1 <= depth <= len(base):
            raise ValueError(f"depth {depth} needs 1..{len(base)} base counts")
        if ipart < 0:
            raise ValueError("ipart must be >= 0")
        return cls(tuple(int(n) * 2**ipart for n in base[:depth]))

    def scaled(self, factor: float) -> NestingPlan:
        return NestingPlan(tuple(max(1, round(n * factor)) for n in self.counts))

    def __iter__(self):
        return iter(self.counts)

    def __len__(self):
        return len(self.counts)

    def __getitem__(self, i):
        return self.counts[i]
