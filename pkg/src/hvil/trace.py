"""Demonstration traces: alternating observations and actions.

A trace is o_0, a_0, ..., o_T, a_T where a_T is the first (and only)
occurrence of the termination action, encoded on the wire as -1. Policies
must take at least one real action before terminating, so T >= 1.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

TERMINATE = -1


class TraceError(ValueError):
    pass


@dataclass
class Trace:
    observations: list[np.ndarray]
    actions: list[int]

    def __post_init__(self):
        self.observations = [np.asarray(o, dtype=np.float64) for o in self.observations]
        self.actions = [int(a) for a in self.actions]

    @property
    def horizon(self) -> int:
        """T: the index of the terminating step."""
        return len(self.actions) - 1

    def validate(self):
        if len(self.observations) != len(self.actions):
            raise TraceError(
                f"{len(self.observations)} observations vs {len(self.actions)} actions"
            )
        if len(self.actions) < 2:
            raise TraceError("trace must contain at least one action before termination")
        if self.actions[-1] != TERMINATE:
            raise TraceError("trace must end with the termination action")
        if TERMINATE in self.actions[:-1]:
            raise TraceError("termination action occurs before the end")
        widths = {o.shape for o in self.observations}
        if len(widths) != 1 or self.observations[0].ndim != 1:
            raise TraceError(f"inconsistent observation shapes: {widths}")
        return self


@dataclass
class TraceMeta:
    init: str
    seed: int
    length: int
    extra: dict = field(default_factory=dict)
