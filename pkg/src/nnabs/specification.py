"""Bounded-horizon safety and reach-avoid specifications."""

from __future__ import annotations

import enum
from dataclasses import dataclass

from .stochastic import Box


class SpecKind(str, enum.Enum):
    SAFETY = "safety"
    REACH_AVOID = "reach-avoid"


@dataclass(frozen=True, eq=False)
class Specification:
    """Stay in the domain (and out of ``obstacle``) for ``horizon`` steps;
    for reach-avoid, additionally enter ``goal`` within the horizon."""

    kind: SpecKind
    horizon: int
    goal: Box | None = None
    obstacle: Box | None = None
    safe: Box | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", SpecKind(self.kind))
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.kind is SpecKind.REACH_AVOID and self.goal is None:
            raise ValueError("reach-avoid specification needs a goal box")
        if self.kind is SpecKind.SAFETY and self.goal is not None:
            raise ValueError("safety specification takes no goal box")
        if self.goal is not None and self.obstacle is not None and self.goal.intersects(self.obstacle):
            raise ValueError("goal and obstacle boxes must be disjoint")

    @property
    def is_reach_avoid(self) -> bool:
        return self.kind is SpecKind.REACH_AVOID

    def validate_domain(self, domain: Box) -> None:
        for name, box in (("goal", self.goal), ("obstacle", self.obstacle)):
            if box is not None and not domain.contains_box(box):
                raise ValueError(f"{name} box must lie within the state box")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "horizon": self.horizon,
            "goal": None if self.goal is None else self.goal.to_list(),
            "obstacle": None if self.obstacle is None else self.obstacle.to_list(),
            "safe": None if self.safe is None else self.safe.to_list(),
        }
