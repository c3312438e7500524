"""Causal structure of 1+1-dimensional Minkowski spacetime (c = 1).

Lightlike separation counts as causal: a signal sent at light speed from p
reaches q exactly when q is on p's future light cone.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .errors import DomainError, StructuralError

CAUSAL_TOL = 1e-12


@dataclass(frozen=True)
class SpacetimePoint:
    t: float
    x: float
    label: str = ""

    def __post_init__(self):
        if not (math.isfinite(self.t) and math.isfinite(self.x)):
            raise DomainError(f"non-finite coordinates in {self}")

    @property
    def coords(self) -> tuple[float, float]:
        return (self.t, self.x)

    def as_dict(self) -> dict:
        return {"label": self.label, "t": self.t, "x": self.x}


def causally_precedes(p: SpacetimePoint, q: SpacetimePoint) -> bool:
    """True when q lies in the causal future of p (light cone included)."""
    return q.t - p.t >= abs(q.x - p.x) - CAUSAL_TOL


def spacelike(p: SpacetimePoint, q: SpacetimePoint) -> bool:
    return abs(p.t - q.t) < abs(p.x - q.x) - CAUSAL_TOL


def _check_distinct(points: Sequence[SpacetimePoint]) -> None:
    seen = set()
    for p in points:
        if p.coords in seen:
            raise StructuralError(f"duplicate spacetime point {p.coords}")
        seen.add(p.coords)


def count_spacelike_pairs(points: Sequence[SpacetimePoint]) -> int:
    """Number of unordered spacelike-separated pairs among distinct points."""
    _check_distinct(points)
    return sum(spacelike(p, q) for p, q in itertools.combinations(points, 2))


def intersection_past_contains(p: SpacetimePoint, points: Iterable[SpacetimePoint]) -> bool:
    """True when p causally precedes every point."""
    points = list(points)
    if not points:
        raise DomainError("need at least one point")
    return all(causally_precedes(p, q) for q in points)


def arrival(sender: SpacetimePoint, x: float, label: str = "") -> SpacetimePoint:
    """Event at position ``x`` where a light-speed signal from ``sender`` arrives."""
    return SpacetimePoint(sender.t + abs(x - sender.x), x, label)


def common_past_apex(points: Sequence[SpacetimePoint]) -> SpacetimePoint:
    """Latest event at the points' mean position that precedes all of them."""
    if not points:
        raise DomainError("need at least one point")
    x = sum(p.x for p in points) / len(points)
    t = min(p.t - abs(p.x - x) for p in points)
    return SpacetimePoint(t, x, "apex")


def load_points(source) -> list[SpacetimePoint]:
    """Read ``[{label, t, x}, ...]`` from a JSON file path or an already-parsed list."""
    if isinstance(source, (str, Path)):
        source = json.loads(Path(source).read_text())
    try:
        points = [SpacetimePoint(float(d["t"]), float(d["x"]), str(d.get("label", ""))) for d in source]
    except (KeyError, TypeError, ValueError) as exc:
        raise StructuralError(f"malformed point list: {exc}") from exc
    _check_distinct(points)
    return points
