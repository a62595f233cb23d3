"""Pyramid-level assignment: online (minimal loss) and heuristic (box size)."""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

from .geometry import PyramidSpec
from .losses import LevelLossTable

CANONICAL_SIZE = 224.0
DEFAULT_L0 = 5


@dataclass
class SelectionResult:
    instance: int
    level: int
    method: str  # "online" or "heuristic"
    loss_sums: dict = field(default_factory=dict)
    agrees: bool | None = None


def online_select(table: LevelLossTable) -> SelectionResult:
    """Pick the level whose focal + IoU loss is smallest; ties go to the lowest level."""
    sums = table.sums()
    if not sums:
        raise ValueError(f"instance {table.instance}: empty level loss table")
    best = min(sorted(sums), key=lambda l: sums[l])
    return SelectionResult(table.instance, best, "online", sums)


def heuristic_level(w: float, h: float, l0: int = DEFAULT_L0,
                    canonical: float = CANONICAL_SIZE) -> int:
    """Unclamped size-based level ``floor(l0 + log2(sqrt(w*h) / canonical))``."""
    if not (w > 0 and h > 0):
        raise ValueError(f"box dimensions must be positive, got w={w}, h={h}")
    # log2 of the area halves the rounding error compared to log2(sqrt(.))
    return math.floor(l0 + 0.5 * math.log2(w * h / (canonical * canonical)))


def heuristic_select(w: float, h: float, l0: int = DEFAULT_L0, pyramid: PyramidSpec | None = None,
                     canonical: float = CANONICAL_SIZE, instance: int = 0) -> SelectionResult:
    pyramid = pyramid or PyramidSpec()
    level = pyramid.clamp(heuristic_level(w, h, l0, canonical))
    return SelectionResult(instance, level, "heuristic")


@dataclass
class AgreementStats:
    total: int
    agree: int
    contingency: dict  # (online_level, heuristic_level) -> count

    @property
    def disagree(self) -> int:
        return self.total - self.agree

    @property
    def disagreement_rate(self) -> float:
        return self.disagree / self.total if self.total else 0.0


def agreement_stats(online: Sequence[SelectionResult],
                    heuristic: Sequence[SelectionResult]) -> AgreementStats:
    """Count how often the two methods pick the same level for each instance.

    Also sets ``agrees`` on every result.
    """
    by_id = {r.instance: r for r in heuristic}
    if len(by_id) != len(heuristic) or sorted(by_id) != sorted(r.instance for r in online):
        raise ValueError("online and heuristic results cover different instances")
    pairs = Counter()
    agree = 0
    for r in online:
        other = by_id[r.instance]
        same = r.level == other.level
        r.agrees = other.agrees = same
        agree += same
        pairs[(r.level, other.level)] += 1
    return AgreementStats(len(online), agree, dict(sorted(pairs.items())))
