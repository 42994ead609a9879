"""Greedy duplicate removal over decoded pose hypotheses.

Objects close to a cell border can fire in neighboring cells as well; this
suppresses any detection within a radius of an already-kept, more confident
one. The radius is a fraction of the object diameter measured either in full
pose-representative space (default, symmetry-aware) or between origins only.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import ObjectModel, pose_distance
from .gridcodec import DetectionHypothesis


@dataclass(frozen=True)
class DedupConfig:
    radius_factor: float = 0.1
    origin_only: bool = False

    def __post_init__(self):
        if not (self.radius_factor > 0.0):
            raise ValueError("dedup radius factor must be positive")


def remove_duplicates(
    detections: Sequence[DetectionHypothesis],
    obj: ObjectModel,
    config: DedupConfig = DedupConfig(),
) -> list[DetectionHypothesis]:
    """Keep the most confident detection of each cluster.

    Detections are visited in descending confidence (ties: lower cell index)
    and dropped when closer than ``radius_factor * diameter`` to any already
    kept detection. Survivors come back in that same confidence order.
    """
    radius = config.radius_factor * obj.diameter

    def distance(a: DetectionHypothesis, b: DetectionHypothesis) -> float:
        if config.origin_only:
            return float(np.linalg.norm(a.pose.translation - b.pose.translation))
        return pose_distance(a.pose, b.pose, obj)

    ranked = sorted(detections, key=lambda d: (-d.confidence, d.cell))
    kept: list[DetectionHypothesis] = []
    for det in ranked:
        if all(distance(det, survivor) >= radius for survivor in kept):
            kept.append(det)
    return kept
