"""Benchmark protocol: greedy matching, precision-recall curve, average precision.

Detections are processed in descending confidence. Each claims its nearest
unmatched ground-truth instance if that lies within 0.1 x diameter of the
symmetry-aware pose distance. Claims on instances with visibility > 0.5 are
true positives; claims on more occluded instances are ignored (those poses
are exempt from retrieval and count neither way); unclaimed detections are
false positives (duplicates or too far off). AP is the area under the
precision envelope of the pooled precision-recall curve.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .geometry import ObjectModel, pose_distance
from .gridcodec import DetectionHypothesis, SceneGroundTruth

TP, FP, IGNORED = "tp", "fp", "ignored"
RELEVANT_VISIBILITY = 0.5  # ground truth is relevant iff visibility > this


@dataclass(frozen=True)
class MatchLabel:
    kind: str
    gt_index: int | None = None
    scene_index: int = 0

    def __post_init__(self):
        if self.kind not in (TP, FP, IGNORED):
            raise ValueError(f"bad label kind {self.kind!r}")
        if (self.kind == FP) != (self.gt_index is None):
            raise ValueError("gt_index must be set exactly for tp/ignored labels")


@dataclass
class EvalReport:
    ap: float
    n_relevant: int
    curve: list[tuple[float, float]]  # (recall, precision) per non-ignored detection
    labels: list[MatchLabel] = field(default_factory=list)  # confidence-descending

    @property
    def counts(self) -> dict:
        return {
            "tp": sum(1 for l in self.labels if l.kind == TP),
            "fp": sum(1 for l in self.labels if l.kind == FP),
            "ignored": sum(1 for l in self.labels if l.kind == IGNORED),
        }


def n_relevant(gt: SceneGroundTruth) -> int:
    return sum(1 for inst in gt.instances if inst.visibility > RELEVANT_VISIBILITY)


def _processing_order(detections: Sequence[DetectionHypothesis]) -> list[int]:
    # descending confidence; ties broken by row-major cell index
    return sorted(range(len(detections)), key=lambda i: (-detections[i].confidence, detections[i].cell))


def match(
    detections: Sequence[DetectionHypothesis],
    gt: SceneGroundTruth,
    obj: ObjectModel,
) -> list[MatchLabel]:
    """Label every detection; the result is aligned with the input order."""
    labels: list[MatchLabel | None] = [None] * len(detections)
    unmatched = list(range(len(gt.instances)))
    for det_idx in _processing_order(detections):
        det = detections[det_idx]
        if unmatched:
            dists = np.array(
                [pose_distance(det.pose, gt.instances[g].pose, obj) for g in unmatched]
            )
            best = int(np.argmin(dists))  # equidistant claims go to the lowest gt index
            if dists[best] < obj.accept_radius:
                g = unmatched.pop(best)
                relevant = gt.instances[g].visibility > RELEVANT_VISIBILITY
                labels[det_idx] = MatchLabel(TP if relevant else IGNORED, g)
                continue
        labels[det_idx] = MatchLabel(FP)
    return labels  # type: ignore[return-value]


def pr_curve(labels: Sequence[MatchLabel], n_rel: int) -> list[tuple[float, float]]:
    """One (recall, precision) point per non-ignored prefix of the ranked labels."""
    if n_rel < 0:
        raise ValueError("n_relevant must be >= 0")
    if n_rel == 0:
        return []
    tp = fp = 0
    points = []
    for label in labels:
        if label.kind == IGNORED:
            continue
        if label.kind == TP:
            tp += 1
        else:
            fp += 1
        points.append((tp / n_rel, tp / (tp + fp)))
    return points


def average_precision(curve: Sequence[tuple[float, float]]) -> float:
    """Area under the precision envelope, integrating from recall 0."""
    if not curve:
        return 0.0
    recalls = [r for r, _ in curve]
    envelope = [p for _, p in curve]
    for i in range(len(envelope) - 2, -1, -1):
        envelope[i] = max(envelope[i], envelope[i + 1])
    ap = 0.0
    r_prev = 0.0
    for r, p_env in zip(recalls, envelope):
        if r > r_prev:
            ap += (r - r_prev) * p_env
            r_prev = r
    return ap


def _report_from_labels(ranked: list[MatchLabel], n_rel: int) -> EvalReport:
    curve = pr_curve(ranked, n_rel)
    if n_rel == 0:
        # nothing to retrieve: perfect unless a detection was plain wrong
        ap = 0.0 if any(l.kind == FP for l in ranked) else 1.0
    else:
        ap = average_precision(curve)
    return EvalReport(ap=ap, n_relevant=n_rel, curve=curve, labels=ranked)


def evaluate_scene(
    detections: Sequence[DetectionHypothesis],
    gt: SceneGroundTruth,
    obj: ObjectModel,
) -> EvalReport:
    labels = match(detections, gt, obj)
    ranked = [labels[i] for i in _processing_order(detections)]
    return _report_from_labels(ranked, n_relevant(gt))


def evaluate_dataset(
    scenes: Sequence[tuple[Sequence[DetectionHypothesis], SceneGroundTruth]],
    obj: ObjectModel,
) -> EvalReport:
    """Pool detections of all scenes into one confidence-ranked list.

    Matching stays per scene; the curve and the AP are global. Cross-scene
    confidence ties resolve by scene position, then cell index.
    """
    pooled: list[tuple[float, int, tuple[int, int], MatchLabel]] = []
    total_relevant = 0
    for scene_idx, (detections, gt) in enumerate(scenes):
        labels = match(detections, gt, obj)
        total_relevant += n_relevant(gt)
        for det, label in zip(detections, labels):
            pooled.append(
                (det.confidence, scene_idx, det.cell,
                 MatchLabel(label.kind, label.gt_index, scene_idx))
            )
    pooled.sort(key=lambda item: (-item[0], item[1], item[2]))
    ranked = [item[3] for item in pooled]
    return _report_from_labels(ranked, total_relevant)


def save_report(path, report: EvalReport) -> None:
    doc = {
        "schema_version": 1,
        "ap": report.ap,
        "n_relevant": report.n_relevant,
        "counts": report.counts,
        "curve": [[r, p] for r, p in report.curve],
        "labels": [
            {"kind": l.kind, "gt_index": l.gt_index, "scene_index": l.scene_index}
            for l in report.labels
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def save_curve_csv(path, report: EvalReport) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["recall", "precision"])
        writer.writerows(report.curve)
