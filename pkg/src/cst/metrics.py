"""Exact-match classification ratio and dataset-accumulated mIoU.

Intersection and union counts accumulate per global class id across all
episodes before any division, so results are independent of episode order and
accumulators shard/merge cleanly. Classes whose union stays zero never enter
the mean; the background label is excluded by construction.
"""

from __future__ import annotations

import json
from typing import Dict, Iterable

import numpy as np

from .episodes import Episode
from .objective import EpisodePrediction


class MetricError(RuntimeError):
    pass


class MetricAccumulator:
    def __init__(self, class_ids: Iterable[int]):
        self.intersection: Dict[int, int] = {int(c): 0 for c in class_ids}
        self.union: Dict[int, int] = {int(c): 0 for c in class_ids}
        self.exact_matches = 0
        self.episodes = 0

    def update(self, pred: EpisodePrediction, episode: Episode) -> None:
        if episode.query_seg_gt is None:
            raise MetricError(f"query {episode.query.name} has no GT labels")
        self.episodes += 1
        if np.array_equal(pred.clf_decision, episode.query_clf_gt):
            self.exact_matches += 1
        for n, cls in enumerate(episode.classes):
            if cls not in self.intersection:
                raise MetricError(f"class id {cls} not registered")
            p = pred.seg_labels == n + 1
            g = episode.query_seg_gt == n + 1
            self.intersection[cls] += int(np.logical_and(p, g).sum())
            self.union[cls] += int(np.logical_or(p, g).sum())

    def merge(self, other: "MetricAccumulator") -> None:
        if set(other.intersection) != set(self.intersection):
            raise MetricError("merging accumulators with different registries")
        for cls in self.intersection:
            self.intersection[cls] += other.intersection[cls]
            self.union[cls] += other.union[cls]
        self.exact_matches += other.exact_matches
        self.episodes += other.episodes

    def finalize(self) -> dict:
        per_class = {cls: self.intersection[cls] / self.union[cls]
                     for cls in sorted(self.intersection)
                     if self.union[cls] > 0}
        miou = float(np.mean(list(per_class.values()))) if per_class else 0.0
        exact = self.exact_matches / self.episodes if self.episodes else 0.0
        return {
            "exact_ratio": exact,
            "miou": miou,
            "per_class_iou": {str(cls): val for cls, val in per_class.items()},
            "episodes": self.episodes,
        }


def write_report(report: dict, path) -> None:
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2)
        fh.write("\n")
