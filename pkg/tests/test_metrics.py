"""Metric accumulation against an independent confusion-matrix oracle."""

import json

import numpy as np
import pytest

from cst.episodes import Episode, Record
from cst.metrics import MetricAccumulator, MetricError, write_report
from cst.objective import EpisodePrediction
from cst.seeding import rng_for

from helpers import assert_close


def _episode(rng, class_ids, way=2, hw=(6, 6)):
    chosen = [class_ids[i] for i in
              rng.choice(len(class_ids), size=way, replace=False)]
    gt = rng.integers(1, way + 2, size=hw)
    pred_labels = rng.integers(1, way + 2, size=hw)
    clf = rng.integers(0, 2, size=way)
    ep = Episode(way=way, shot=1, classes=chosen, supports=[[] for _ in chosen],
                 query=None, query_clf_gt=rng.integers(0, 2, size=way),
                 query_seg_gt=gt)
    pred = EpisodePrediction(clf_decision=clf, seg_labels=pred_labels,
                             clf_responses=clf.astype(float),
                             seg_responses=np.zeros((way, *hw)))
    return ep, pred


def _oracle(items, class_ids):
    inter = {c: 0 for c in class_ids}
    union = {c: 0 for c in class_ids}
    exact = 0
    for ep, pred in items:
        if np.array_equal(pred.clf_decision, ep.query_clf_gt):
            exact += 1
        for n, cls in enumerate(ep.classes):
            p = pred.seg_labels == n + 1
            g = ep.query_seg_gt == n + 1
            inter[cls] += int((p & g).sum())
            union[cls] += int((p | g).sum())
    ious = [inter[c] / union[c] for c in class_ids if union[c] > 0]
    return {"exact_ratio": exact / len(items),
            "miou": float(np.mean(ious)) if ious else 0.0}


def test_matches_oracle():
    rng = rng_for(0, "m")
    class_ids = [1, 2, 3]
    items = [_episode(rng, class_ids) for _ in range(40)]
    acc = MetricAccumulator(class_ids)
    for ep, pred in items:
        acc.update(pred, ep)
    report = acc.finalize()
    oracle = _oracle(items, class_ids)
    assert_close(report["miou"], oracle["miou"], atol=1e-12)
    assert_close(report["exact_ratio"], oracle["exact_ratio"], atol=1e-12)
    assert report["episodes"] == 40


def test_order_independent():
    rng = rng_for(1, "m")
    items = [_episode(rng, [1, 2, 3]) for _ in range(20)]

    def run(seq):
        acc = MetricAccumulator([1, 2, 3])
        for ep, pred in seq:
            acc.update(pred, ep)
        return acc.finalize()

    assert run(items) == run(list(reversed(items)))


def test_merge_equals_single_pass():
    rng = rng_for(2, "m")
    items = [_episode(rng, [1, 2]) for _ in range(12)]
    whole = MetricAccumulator([1, 2])
    for ep, pred in items:
        whole.update(pred, ep)
    left, right = MetricAccumulator([1, 2]), MetricAccumulator([1, 2])
    for ep, pred in items[:5]:
        left.update(pred, ep)
    for ep, pred in items[5:]:
        right.update(pred, ep)
    left.merge(right)
    assert left.finalize() == whole.finalize()


def test_merge_rejects_foreign_registry():
    with pytest.raises(MetricError):
        MetricAccumulator([1, 2]).merge(MetricAccumulator([1, 3]))


def test_unregistered_class_rejected():
    rng = rng_for(3, "m")
    ep, pred = _episode(rng, [4, 5])
    with pytest.raises(MetricError):
        MetricAccumulator([1, 2]).update(pred, ep)


def test_empty_finalize():
    report = MetricAccumulator([1, 2]).finalize()
    assert report["miou"] == 0.0
    assert report["exact_ratio"] == 0.0
    assert report["episodes"] == 0


def test_report_file_is_deterministic(tmp_path):
    rng = rng_for(4, "m")
    acc = MetricAccumulator([1, 2])
    for _ in range(6):
        ep, pred = _episode(rng, [1, 2])
        acc.update(pred, ep)
    write_report(acc.finalize(), tmp_path / "a.json")
    write_report(acc.finalize(), tmp_path / "b.json")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    parsed = json.loads((tmp_path / "a.json").read_text())
    assert set(parsed) >= {"exact_ratio", "miou", "per_class_iou", "episodes"}
