"""Detection-quality scoring: IoU, greedy triplet matching, per-category
average precision, and full / rare / non-rare mAP aggregation.

Protocol (fixed, mirrored by the brute-force oracle in the tests):
- a prediction is a true positive iff some not-yet-matched ground truth in
  the same image shares its (object class, verb) and both the human and the
  object box reach IoU >= threshold; candidates are taken in score order and
  each ground truth matches at most once; among eligible ground truths the
  first in annotation order is consumed;
- per category, (score, flag) pairs pool across images, sort by descending
  score with a content tie-break (so file order never matters), and AP is the
  area under the all-points interpolated precision-recall curve;
- categories without test-set ground truth have undefined AP and are excluded
  from every mean; rare categories are those with fewer than rare_threshold
  training instances.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .data import VocabSpec
from .errors import ValidationError


def iou(a, b) -> float:
    """Intersection over union of two corner boxes."""
    ax1, ay1, ax2, ay2 = a
    bx1, by1, bx2, by2 = b
    if ax1 >= ax2 or ay1 >= ay2 or bx1 >= bx2 or by1 >= by2:
        raise ValidationError(f"degenerate box: {a} vs {b}")
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter / union


def _score(quad) -> float:
    return quad.object_score * quad.action_score


def _content_key(quad):
    return (quad.human_box, quad.object_box, quad.object_cls, quad.verb)


def sort_predictions(preds):
    """Descending score with a content tie-break; input order never matters."""
    return sorted(preds, key=lambda q: (-_score(q), _content_key(q)))


def match_triplets(preds, gts, iou_thresh: float = 0.5):
    """TP/FP flags for score-sorted predictions of one image.

    gts are (human_box, object_box, object_class, verb) tuples.
    """
    scores = [_score(q) for q in preds]
    if any(a < b for a, b in zip(scores, scores[1:])):
        raise ValidationError("predictions must be sorted by descending score")
    taken = [False] * len(gts)
    flags = []
    for q in preds:
        hit = False
        for k, (gh, go, cls, verb) in enumerate(gts):
            if taken[k] or cls != q.object_cls or verb != q.verb:
                continue
            if iou(q.human_box, gh) >= iou_thresh and iou(q.object_box, go) >= iou_thresh:
                taken[k] = True
                hit = True
                break
        flags.append(hit)
    return flags


def average_precision(flags, num_gt: int) -> float | None:
    """All-points interpolated AP from score-ordered TP flags; None (undefined)
    when the category has no ground truth."""
    if num_gt < 0:
        raise ValidationError("num_gt must be non-negative")
    if num_gt == 0:
        return None
    if not flags:
        return 0.0
    tp = np.cumsum(np.asarray(flags, dtype=np.float64))
    fp = np.cumsum(1.0 - np.asarray(flags, dtype=np.float64))
    recall = tp / num_gt
    precision = tp / (tp + fp)
    ap = 0.0
    prev_r = 0.0
    for i in range(len(flags)):
        r = float(recall[i])
        if r > prev_r:
            ap += (r - prev_r) * float(precision[i:].max())
            prev_r = r
    return ap


@dataclass(frozen=True)
class EvalReport:
    per_category_ap: dict          # (verb, object) -> float | None
    map_full: float
    map_rare: float
    map_nonrare: float
    n_categories: int              # with defined AP
    n_rare: int                    # defined and rare
    n_gt: int


def evaluate(preds_by_image: dict, gt_scenes, train_counts: np.ndarray,
             vocab: VocabSpec = VocabSpec(), iou_thresh: float = 0.5,
             rare_threshold: int = 10) -> EvalReport:
    """Score predictions against a ground-truth corpus.

    preds_by_image maps image_id to quadruple records carrying human_box,
    object_box, object_cls, verb, object_score, action_score.
    """
    n_verbs, n_objects = len(vocab.verbs), len(vocab.objects)
    for preds in preds_by_image.values():
        for q in preds:
            if not (0 <= q.object_cls < n_objects and 0 <= q.verb < n_verbs):
                raise ValidationError(
                    f"unknown category ({q.verb}, {q.object_cls}) in predictions")

    pooled = {}                    # category -> list of (score, image_id, key, flag)
    gt_count = np.zeros((n_verbs, n_objects), dtype=np.int64)
    for scene in gt_scenes:
        gts = scene.gt_quads()
        for _, _, cls, verb in gts:
            gt_count[verb, cls] += 1
        preds = sort_predictions(preds_by_image.get(scene.image_id, []))
        flags = match_triplets(preds, gts, iou_thresh)
        for q, flag in zip(preds, flags):
            pooled.setdefault((q.verb, q.object_cls), []).append(
                (_score(q), scene.image_id, _content_key(q), flag))

    rare = {(v, o) for v in range(n_verbs) for o in range(n_objects)
            if train_counts[v, o] < rare_threshold}
    per_cat = {}
    full, rare_aps, nonrare_aps = [], [], []
    for v in range(n_verbs):
        for o in range(n_objects):
            entries = sorted(pooled.get((v, o), []),
                             key=lambda e: (-e[0], e[1], e[2]))
            ap = average_precision([e[3] for e in entries], int(gt_count[v, o]))
            per_cat[(v, o)] = ap
            if ap is None:
                continue
            full.append(ap)
            (rare_aps if (v, o) in rare else nonrare_aps).append(ap)

    def mean(xs):
        return sum(xs) / len(xs) if xs else 0.0

    return EvalReport(per_cat, mean(full), mean(rare_aps), mean(nonrare_aps),
                      len(full), len(rare_aps), int(gt_count.sum()))


# ---------------------------------------------------------------------------
# report files
# ---------------------------------------------------------------------------

_REPORT_HEADER = "# hoikit-eval v1"


def write_report(path, report: EvalReport, vocab: VocabSpec = VocabSpec()) -> None:
    """Delimited table: one category row (verb, object, ap) after a summary
    row (map_full, map_rare, map_nonrare, n_categories, n_rare, n_gt); a
    machine-readable JSON twin with the same fields lands next to it."""
    with open(path, "w") as f:
        f.write(_REPORT_HEADER + "\n")
        f.write(f"summary\t{report.map_full!r}\t{report.map_rare!r}\t"
                f"{report.map_nonrare!r}\t{report.n_categories}\t"
                f"{report.n_rare}\t{report.n_gt}\n")
        for (v, o), ap in sorted(report.per_category_ap.items()):
            name_v, name_o = vocab.verbs[v], vocab.objects[o]
            f.write(f"category\t{name_v}\t{name_o}\t"
                    f"{'undefined' if ap is None else repr(ap)}\n")
    payload = {
        "map_full": report.map_full,
        "map_rare": report.map_rare,
        "map_nonrare": report.map_nonrare,
        "n_categories": report.n_categories,
        "n_rare": report.n_rare,
        "n_gt": report.n_gt,
        "per_category": [
            {"verb": vocab.verbs[v], "object": vocab.objects[o], "ap": ap}
            for (v, o), ap in sorted(report.per_category_ap.items())
        ],
    }
    with open(str(path) + ".json", "w") as f:
        json.dump(payload, f, indent=2)
        f.write("\n")
