"""Independent brute-force evaluator used to cross-check evaluation.evaluate.

Implements the documented scoring protocol from scratch: its own IoU, its own
greedy matcher, and its own all-points interpolated AP, sharing no code with
the package implementation.
"""

from dataclasses import dataclass


@dataclass(frozen=True)
class Quad:
    """Minimal prediction record for evaluator tests."""

    human_box: tuple
    object_box: tuple
    object_cls: int
    verb: int
    object_score: float
    action_score: float


def _iou(a, b):
    ix1, iy1 = max(a[0], b[0]), max(a[1], b[1])
    ix2, iy2 = min(a[2], b[2]), min(a[3], b[3])
    if ix2 <= ix1 or iy2 <= iy1:
        return 0.0
    inter = (ix2 - ix1) * (iy2 - iy1)
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    return inter / (area_a + area_b - inter)


def _ap_all_points(flags, num_gt):
    if num_gt == 0:
        return None
    tp = fp = 0
    points = []
    for flag in flags:
        if flag:
            tp += 1
        else:
            fp += 1
        points.append((tp / num_gt, tp / (tp + fp)))
    # interpolated precision: running max from the right
    interp = [0.0] * len(points)
    best = 0.0
    for i in range(len(points) - 1, -1, -1):
        best = max(best, points[i][1])
        interp[i] = best
    ap = 0.0
    prev_r = 0.0
    for i, (r, _) in enumerate(points):
        if r > prev_r:
            ap += (r - prev_r) * interp[i]
            prev_r = r
    return ap


def oracle_evaluate(preds_by_image, scenes, train_counts, vocab,
                    iou_thresh=0.5, rare_threshold=10):
    """Returns (per_category_ap, map_full, map_rare, map_nonrare)."""
    n_verbs, n_objects = len(vocab.verbs), len(vocab.objects)
    pooled = {(v, o): [] for v in range(n_verbs) for o in range(n_objects)}
    gt_count = {(v, o): 0 for v in range(n_verbs) for o in range(n_objects)}

    for scene in scenes:
        gts = scene.gt_quads()
        for _, _, cls, verb in gts:
            gt_count[(verb, cls)] += 1
        preds = sorted(
            preds_by_image.get(scene.image_id, []),
            key=lambda q: (-(q.object_score * q.action_score),
                           (q.human_box, q.object_box, q.object_cls, q.verb)))
        used = [False] * len(gts)
        for q in preds:
            matched = False
            for k, (gh, go, cls, verb) in enumerate(gts):
                if used[k] or cls != q.object_cls or verb != q.verb:
                    continue
                if (_iou(q.human_box, gh) >= iou_thresh
                        and _iou(q.object_box, go) >= iou_thresh):
                    used[k] = True
                    matched = True
                    break
            pooled[(q.verb, q.object_cls)].append(
                (q.object_score * q.action_score, scene.image_id,
                 (q.human_box, q.object_box, q.object_cls, q.verb), matched))

    per_cat = {}
    full, rare_aps, nonrare_aps = [], [], []
    for v in range(n_verbs):
        for o in range(n_objects):
            entries = sorted(pooled[(v, o)], key=lambda e: (-e[0], e[1], e[2]))
            ap = _ap_all_points([e[3] for e in entries], gt_count[(v, o)])
            per_cat[(v, o)] = ap
            if ap is None:
                continue
            full.append(ap)
            if train_counts[v, o] < rare_threshold:
                rare_aps.append(ap)
            else:
                nonrare_aps.append(ap)

    def mean(xs):
        return sum(xs) / len(xs) if xs else 0.0

    return per_cat, mean(full), mean(rare_aps), mean(nonrare_aps)
