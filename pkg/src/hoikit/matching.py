"""Set-prediction training machinery: bipartite matching between predicted
slots and ground-truth quadruples, and the composite loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import LossWeights
from .errors import ValidationError
from . import tensor as tt
from .tensor import Tensor


# ---------------------------------------------------------------------------
# box similarity
# ---------------------------------------------------------------------------


def giou(a, b) -> float:
    """Generalized IoU of two corner boxes (plain floats)."""
    ax1, ay1, ax2, ay2 = a
    bx1, by1, bx2, by2 = b
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    cw = max(ax2, bx2) - min(ax1, bx1)
    ch = max(ay2, by2) - min(ay1, by1)
    hull = cw * ch
    return inter / union - (hull - union) / hull


def _clip_boxes(boxes: Tensor, min_extent: float = 1e-6) -> Tensor:
    """Force x1<x2, y1<y2 before GIoU on possibly-degenerate inputs."""
    x1, y1 = boxes[:, 0:1], boxes[:, 1:2]
    x2 = tt.maximum(boxes[:, 2:3], x1 + min_extent)
    y2 = tt.maximum(boxes[:, 3:4], y1 + min_extent)
    return tt.concat([x1, y1, x2, y2], axis=1)


def giou_pairs(pred: Tensor, gt: np.ndarray) -> Tensor:
    """Differentiable GIoU between row-aligned k x 4 corner boxes, composed
    from elementary primitives (the reference the fused version must match)."""
    pred = _clip_boxes(pred)
    g = np.asarray(gt, dtype=np.float64)
    px1, py1, px2, py2 = (pred[:, i] for i in range(4))
    gx1, gy1, gx2, gy2 = (Tensor(g[:, i]) for i in range(4))
    zero = Tensor(np.zeros(g.shape[0]))
    iw = tt.maximum(tt.minimum(px2, gx2) - tt.maximum(px1, gx1), zero)
    ih = tt.maximum(tt.minimum(py2, gy2) - tt.maximum(py1, gy1), zero)
    inter = iw * ih
    union = (px2 - px1) * (py2 - py1) + (gx2 - gx1) * (gy2 - gy1) - inter
    cw = tt.maximum(px2, gx2) - tt.minimum(px1, gx1)
    ch = tt.maximum(py2, gy2) - tt.minimum(py1, gy1)
    hull = cw * ch
    return inter / union - (hull - union) / hull


def giou_pairs_fused(pred: Tensor, gt: np.ndarray) -> Tensor:
    """Same value and subgradient conventions as giou_pairs, taped as one
    node; tests assert value and gradient agreement."""
    p = pred.data
    g = np.asarray(gt, dtype=p.dtype)
    # clip to x1 < x2, y1 < y2 (matching _clip_boxes tie conventions)
    floor_x = p[:, 0] + 1e-6
    floor_y = p[:, 1] + 1e-6
    x2_ok = p[:, 2] >= floor_x
    y2_ok = p[:, 3] >= floor_y
    px1, py1 = p[:, 0], p[:, 1]
    px2 = np.where(x2_ok, p[:, 2], floor_x)
    py2 = np.where(y2_ok, p[:, 3], floor_y)
    gx1, gy1, gx2, gy2 = g[:, 0], g[:, 1], g[:, 2], g[:, 3]

    ix2 = np.minimum(px2, gx2)
    ix1 = np.maximum(px1, gx1)
    iy2 = np.minimum(py2, gy2)
    iy1 = np.maximum(py1, gy1)
    iw_raw = ix2 - ix1
    ih_raw = iy2 - iy1
    iw = np.maximum(iw_raw, 0.0)
    ih = np.maximum(ih_raw, 0.0)
    inter = iw * ih
    pw, ph = px2 - px1, py2 - py1
    union = pw * ph + (gx2 - gx1) * (gy2 - gy1) - inter
    cw = np.maximum(px2, gx2) - np.minimum(px1, gx1)
    ch = np.maximum(py2, gy2) - np.minimum(py1, gy1)
    hull = cw * ch
    out_data = inter / union - (hull - union) / hull

    def backward(gout, out):
        # giou = I/U + U/C - 1 with U = A_pred + A_gt - I. Total derivatives:
        # through I (incl. the U chain), through A_pred, and through C.
        dI = gout * (1.0 / union + inter / union**2 - 1.0 / hull)
        dA = gout * (1.0 / hull - inter / union**2)
        dC = gout * (-union / hull**2)

        gate_w = (iw_raw >= 0.0) * ih
        gate_h = (ih_raw >= 0.0) * iw
        # per-corner partials under the min/max tie conventions of giou_pairs
        d_px2_I = gate_w * (px2 <= gx2)
        d_px1_I = -gate_w * (px1 >= gx1)
        d_py2_I = gate_h * (py2 <= gy2)
        d_py1_I = -gate_h * (py1 >= gy1)
        d_px1_A, d_px2_A = -ph, ph
        d_py1_A, d_py2_A = -pw, pw
        d_px2_C = ch * (px2 >= gx2)
        d_px1_C = -ch * (px1 <= gx1)
        d_py2_C = cw * (py2 >= gy2)
        d_py1_C = -cw * (py1 <= gy1)

        gx1_g = dI * d_px1_I + dA * d_px1_A + dC * d_px1_C
        gx2_g = dI * d_px2_I + dA * d_px2_A + dC * d_px2_C
        gy1_g = dI * d_py1_I + dA * d_py1_A + dC * d_py1_C
        gy2_g = dI * d_py2_I + dA * d_py2_A + dC * d_py2_C

        grad = np.empty_like(p)
        grad[:, 0] = gx1_g + gx2_g * ~x2_ok
        grad[:, 1] = gy1_g + gy2_g * ~y2_ok
        grad[:, 2] = gx2_g * x2_ok
        grad[:, 3] = gy2_g * y2_ok
        tt._accum(pred, grad)

    return tt._from_op(out_data, (pred,), backward)


# ---------------------------------------------------------------------------
# matching costs
# ---------------------------------------------------------------------------


def _bce_row(logits: np.ndarray, targets: np.ndarray) -> float:
    softplus = np.maximum(logits, 0.0) + np.log1p(np.exp(-np.abs(logits)))
    return float((softplus - logits * targets).mean())


def pair_cost(pred_hbox, pred_obox, class_log_probs, action_logits,
              gt_quad, weights: LossWeights = LossWeights()) -> float:
    """Matching cost of one predicted slot against one ground-truth quad
    (human_box, object_box, object_class, verb)."""
    gh, go, cls, verb = gt_quad
    l1 = float(np.abs(np.asarray(pred_hbox) - np.asarray(gh)).sum()
               + np.abs(np.asarray(pred_obox) - np.asarray(go)).sum())
    g = 2.0 - giou(pred_hbox, gh) - giou(pred_obox, go)
    cls_term = -float(class_log_probs[cls])
    onehot = np.zeros(len(action_logits))
    onehot[verb] = 1.0
    act = _bce_row(np.asarray(action_logits), onehot)
    return (weights.box * l1 + weights.giou * g
            + weights.cls * cls_term + weights.act * act)


def _giou_grid(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """slots x gts GIoU grid of corner boxes."""
    p = pred[:, None, :]
    g = gt[None, :, :]
    iw = np.maximum(np.minimum(p[..., 2], g[..., 2])
                    - np.maximum(p[..., 0], g[..., 0]), 0.0)
    ih = np.maximum(np.minimum(p[..., 3], g[..., 3])
                    - np.maximum(p[..., 1], g[..., 1]), 0.0)
    inter = iw * ih
    union = ((p[..., 2] - p[..., 0]) * (p[..., 3] - p[..., 1])
             + (g[..., 2] - g[..., 0]) * (g[..., 3] - g[..., 1]) - inter)
    hull = ((np.maximum(p[..., 2], g[..., 2]) - np.minimum(p[..., 0], g[..., 0]))
            * (np.maximum(p[..., 3], g[..., 3]) - np.minimum(p[..., 1], g[..., 1])))
    return inter / union - (hull - union) / hull


def cost_matrix(pred_hboxes, pred_oboxes, class_log_probs, action_logits,
                gt_quads, weights: LossWeights = LossWeights()) -> np.ndarray:
    """Slots x ground-truths cost matrix (detached numpy), vectorized but
    entry-equal to pair_cost."""
    hb = np.asarray(pred_hboxes)
    ob = np.asarray(pred_oboxes)
    logp = np.asarray(class_log_probs)
    act = np.asarray(action_logits)
    gh = np.array([q[0] for q in gt_quads])
    go = np.array([q[1] for q in gt_quads])
    cls = np.array([q[2] for q in gt_quads], dtype=np.intp)
    verb = np.array([q[3] for q in gt_quads], dtype=np.intp)

    l1 = (np.abs(hb[:, None, :] - gh[None, :, :]).sum(axis=2)
          + np.abs(ob[:, None, :] - go[None, :, :]).sum(axis=2))
    g = 2.0 - _giou_grid(hb, gh) - _giou_grid(ob, go)
    cls_term = -logp[:, cls]
    softplus = np.maximum(act, 0.0) + np.log1p(np.exp(-np.abs(act)))
    # mean over verbs of softplus(x) - x * onehot: base term plus the picked
    # logit correction per gt verb
    n_verbs = act.shape[1]
    base = softplus.sum(axis=1, keepdims=True)
    bce = (base - act[:, verb]) / n_verbs
    return (weights.box * l1 + weights.giou * g
            + weights.cls * cls_term + weights.act * bce)


# ---------------------------------------------------------------------------
# Hungarian assignment (shortest augmenting path, O(n^3))
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MatchAssignment:
    pairs: tuple          # ((slot, gt), ...) sorted by slot, injective both ways

    def slot_to_gt(self) -> dict:
        return dict(self.pairs)


def hungarian_assign(cost) -> MatchAssignment:
    """Minimum-total-cost matching covering the smaller side (shortest
    augmenting paths over the smaller dimension); ties break toward low
    indices via the in-order row/column scans."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValidationError(f"cost matrix must be 2-D, got {cost.shape}")
    if cost.size == 0:
        return MatchAssignment(())
    if not np.all(np.isfinite(cost)):
        raise ValidationError("cost matrix entries must be finite")
    transposed = cost.shape[0] > cost.shape[1]
    work = cost.T if transposed else cost
    n, m = work.shape

    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    col_to_row = np.zeros(m + 1, dtype=np.intp)   # 1-based rows, 0 = free
    way = np.zeros(m + 1, dtype=np.intp)
    for i in range(1, n + 1):
        col_to_row[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = col_to_row[j0]
            reduced = work[i0 - 1] - u[i0] - v[1:]
            unused = ~used[1:]
            better = unused & (reduced < minv[1:])
            minv[1:][better] = reduced[better]
            way[1:][better] = j0
            masked = np.where(unused, minv[1:], np.inf)
            j1 = int(np.argmin(masked)) + 1
            delta = masked[j1 - 1]
            u[col_to_row[used]] += delta
            v[used] -= delta
            minv[1:][unused] -= delta
            j0 = j1
            if col_to_row[j0] == 0:
                break
        while j0 != 0:
            j1 = way[j0]
            col_to_row[j0] = col_to_row[j1]
            j0 = j1

    raw = [(int(col_to_row[j] - 1), j - 1)
           for j in range(1, m + 1) if col_to_row[j] != 0]
    pairs = sorted((j, i) for i, j in raw) if transposed else sorted(raw)
    return MatchAssignment(tuple(pairs))


# ---------------------------------------------------------------------------
# composite loss
# ---------------------------------------------------------------------------


def set_loss(pred_hboxes: Tensor, pred_oboxes: Tensor, class_logits: Tensor,
             action_logits: Tensor, gt_quads, assignment: MatchAssignment,
             distill_logits: Tensor | None = None,
             distill_labels: np.ndarray | None = None,
             weights: LossWeights = LossWeights()) -> Tensor:
    """Matched slots pay box L1 + GIoU + object CE + action BCE; unmatched
    slots pay no-object CE; plus the weighted distillation BCE when given."""
    n_slots, n_cls_plus1 = class_logits.shape
    no_object = n_cls_plus1 - 1

    targets = np.full(n_slots, no_object, dtype=np.intp)
    for slot, gt in assignment.pairs:
        targets[slot] = gt_quads[gt][2]
    logp = tt.log_softmax_rows(class_logits)
    ce = tt.neg(tt.mean_all(logp[np.arange(n_slots), targets]))
    total = ce * weights.cls

    if assignment.pairs:
        slots = np.array([s for s, _ in assignment.pairs], dtype=np.intp)
        order = [g for _, g in assignment.pairs]
        gh = np.array([gt_quads[g][0] for g in order])
        go = np.array([gt_quads[g][1] for g in order])
        ph = tt.rows(pred_hboxes, slots)
        po = tt.rows(pred_oboxes, slots)
        k = float(len(slots))
        l1 = (tt.sum_all(tt.absolute(ph - Tensor(gh)))
              + tt.sum_all(tt.absolute(po - Tensor(go)))) * (1.0 / k)
        ones = Tensor(np.ones(len(slots)))
        giou_term = (tt.sum_all(ones - giou_pairs_fused(ph, gh))
                     + tt.sum_all(ones - giou_pairs_fused(po, go))) * (1.0 / k)
        onehot = np.zeros((len(slots), action_logits.shape[1]))
        for row, g in enumerate(order):
            onehot[row, gt_quads[g][3]] = 1.0
        act = tt.bce_with_logits_mean(tt.rows(action_logits, slots), onehot)
        total = total + l1 * weights.box + giou_term * weights.giou + act * weights.act

    if distill_logits is not None and weights.distill != 0.0:
        distill = tt.bce_with_logits_mean(distill_logits, distill_labels)
        total = total + distill * weights.distill
    return total
