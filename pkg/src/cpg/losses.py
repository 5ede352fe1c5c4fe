"""Contrastive token/object alignment plus box losses for set prediction.

Logits between object ``i`` and token ``j`` are ``o_i . t_j / tau``. Each
matched object has a positive token set (its annotation span) and each token
a positive object set (queries whose span covers it). ``l_o`` normalizes
over tokens, ``l_t`` over objects; unmatched objects and uncovered tokens
are excluded and only see the no-object term.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .boxes import cxcywh_to_xyxy_t, giou_t
from .engine import Tensor, ops
from .matching import Assignment, hungarian, matching_cost

NEG = -1e9


@dataclass
class LossConfig:
    tau: float = 0.07
    w_l1: float = 5.0
    w_giou: float = 2.0
    w_noobj: float = 1.0     # cross entropy pushing unmatched queries to the no-object column
    cost_align: float = 1.0
    cost_l1: float = 5.0
    cost_giou: float = 2.0

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError(f"tau must be > 0, got {self.tau}")


@dataclass
class Targets:
    """Annotations of one image: cxcywh boxes (K, 4) and caption token spans."""
    boxes: np.ndarray
    spans: list

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        self.spans = [tuple(int(v) for v in s) for s in self.spans]
        if len(self.spans) != len(self.boxes):
            raise ValueError("boxes and spans differ in length")

    def __len__(self):
        return len(self.spans)


@dataclass
class LossBreakdown:
    l_o: Tensor
    l_t: Tensor
    align: Tensor
    loc_l1: Tensor
    loc_giou: Tensor
    noobj: Tensor
    total: Tensor
    assignments: list = field(default_factory=list)

    def as_floats(self) -> dict:
        return {k: float(getattr(self, k).data) for k in
                ("l_o", "l_t", "align", "loc_l1", "loc_giou", "noobj", "total")}


def positive_matrix(n_obj: int, n_tok: int, assignment: Assignment, spans) -> np.ndarray:
    """(N, M) 0/1 matrix: query i is positive for token j."""
    pos = np.zeros((n_obj, n_tok))
    for q, k in assignment.pairs:
        a, b = spans[k]
        pos[q, a:b] = 1.0
    return pos


def _weights(pos: np.ndarray):
    n_t = pos.sum(axis=-1, keepdims=True)   # |T_i+|
    n_o = pos.sum(axis=-2, keepdims=True)   # |O_j+|
    w_o = np.divide(pos, n_t, out=np.zeros_like(pos), where=n_t > 0)
    w_t = np.divide(pos, n_o, out=np.zeros_like(pos), where=n_o > 0)
    return w_o, w_t


def align_from_logits(logits: Tensor, pos: np.ndarray, token_mask=None):
    """l_o and l_t from (..., N, M) logits and positives; leading dims kept.

    ``token_mask`` (..., M) marks real tokens; pads leave the token softmax.
    """
    if token_mask is not None:
        logits = ops.masked_fill(logits, ~np.asarray(token_mask, bool)[..., None, :], NEG)
    w_o, w_t = _weights(pos)
    # both directions run the same row-wise code so that transposing the
    # problem swaps l_o and l_t bit for bit
    l_o = _row_nll(logits, w_o)
    l_t = _row_nll(ops.swapaxes(logits, -1, -2), np.ascontiguousarray(np.swapaxes(w_t, -1, -2)))
    return l_o, l_t


def _row_nll(logits: Tensor, w: np.ndarray) -> Tensor:
    return -ops.reduce_sum(ops.log_softmax(logits, axis=-1) * w, axis=(-2, -1))


def contrastive_align_loss(token_features, object_reps, assignment: Assignment, spans,
                           tau: float = 0.07, token_mask=None):
    """Per-image ``(l_o, l_t)`` for (M, d) token and (N, d) object features."""
    if tau <= 0:
        raise ValueError(f"tau must be > 0, got {tau}")
    t = ops.as_tensor(token_features)
    o = ops.as_tensor(object_reps)
    logits = (o @ ops.transpose(t)) * (1.0 / tau)
    pos = positive_matrix(o.shape[0], t.shape[0], assignment, spans)
    return align_from_logits(logits, pos, token_mask)


def match_batch(out, targets, cfg: LossConfig) -> list:
    boxes = out.boxes.data
    logits = out.alignment_logits.data
    res = []
    for b, tg in enumerate(targets):
        c = matching_cost(boxes[b], logits[b], out.token_mask[b], tg.boxes, tg.spans,
                          cfg.cost_align, cfg.cost_l1, cfg.cost_giou)
        res.append(hungarian(c))
    return res


def total_loss(out, targets, cfg: LossConfig = LossConfig(), assignments=None) -> LossBreakdown:
    """Batch loss; ``out`` is a batched CpgOutput, ``targets`` one Targets per image.

    Each image's loss is computed, then the batch mean is taken. Images without
    annotations contribute zero to every term.
    """
    B, N, _ = out.boxes.shape
    M = out.token_mask.shape[1]
    if len(targets) != B:
        raise ValueError(f"{len(targets)} targets for batch of {B}")
    if assignments is None:
        assignments = match_batch(out, targets, cfg)
    has = np.array([len(t) > 0 for t in targets], dtype=np.float64)
    inv_b = 1.0 / B

    # alignment
    pos = np.stack([positive_matrix(N, M, a, t.spans) for a, t in zip(assignments, targets)])
    sim = ops.matmul(out.obj_proj, ops.swapaxes(out.tok_proj, -1, -2)) * (1.0 / cfg.tau)
    l_o_b, l_t_b = align_from_logits(sim, pos, out.token_mask)
    l_o = ops.reduce_sum(l_o_b) * inv_b
    l_t = ops.reduce_sum(l_t_b) * inv_b
    align = (l_o + l_t) * 0.5

    # localization over matched pairs, averaged within each image
    bi, qi, gt, wt = [], [], [], []
    for b, (a, t) in enumerate(zip(assignments, targets)):
        for q, k in a.pairs:
            bi.append(b)
            qi.append(q)
            gt.append(t.boxes[k])
            wt.append(inv_b / len(a.pairs))
    if bi:
        pred = out.boxes[np.array(bi), np.array(qi)]
        gt_t = Tensor(np.array(gt))
        w = np.array(wt)
        loc_l1 = ops.reduce_sum(ops.reduce_sum(ops.abs(pred - gt_t), axis=1) * w)
        g = giou_t(cxcywh_to_xyxy_t(pred), cxcywh_to_xyxy_t(gt_t))
        loc_giou = ops.reduce_sum((1.0 - g) * w)
    else:
        loc_l1 = loc_giou = Tensor(0.0)

    # no-object cross entropy over (M + 1) columns
    target = np.zeros((B, N, M + 1))
    target[:, :, M] = 1.0
    for b, (a, t) in enumerate(zip(assignments, targets)):
        for q, k in a.pairs:
            s0, s1 = t.spans[k]
            target[b, q, :] = 0.0
            target[b, q, s0:s1] = 1.0 / (s1 - s0)
    target *= has[:, None, None] * (inv_b / N)
    col_mask = np.concatenate([~out.token_mask, np.zeros((B, 1), bool)], axis=1)
    lsm = ops.log_softmax(ops.masked_fill(out.alignment_logits, col_mask[:, None, :], NEG), axis=-1)
    noobj = -ops.reduce_sum(lsm * target)

    total = align + loc_l1 * cfg.w_l1 + loc_giou * cfg.w_giou + noobj * cfg.w_noobj
    return LossBreakdown(l_o, l_t, align, loc_l1, loc_giou, noobj, total, assignments)
