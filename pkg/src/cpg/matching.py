"""Bipartite assignment between predicted queries and annotations."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .boxes import cxcywh_to_xyxy, pairwise_giou_np


@dataclass
class Assignment:
    pairs: list = field(default_factory=list)      # (query, annotation) sorted by query
    unmatched: list = field(default_factory=list)  # query indices

    @property
    def queries(self):
        return [q for q, _ in self.pairs]

    @property
    def targets(self):
        return [k for _, k in self.pairs]


def _lsa_rows(cost: np.ndarray) -> np.ndarray:
    """Shortest augmenting path assignment for n <= m; returns column per row."""
    n, m = cost.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=int)      # p[j] = row (1-based) matched to column j, 0 = free
    way = np.zeros(m + 1, dtype=int)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            used_idx = np.nonzero(used)[0]
            u[p[used_idx]] += delta
            v[used_idx] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    col_of_row = np.full(n, -1, dtype=int)
    for j in range(1, m + 1):
        if p[j]:
            col_of_row[p[j] - 1] = j - 1
    return col_of_row


def hungarian(cost) -> Assignment:
    """Minimum-cost one-to-one assignment of ``min(n, m)`` (row, col) pairs.

    Rows are queries, columns annotations.
    """
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2:
        raise ValueError(f"cost must be 2-D, got shape {c.shape}")
    if np.isnan(c).any():
        raise ValueError("cost matrix contains NaN")
    if not np.isfinite(c).all():
        raise ValueError("cost matrix contains inf")
    n, m = c.shape
    if n == 0 or m == 0:
        return Assignment([], list(range(n)))
    if n <= m:
        cols = _lsa_rows(c)
        pairs = [(i, int(cols[i])) for i in range(n)]
    else:
        rows = _lsa_rows(c.T)
        pairs = sorted((int(rows[j]), j) for j in range(m))
    matched = {q for q, _ in pairs}
    return Assignment(pairs, [q for q in range(n) if q not in matched])


def assignment_cost(cost, a: Assignment) -> float:
    c = np.asarray(cost)
    return float(sum(c[q, k] for q, k in a.pairs))


def span_probability(align_logits: np.ndarray, token_mask: np.ndarray, spans) -> np.ndarray:
    """Mean softmax probability over each span: (N, M+1) logits -> (N, K).

    The softmax runs over real tokens plus the no-object column.
    """
    logits = np.where(np.append(token_mask, True)[None, :], align_logits, -np.inf)
    logits = logits - logits.max(axis=1, keepdims=True)
    prob = np.exp(logits)
    prob /= prob.sum(axis=1, keepdims=True)
    out = np.zeros((logits.shape[0], len(spans)))
    for k, (a, b) in enumerate(spans):
        out[:, k] = prob[:, a:b].mean(axis=1)
    return out


def matching_cost(pred_boxes, align_logits, token_mask, gt_boxes, spans,
                  w_align: float = 1.0, w_l1: float = 5.0, w_giou: float = 2.0) -> np.ndarray:
    """N x K cost: -span probability + w_l1 * L1 + w_giou * (1 - GIoU)."""
    pred_boxes = np.asarray(pred_boxes, dtype=np.float64)
    n = pred_boxes.shape[0]
    k = len(spans)
    if k == 0:
        return np.zeros((n, 0))
    gt = np.asarray(gt_boxes, dtype=np.float64).reshape(k, 4)
    l1 = np.abs(pred_boxes[:, None, :] - gt[None, :, :]).sum(-1)
    g = pairwise_giou_np(cxcywh_to_xyxy(pred_boxes), cxcywh_to_xyxy(gt))
    p = span_probability(np.asarray(align_logits), np.asarray(token_mask, bool), spans)
    return -w_align * p + w_l1 * l1 + w_giou * (1.0 - g)
