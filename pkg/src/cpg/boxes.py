"""Box conversions, IoU and generalized IoU (numpy and differentiable variants)."""
from __future__ import annotations

import numpy as np

from .engine import Tensor, ops

EPS = 1e-12


def cxcywh_to_xyxy(box) -> np.ndarray:
    b = np.asarray(box, dtype=np.float64)
    if np.any(b[..., 2:] < 0):
        raise ValueError("box has negative width/height")
    cx, cy, w, h = np.moveaxis(b, -1, 0)
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=-1)


def xyxy_to_cxcywh(box) -> np.ndarray:
    b = np.asarray(box, dtype=np.float64)
    x0, y0, x1, y1 = np.moveaxis(b, -1, 0)
    if np.any(x1 < x0) or np.any(y1 < y0):
        raise ValueError("corner box has negative extent")
    return np.stack([(x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0], axis=-1)


def _safe_div(num, den):
    den = np.asarray(den, dtype=np.float64)
    return np.divide(num, den, out=np.zeros(np.broadcast(num, den).shape), where=den > 0)


def _area(b):
    return (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])


def box_iou_np(a, b, fmt: str = "cxcywh") -> np.ndarray:
    """Elementwise IoU of broadcastable box arrays."""
    if fmt == "cxcywh":
        a, b = cxcywh_to_xyxy(a), cxcywh_to_xyxy(b)
    lt = np.maximum(a[..., :2], b[..., :2])
    rb = np.minimum(a[..., 2:], b[..., 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = _area(a) + _area(b) - inter
    return _safe_div(inter, union)


def giou_np(a, b) -> np.ndarray:
    """Generalized IoU of broadcastable corner boxes."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    lt = np.maximum(a[..., :2], b[..., :2])
    rb = np.minimum(a[..., 2:], b[..., 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = _area(a) + _area(b) - inter
    iou = _safe_div(inter, union)
    elt = np.minimum(a[..., :2], b[..., :2])
    erb = np.maximum(a[..., 2:], b[..., 2:])
    ewh = np.clip(erb - elt, 0, None)
    enc = ewh[..., 0] * ewh[..., 1]
    return iou - _safe_div(enc - union, enc)


giou = giou_np


def pairwise_giou_np(a, b) -> np.ndarray:
    """(n, 4) x (m, 4) corner boxes -> (n, m) GIoU matrix."""
    return giou_np(np.asarray(a)[:, None, :], np.asarray(b)[None, :, :])


# ---------------------------------------------------------------- differentiable
def cxcywh_to_xyxy_t(b: Tensor) -> Tensor:
    cx, cy, w, h = b[:, 0:1], b[:, 1:2], b[:, 2:3], b[:, 3:4]
    return ops.concat([cx - w * 0.5, cy - h * 0.5, cx + w * 0.5, cy + h * 0.5], axis=1)


def giou_t(a: Tensor, b: Tensor) -> Tensor:
    """Paired GIoU of (P, 4) corner-box tensors -> (P,)."""
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    iw = ops.relu(ops.minimum(a[:, 2], b[:, 2]) - ops.maximum(a[:, 0], b[:, 0]))
    ih = ops.relu(ops.minimum(a[:, 3], b[:, 3]) - ops.maximum(a[:, 1], b[:, 1]))
    inter = iw * ih
    union = area_a + area_b - inter
    ew = ops.maximum(a[:, 2], b[:, 2]) - ops.minimum(a[:, 0], b[:, 0])
    eh = ops.maximum(a[:, 3], b[:, 3]) - ops.minimum(a[:, 1], b[:, 1])
    enc = ew * eh
    return inter / (union + EPS) - (enc - union) / (enc + EPS)
