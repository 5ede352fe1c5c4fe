"""Object representations from a trained model and distance-statistic features.

A product is compared with a brand through the representations of the
brand's representative products: all pairwise distances are pooled, then
summarized by (min, max, median, population variance) per metric, plus two
emptiness flags.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .model import CpgModel, encode_tokens, predict, query_confidence
from .teachers import CONF_THRESHOLD
from .text import Vocab, caption_for_record

METRICS = ("euclidean", "cosine")
STATS = ("min", "max", "median", "var")


@dataclass
class ObjectRep:
    vector: np.ndarray
    confidence: float
    box: tuple
    record_id: int

    def __post_init__(self):
        if not self.confidence > CONF_THRESHOLD:
            raise ValueError(f"ObjectRep confidence {self.confidence} <= {CONF_THRESHOLD}")


@dataclass
class BrandEntity:
    name: str
    brand_id: int
    representatives: list = field(default_factory=list)   # CatalogRecords


def feature_columns(prefix: str = "cpg") -> list:
    cols = [f"{prefix}_{m}_{s}" for m in METRICS for s in STATS]
    return cols + [f"{prefix}_product_empty", f"{prefix}_brand_empty"]


# ---------------------------------------------------------------- extraction
def extract_reps_batch(model: CpgModel, records, vocab: Vocab, lexicon: dict,
                       batch_size: int = 64, threshold: float = CONF_THRESHOLD) -> dict:
    """record_id -> list of ObjectRep whose confidence exceeds ``threshold``."""
    records = list(records)
    if not records:
        return {}
    caps = [caption_for_record(r, lexicon) for r in records]
    ids, mask, _ = encode_tokens([c.surfaces for c in caps], vocab, model.cfg.max_tokens)
    images = np.stack([r.image for r in records])
    pred = predict(model, ids, mask, images, batch_size)
    conf = query_confidence(pred["alignment_logits"])
    out = {}
    for b, r in enumerate(records):
        keep = np.nonzero(conf[b] > threshold)[0]
        out[r.record_id] = [ObjectRep(pred["object_reps"][b, q].copy(), float(conf[b, q]),
                                      tuple(float(v) for v in pred["boxes"][b, q]), r.record_id)
                            for q in keep]
    return out


def extract_reps(model: CpgModel, record, vocab: Vocab, lexicon: dict) -> list:
    return extract_reps_batch(model, [record], vocab, lexicon)[record.record_id]


# ---------------------------------------------------------------- distances
def _as_matrix(vecs) -> np.ndarray:
    if isinstance(vecs, np.ndarray):
        return vecs.reshape(-1, vecs.shape[-1]) if vecs.size else np.zeros((0, 0))
    vecs = [v.vector if isinstance(v, ObjectRep) else np.asarray(v, dtype=np.float64) for v in vecs]
    return np.stack(vecs) if vecs else np.zeros((0, 0))


def distance_matrix(q: np.ndarray, r: np.ndarray, metric: str) -> np.ndarray:
    if metric == "euclidean":
        diff = q[:, None, :] - r[None, :, :]
        return np.sqrt((diff * diff).sum(-1))
    if metric == "cosine":
        nq = np.linalg.norm(q, axis=1)
        nr = np.linalg.norm(r, axis=1)
        dots = q @ r.T
        den = nq[:, None] * nr[None, :]
        sim = np.divide(dots, den, out=np.zeros_like(dots), where=den > 0)
        d = 1.0 - sim
        d[den == 0] = 1.0
        return d
    raise ValueError(f"unknown metric {metric!r}")


def pairwise_distances(query_reps, brand_reps, metric: str) -> np.ndarray:
    """Pooled distances between every query rep and every rep of every representative.

    ``brand_reps`` is a list with one entry (a rep list or matrix) per
    representative product.
    """
    q = _as_matrix(query_reps)
    mats = [_as_matrix(r) for r in brand_reps]
    mats = [m for m in mats if m.size]
    if q.size == 0 or not mats:
        return np.zeros(0)
    return distance_matrix(q, np.concatenate(mats), metric).ravel()


def summarize(distances) -> tuple:
    """(min, max, median, population variance); zeros for an empty input."""
    d = np.sort(np.asarray(distances, dtype=np.float64).ravel())
    if d.size == 0:
        return (0.0, 0.0, 0.0, 0.0)
    return (float(d[0]), float(d[-1]), float(np.median(d)), float(np.var(d)))


def stat_block(query_reps, brand_reps, metrics=METRICS, pooling: str = "pooled") -> list:
    """Stats per metric followed by ``product_empty`` and ``brand_empty``."""
    q = _as_matrix(query_reps)
    per_rep = [_as_matrix(r) for r in brand_reps]
    per_rep = [m for m in per_rep if m.size]
    p_empty, b_empty = q.size == 0, not per_rep
    row = []
    for metric in metrics:
        if p_empty or b_empty:
            row.extend((0.0, 0.0, 0.0, 0.0))
        elif pooling == "pooled":
            row.extend(summarize(distance_matrix(q, np.concatenate(per_rep), metric)))
        elif pooling == "per_rep":
            stats = np.array([summarize(distance_matrix(q, m, metric)) for m in per_rep])
            row.extend(float(v) for v in np.sort(stats, axis=0).mean(axis=0))
        else:
            raise ValueError(f"unknown pooling {pooling!r}")
    return row + [float(p_empty), float(b_empty)]


@dataclass
class CpgFeatureRow:
    values: list

    @property
    def product_empty(self) -> bool:
        return bool(self.values[-2])

    @property
    def brand_empty(self) -> bool:
        return bool(self.values[-1])

    def as_dict(self, prefix: str = "cpg") -> dict:
        return dict(zip(feature_columns(prefix), self.values))


def build_cpg_features(product_reps, brand: BrandEntity, reps_by_record: dict,
                       pooling: str = "pooled", exclude_record: Optional[int] = None) -> CpgFeatureRow:
    """Feature row for one (product, brand) pair from pre-extracted reps.

    ``exclude_record`` drops the product itself from the brand's
    representatives so a positive pair never compares a product with itself.
    """
    reps = [reps_by_record.get(r.record_id, []) for r in brand.representatives
            if r.record_id != exclude_record]
    return CpgFeatureRow(stat_block(product_reps, reps, METRICS, pooling))


def write_feature_table(path, columns, rows, keys=None) -> None:
    """CSV with a ``#`` header comment documenting the column order."""
    with open(path, "w", newline="") as f:
        f.write("# columns: " + ",".join(columns) + "\n")
        w = csv.writer(f)
        key_cols = list(keys[0].keys()) if keys else []
        w.writerow(key_cols + list(columns))
        for i, row in enumerate(rows):
            w.writerow(([keys[i][k] for k in key_cols] if keys else []) + [repr(float(v)) for v in row])


def read_feature_table(path):
    with open(path, newline="") as f:
        lines = [ln for ln in f if not ln.startswith("#")]
    r = csv.reader(lines)
    header = next(r)
    return header, [row for row in r]
