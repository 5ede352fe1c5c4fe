"""Scripted stand-ins for the phrase-grounding and logo-detection teachers.

Both teachers read generator ground truth and corrupt it with box jitter,
misses and spurious detections, each carrying a sampled confidence. Only
detections with confidence > ``CONF_THRESHOLD`` are kept.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .catalog import LOGO, PRODUCT, CatalogRecord
from .text import Caption, caption_for_record

CONF_THRESHOLD = 0.5
PHRASE_TEACHER = "phrase-teacher"
LOGO_TEACHER = "logo-teacher"


@dataclass
class TeacherConfig:
    box_jitter_sigma: float = 0.02
    miss_rate: float = 0.05
    false_positive_rate: float = 0.02
    # "beta": correct ~ 0.5 + 0.5*Beta(4, 1.5); spurious ~ 0.6*Beta(2, 2)
    # "fixed": correct = 1, spurious = 0.3
    confidence_model: str = "beta"
    seed: int = 0

    def __post_init__(self):
        for name in ("miss_rate", "false_positive_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")
        if self.box_jitter_sigma < 0:
            raise ValueError("box_jitter_sigma must be >= 0")
        if self.confidence_model not in ("beta", "fixed"):
            raise ValueError(f"unknown confidence_model {self.confidence_model!r}")

    @classmethod
    def noiseless(cls, seed: int = 0) -> "TeacherConfig":
        return cls(0.0, 0.0, 0.0, "fixed", seed)

    @classmethod
    def load(cls, path) -> "TeacherConfig":
        return cls(**json.loads(Path(path).read_text()))


@dataclass
class GroundingAnnotation:
    record_id: int
    box: tuple          # cx, cy, w, h in [0, 1]
    span: tuple         # token interval into the record's caption
    confidence: float
    source: str

    def to_json(self) -> dict:
        d = asdict(self)
        d["box"], d["span"] = list(self.box), list(self.span)
        return d

    @classmethod
    def from_json(cls, d) -> "GroundingAnnotation":
        return cls(int(d["record_id"]), tuple(d["box"]), tuple(d["span"]), float(d["confidence"]), d["source"])


@dataclass
class DatasetStats:
    n_records: int = 0
    unique_phrases: int = 0
    phrase_boxes: int = 0
    logo_labels: int = 0
    records_with_annotations: int = 0

    def to_dict(self):
        return asdict(self)


@dataclass
class AnnotatedRecord:
    record: CatalogRecord
    caption: Caption
    annotations: list = field(default_factory=list)


def _rng(cfg: TeacherConfig, record_id: int, which: int):
    return np.random.default_rng([cfg.seed, record_id, which])


def _confidence(cfg, rng, correct: bool) -> float:
    if cfg.confidence_model == "fixed":
        return 1.0 if correct else 0.3
    if correct:
        return float(0.5 + 0.5 * rng.beta(4.0, 1.5))
    return float(0.6 * rng.beta(2.0, 2.0))


def jitter_box(box, sigma: float, rng) -> tuple:
    """Gaussian-jitter a cxcywh box, then clamp its corners into [0, 1].

    ``sigma`` is in units of the box side (so small logos and large shapes
    see the same relative noise); sizes get log-normal noise of the same scale.
    """
    if sigma == 0:
        return tuple(float(v) for v in box)
    cx, cy, w, h = box
    cx, cy = cx + rng.normal(0, sigma * w * 2), cy + rng.normal(0, sigma * h * 2)
    w, h = w * np.exp(rng.normal(0, sigma * 2)), h * np.exp(rng.normal(0, sigma * 2))
    x0, y0 = min(max(cx - w / 2, 0.0), 1.0), min(max(cy - h / 2, 0.0), 1.0)
    x1, y1 = min(max(cx + w / 2, 0.0), 1.0), min(max(cy + h / 2, 0.0), 1.0)
    return ((x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0)


def _random_box(rng) -> tuple:
    w, h = rng.uniform(0.1, 0.4, size=2)
    cx, cy = rng.uniform(w / 2, 1 - w / 2), rng.uniform(h / 2, 1 - h / 2)
    return (float(cx), float(cy), float(w), float(h))


def phrase_teacher(record: CatalogRecord, caption: Caption, cfg: TeacherConfig) -> list:
    """Boxes for noun phrases whose text names a rendered product shape."""
    rng = _rng(cfg, record.record_id, 1)
    by_phrase = {r.phrase: r for r in record.gt_regions if r.role == PRODUCT}
    out = []
    for span in caption.noun_phrases:
        region = by_phrase.get(caption.span_text(span))
        if region is None:
            continue
        if rng.random() < cfg.miss_rate:
            continue
        conf = _confidence(cfg, rng, True)
        out.append(GroundingAnnotation(record.record_id, jitter_box(region.box, cfg.box_jitter_sigma, rng),
                                       span, conf, PHRASE_TEACHER))
    if caption.noun_phrases and rng.random() < cfg.false_positive_rate:
        span = caption.noun_phrases[int(rng.integers(len(caption.noun_phrases)))]
        out.append(GroundingAnnotation(record.record_id, _random_box(rng), span,
                                       _confidence(cfg, rng, False), PHRASE_TEACHER))
    return [a for a in out if a.confidence > CONF_THRESHOLD]


def detect_logo(record: CatalogRecord, cfg: TeacherConfig):
    """Caption-free logo detection: ``(box, confidence)`` or None."""
    rng = _rng(cfg, record.record_id, 2)
    logo = next((r for r in record.gt_regions if r.role == LOGO), None)
    if logo is None:
        if rng.random() < cfg.false_positive_rate:
            det = (_random_box(rng), _confidence(cfg, rng, False))
            return det if det[1] > CONF_THRESHOLD else None
        return None
    if rng.random() < cfg.miss_rate:
        return None
    det = (jitter_box(logo.box, cfg.box_jitter_sigma, rng), _confidence(cfg, rng, True))
    return det if det[1] > CONF_THRESHOLD else None


def logo_teacher(record: CatalogRecord, caption: Caption, cfg: TeacherConfig) -> Optional[GroundingAnnotation]:
    """The detected logo box tied to the caption's brand section, if both exist."""
    if caption.brand_span is None:
        return None
    det = detect_logo(record, cfg)
    if det is None:
        return None
    return GroundingAnnotation(record.record_id, det[0], caption.brand_span, det[1], LOGO_TEACHER)


def annotate_record(record: CatalogRecord, cfg: TeacherConfig, lexicon: dict) -> AnnotatedRecord:
    cap = caption_for_record(record, lexicon)
    anns = phrase_teacher(record, cap, cfg)
    logo = logo_teacher(record, cap, cfg)
    if logo is not None:
        anns.append(logo)
    return AnnotatedRecord(record, cap, anns)


def build_training_set(records, cfg: TeacherConfig, lexicon: dict):
    """Run both teachers over ``records``; returns ``(annotated, stats)``."""
    data = [annotate_record(r, cfg, lexicon) for r in records]
    return data, dataset_stats(data)


def dataset_stats(data) -> DatasetStats:
    phrases = set()
    n_phrase = n_logo = n_with = 0
    for d in data:
        if d.annotations:
            n_with += 1
        for a in d.annotations:
            if a.source == PHRASE_TEACHER:
                n_phrase += 1
                phrases.add(d.caption.span_text(a.span))
            else:
                n_logo += 1
    return DatasetStats(len(data), len(phrases), n_phrase, n_logo, n_with)


def export_annotations(data, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for d in data:
            for a in d.annotations:
                f.write(json.dumps(a.to_json(), sort_keys=True) + "\n")


def load_annotations(path) -> dict:
    """record_id -> list of annotations."""
    from .catalog import CatalogFormatError

    out: dict = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                a = GroundingAnnotation.from_json(json.loads(line))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise CatalogFormatError(path, lineno, f"{type(e).__name__}: {e}") from None
            out.setdefault(a.record_id, []).append(a)
    return out


def attach_annotations(records, by_record: dict, lexicon: dict) -> list:
    return [AnnotatedRecord(r, caption_for_record(r, lexicon), list(by_record.get(r.record_id, [])))
            for r in records]
