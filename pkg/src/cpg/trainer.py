"""Mini-batch training over pseudo-labelled records, checkpointing, grounding metrics."""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .boxes import box_iou_np
from .catalog import LOGO, PRODUCT
from .engine import AdamW, backward, clip_grad_norm
from .losses import LossConfig, Targets, total_loss
from .model import CpgModel, ModelConfig, encode_tokens, predict
from .teachers import LOGO_TEACHER
from .text import Vocab, default_vocab

log = logging.getLogger(__name__)

PHRASE_TASK, LOGO_TASK = "phrase", "logo"


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 16
    epochs: int = 30
    lr: float = 1e-3
    schedule: str = "warmup_cosine"     # constant | warmup | warmup_cosine
    warmup_frac: float = 0.05
    min_lr_frac: float = 0.05
    weight_decay: float = 1e-4
    grad_clip: float = 1.0
    loss: LossConfig = field(default_factory=LossConfig)
    seed: int = 0
    eval_fraction: float = 0.1
    eval_every: int = 0                 # steps; 0 = once per epoch
    checkpoint_every: int = 0           # steps; 0 = only best/last
    max_steps: Optional[int] = None
    time_budget_s: Optional[float] = None
    drop_logo_annotations: bool = False

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 < self.eval_fraction < 1.0:
            raise ValueError("eval_fraction must be in (0, 1)")
        if not 0.0 <= self.warmup_frac < 1.0:
            raise ValueError("warmup_frac must be in [0, 1)")
        if self.schedule not in ("constant", "warmup", "warmup_cosine"):
            raise ValueError(f"unknown schedule {self.schedule!r}")

    def to_dict(self):
        return asdict(self)


def lr_at(cfg: TrainConfig, step: int, total: int) -> float:
    if cfg.schedule == "constant":
        return cfg.lr
    warm = max(1, int(round(cfg.warmup_frac * total)))
    if step < warm:
        return cfg.lr * (step + 1) / warm
    if cfg.schedule == "warmup":
        return cfg.lr
    t = min(1.0, (step - warm) / max(1, total - warm))
    lo = cfg.lr * cfg.min_lr_frac
    return lo + 0.5 * (cfg.lr - lo) * (1 + np.cos(np.pi * t))


# ---------------------------------------------------------------- data
@dataclass
class Batchable:
    """Arrays for a list of annotated records, ready for slicing into batches."""
    ids: np.ndarray
    mask: np.ndarray
    images: np.ndarray
    targets: list
    items: list           # the AnnotatedRecords, same order

    def __len__(self):
        return len(self.items)

    def subset(self, idx) -> "Batchable":
        idx = np.asarray(idx, dtype=int)
        return Batchable(self.ids[idx], self.mask[idx], self.images[idx],
                         [self.targets[i] for i in idx], [self.items[i] for i in idx])


def make_targets(item, max_tokens: int, drop_logo: bool = False) -> Targets:
    boxes, spans = [], []
    for a in item.annotations:
        if drop_logo and a.source == LOGO_TEACHER:
            continue
        if a.span[1] > max_tokens:
            log.warning("record %d: span %s beyond %d tokens dropped", a.record_id, a.span, max_tokens)
            continue
        boxes.append(a.box)
        spans.append(a.span)
    return Targets(boxes, spans)


def collate(items, vocab: Vocab, max_tokens: int, drop_logo: bool = False) -> Batchable:
    ids, mask, _ = encode_tokens([d.caption.surfaces for d in items], vocab, max_tokens)
    images = np.stack([d.record.image for d in items]) if items else np.zeros((0, 1, 1, 3), np.uint8)
    targets = [make_targets(d, max_tokens, drop_logo) for d in items]
    return Batchable(ids, mask, images, targets, list(items))


def split_indices(n: int, eval_fraction: float, seed: int):
    perm = np.random.default_rng([seed, 7]).permutation(n)
    n_eval = max(1, int(round(n * eval_fraction))) if n > 1 else 0
    return np.sort(perm[n_eval:]), np.sort(perm[:n_eval])


# ---------------------------------------------------------------- metrics
@dataclass
class GroundingMetrics:
    ap50: float = 0.0
    align_acc: float = 0.0
    phrase_ap50: float = 0.0
    phrase_align_acc: float = 0.0
    logo_ap50: float = 0.0
    logo_align_acc: float = 0.0
    n_phrase: int = 0
    n_logo: int = 0

    def to_dict(self):
        return asdict(self)


def gt_regions(item) -> list:
    """Generator ground truth as (box, span, task) using caption spans."""
    cap = item.caption
    by_text = {cap.span_text(s): s for s in cap.noun_phrases}
    out = []
    for r in item.record.gt_regions:
        if r.role == PRODUCT and r.phrase in by_text:
            out.append((r.box, by_text[r.phrase], PHRASE_TASK))
        elif r.role == LOGO and cap.brand_span is not None:
            out.append((r.box, cap.brand_span, LOGO_TASK))
    return out


def average_precision(scores, is_tp, n_gt: int) -> float:
    """All-point interpolated AP of a ranked detection list."""
    if n_gt == 0:
        return 0.0
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    tp = np.asarray(is_tp, dtype=np.float64)[order]
    ctp = np.cumsum(tp)
    prec = ctp / np.arange(1, len(tp) + 1)
    rec = ctp / n_gt
    prec = np.concatenate([[0.0], prec, [0.0]])
    rec = np.concatenate([[0.0], rec, [rec[-1] if len(rec) else 0.0]])
    for i in range(len(prec) - 2, -1, -1):
        prec[i] = max(prec[i], prec[i + 1])
    return float(np.sum((rec[1:] - rec[:-1]) * prec[1:]))


def _span_probs(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    z = np.where(np.append(mask, True)[None, :], logits, -np.inf)
    z = z - z.max(axis=1, keepdims=True)
    p = np.exp(z)
    return p / p.sum(axis=1, keepdims=True)


def evaluate_grounding(model: CpgModel, data: Batchable, batch_size: int = 64) -> GroundingMetrics:
    """Phrase-conditioned detection AP@0.5 and alignment accuracy against generator gt.

    For each gt region every query is a detection scored by its mean softmax
    probability over the region's span; a detection is a true positive when it
    is the top-scoring query with IoU >= 0.5 to that gt box.
    """
    if len(data) == 0:
        return GroundingMetrics()
    pred = predict(model, data.ids, data.mask, data.images, batch_size)
    dets = {PHRASE_TASK: ([], []), LOGO_TASK: ([], [])}
    correct = {PHRASE_TASK: [], LOGO_TASK: []}
    for b, item in enumerate(data.items):
        regions = gt_regions(item)
        if not regions:
            continue
        probs = _span_probs(pred["alignment_logits"][b], data.mask[b])
        boxes = pred["boxes"][b]
        cand = list(item.caption.noun_phrases)
        if item.caption.brand_span is not None:
            cand.append(item.caption.brand_span)
        for box, span, task in regions:
            score = probs[:, span[0]:span[1]].mean(axis=1)
            iou = box_iou_np(boxes, np.asarray(box)[None, :])
            order = np.argsort(-score, kind="stable")
            matched = False
            for q in order:
                hit = (not matched) and iou[q] >= 0.5
                matched |= hit
                dets[task][0].append(score[q])
                dets[task][1].append(hit)
            q_star = int(np.argmax(iou))
            span_scores = [probs[q_star, s0:s1].mean() for s0, s1 in cand]
            correct[task].append(cand[int(np.argmax(span_scores))] == span)
    m = GroundingMetrics()
    n_gt = {t: len(correct[t]) for t in correct}
    m.n_phrase, m.n_logo = n_gt[PHRASE_TASK], n_gt[LOGO_TASK]
    m.phrase_ap50 = average_precision(*dets[PHRASE_TASK], n_gt[PHRASE_TASK])
    m.logo_ap50 = average_precision(*dets[LOGO_TASK], n_gt[LOGO_TASK])
    m.phrase_align_acc = float(np.mean(correct[PHRASE_TASK])) if correct[PHRASE_TASK] else 0.0
    m.logo_align_acc = float(np.mean(correct[LOGO_TASK])) if correct[LOGO_TASK] else 0.0
    all_dets = (dets[PHRASE_TASK][0] + dets[LOGO_TASK][0], dets[PHRASE_TASK][1] + dets[LOGO_TASK][1])
    m.ap50 = average_precision(*all_dets, sum(n_gt.values()))
    both = correct[PHRASE_TASK] + correct[LOGO_TASK]
    m.align_acc = float(np.mean(both)) if both else 0.0
    return m


def _score(m: GroundingMetrics) -> float:
    return m.align_acc + m.ap50


# ---------------------------------------------------------------- training
@dataclass
class TrainResult:
    checkpoint: Optional[Path]
    losses: list              # per-step dicts
    best_metrics: Optional[GroundingMetrics]
    history: list             # (step, metrics dict)
    steps: int = 0
    seconds: float = 0.0


LOSS_FIELDS = ("step", "lr", "total", "l_o", "l_t", "align", "loc_l1", "loc_giou", "noobj")


def _dump_batch(out_dir: Path, step: int, batch: Batchable) -> Path:
    p = out_dir / f"nan_batch_step{step}.npz"
    np.savez(p, ids=batch.ids, mask=batch.mask, images=batch.images,
             record_ids=np.array([d.record.record_id for d in batch.items]))
    return p


def train(model: CpgModel, dataset, cfg: TrainConfig, out_dir=None, vocab: Optional[Vocab] = None,
          eval_data=None) -> TrainResult:
    """Train ``model`` in place on annotated records (or a prepared Batchable).

    When ``eval_data`` is None a held-out split of ``dataset`` is used. Writes
    ``loss.csv``, ``best.ckpt``, ``last.ckpt`` and ``metrics.json`` if
    ``out_dir`` is given.
    """
    vocab = vocab or default_vocab()
    M = model.cfg.max_tokens
    if not isinstance(dataset, Batchable):
        dataset = collate(list(dataset), vocab, M, cfg.drop_logo_annotations)
    if len(dataset) == 0:
        raise ValueError("empty training set")
    if eval_data is None and len(dataset) > 1:
        tr_idx, ev_idx = split_indices(len(dataset), cfg.eval_fraction, cfg.seed)
        train_set, eval_set = dataset.subset(tr_idx), dataset.subset(ev_idx)
    else:
        train_set = dataset
        eval_set = eval_data if isinstance(eval_data, Batchable) or eval_data is None else \
            collate(list(eval_data), vocab, M)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    params = model.parameters()
    no_decay = [p for n, p in model.named_parameters() if n.endswith(("bias", "gamma", "beta"))]
    opt = AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay, no_decay=no_decay)
    rng = np.random.default_rng(cfg.seed)
    n = len(train_set)
    per_epoch = max(1, int(np.ceil(n / cfg.batch_size)))
    total_steps = cfg.max_steps if cfg.max_steps is not None else cfg.epochs * per_epoch
    eval_every = cfg.eval_every or per_epoch
    meta = {"train_config": cfg.to_dict(), "vocab": vocab.to_list()}

    losses, history = [], []
    best, best_path = None, None
    t0 = time.perf_counter()
    step = 0
    csv_f = open(out / "loss.csv", "w", newline="") if out is not None else None
    writer = csv.DictWriter(csv_f, fieldnames=LOSS_FIELDS) if csv_f else None
    if writer:
        writer.writeheader()
    try:
        while step < total_steps:
            perm = rng.permutation(n)
            for s in range(0, n, cfg.batch_size):
                if step >= total_steps:
                    break
                idx = perm[s:s + cfg.batch_size]
                opt.lr = lr_at(cfg, step, total_steps)
                o = model.forward_batch(train_set.ids[idx], train_set.mask[idx], train_set.images[idx])
                lb = total_loss(o, [train_set.targets[i] for i in idx], cfg.loss)
                row = {"step": step, "lr": opt.lr, **lb.as_floats()}
                if not np.isfinite(row["total"]):
                    p = _dump_batch(out or Path("."), step, train_set.subset(idx))
                    raise TrainingDivergedError(f"non-finite loss at step {step}; batch dumped to {p}")
                opt.zero_grad()
                backward(lb.total)
                clip_grad_norm(params, cfg.grad_clip)
                opt.step()
                losses.append(row)
                if writer:
                    writer.writerow({k: row[k] for k in LOSS_FIELDS})
                step += 1
                if out is not None and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                    model.save(out / f"step{step}.ckpt", meta)
                if eval_set is not None and len(eval_set) and (step % eval_every == 0 or step == total_steps):
                    m = evaluate_grounding(model, eval_set)
                    history.append((step, m.to_dict()))
                    log.info("step %d loss %.4f eval %s", step, row["total"], m.to_dict())
                    if best is None or _score(m) > _score(best):
                        best = m
                        if out is not None:
                            best_path = out / "best.ckpt"
                            model.save(best_path, {**meta, "step": step, "metrics": m.to_dict()})
                if cfg.time_budget_s is not None and time.perf_counter() - t0 > cfg.time_budget_s:
                    total_steps = step
                    break
    finally:
        if csv_f:
            csv_f.close()
    if out is not None:
        model.save(out / "last.ckpt", {**meta, "step": step})
        if best_path is None:
            best_path = out / "last.ckpt"
        (out / "metrics.json").write_text(json.dumps(
            {"best": best.to_dict() if best else None, "history": history, "steps": step},
            indent=2, sort_keys=True))
    return TrainResult(best_path, losses, best, history, step, time.perf_counter() - t0)


def load_trained(path):
    """Model, vocab and meta from a checkpoint written by :func:`train`."""
    model, meta = CpgModel.load(path)
    vocab = Vocab.from_list(meta["vocab"]) if "vocab" in meta else default_vocab()
    return model, vocab, meta


def new_model(vocab: Optional[Vocab] = None, **overrides) -> CpgModel:
    vocab = vocab or default_vocab()
    return CpgModel(ModelConfig(vocab_size=len(vocab), **overrides))
