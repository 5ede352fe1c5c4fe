"""Diagnose what the extracted object representations encode.

For confident queries matched (IoU >= 0.5) to a generator region, report how
often a rep's nearest neighbour shares the category, the colour or the query
slot, and the homonym separation AUC of the pooled min-distance feature.

    python3 scripts/probe_reps.py runs/train_default/best.ckpt
"""
import sys

import numpy as np

from cpg.boxes import box_iou_np
from cpg.catalog import LOGO
from cpg.brand_eval import BenchmarkConfig, HOMONYM, build_country, build_pairs, default_countries
from cpg.features import ObjectRep, build_cpg_features
from cpg.model import encode_tokens, predict, query_confidence
from cpg.text import caption_for_record
from cpg.trainer import load_trained


def auc(pos, neg):
    pos, neg = np.asarray(pos), np.asarray(neg)
    return float(((pos[:, None] < neg[None]).mean() + 0.5 * (pos[:, None] == neg[None]).mean()))


model, vocab, _ = load_trained(sys.argv[1])
KEY = sys.argv[2] if len(sys.argv) > 2 else "object_reps"
country = [c for c in default_countries() if c.tag == "I"][0]
bench = BenchmarkConfig(countries=[country])
lex = country.generator().lexicon.pos_map()
data = build_country(country, bench)
pairs = build_pairs(data, bench)
recs = data.reference + data.queries
ids, mask, _ = encode_tokens([caption_for_record(r, lex).surfaces for r in recs], vocab, model.cfg.max_tokens)
pred = predict(model, ids, mask, np.stack([r.image for r in recs]))
conf = query_confidence(pred["alignment_logits"])

rows = []
for b, r in enumerate(recs):
    for q in np.nonzero(conf[b] > 0.5)[0]:
        best = max(r.gt_regions, key=lambda g: float(box_iou_np(pred["boxes"][b, q], np.asarray(g.box))))
        if float(box_iou_np(pred["boxes"][b, q], np.asarray(best.box))) < 0.5 or best.role == LOGO:
            continue
        toks = best.phrase.split()
        rows.append((toks[-1], toks[-2] if len(toks) > 1 else "-", q, pred[KEY][b, q]))
V = np.stack([x[3] for x in rows])
D = ((V[:, None] - V[None]) ** 2).sum(-1)
np.fill_diagonal(D, np.inf)
nn = D.argmin(1)
for i, name in enumerate(("category", "colour", "query slot")):
    lab = np.array([x[i] for x in rows])
    print(f"nearest neighbour shares {name}: {np.mean(lab[nn] == lab):.3f}")

reps = {r.record_id: [ObjectRep(pred[KEY][b, q], float(conf[b, q]), (0, 0, 0, 0), r.record_id)
                      for q in np.nonzero(conf[b] > 0.5)[0]] for b, r in enumerate(recs)}
mins = {p_i: build_cpg_features(reps[p.product.record_id], p.brand, reps, exclude_record=p.product.record_id)
        .values[0] for p_i, p in enumerate(pairs)}
pos = [mins[i] for i, p in enumerate(pairs) if p.label == 1 and reps[p.product.record_id]]
neg = [mins[i] for i, p in enumerate(pairs) if p.negative_kind == HOMONYM and reps[p.product.record_id]]
print(f"P(min distance of positive < homonym negative): {auc(pos, neg):.3f}")
