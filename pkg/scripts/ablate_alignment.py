"""Train one grounding model per alignment/positional variant and benchmark each.

    python3 scripts/ablate_alignment.py --out runs/ablation --epochs 30
    python3 scripts/ablate_alignment.py --variants embed:concat word:attention

Each variant is ``align_tokens:image_pos``. Prints grounding metrics and
R@P95 per country and feature set; about 10 CPU-minutes per variant.
"""
import argparse
import json
from pathlib import Path

from cpg.brand_eval import BenchmarkConfig, run_benchmark
from cpg.catalog import GeneratorConfig, generate_catalog
from cpg.teachers import TeacherConfig, build_training_set
from cpg.trainer import TrainConfig, load_trained, new_model, train

ap = argparse.ArgumentParser()
ap.add_argument("--out", default="runs/ablation", type=Path)
ap.add_argument("--epochs", type=int, default=30)
ap.add_argument("--seed", type=int, default=0)
ap.add_argument("--variants", nargs="+", default=["embed:concat", "word:concat", "text:concat", "word:attention"])
a = ap.parse_args()

gen = GeneratorConfig(n_records=2000, seed=a.seed)
_, records = generate_catalog(gen)
data, _ = build_training_set(records, TeacherConfig.noiseless(a.seed), gen.lexicon.pos_map())
rows = {}
for v in a.variants:
    align, pos = v.split(":")
    out = a.out / v.replace(":", "_")
    res = train(new_model(seed=a.seed, align_tokens=align, image_pos=pos), data,
                TrainConfig(epochs=a.epochs, seed=a.seed), out_dir=out)
    model, vocab, _ = load_trained(res.checkpoint)
    rep = run_benchmark(model, vocab, BenchmarkConfig(seed=a.seed))
    rows[v] = {"grounding": res.best_metrics.to_dict(),
               "r_at_p95": {t: {fs: x["r_at_p95"] for fs, x in rep["countries"][t].items()}
                            for t in rep["countries"]}}
    print(v, json.dumps(rows[v]), flush=True)
(a.out / "ablation.json").write_text(json.dumps(rows, indent=2, sort_keys=True))
