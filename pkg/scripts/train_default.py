"""Train the default model on 2000 noiseless-teacher records and print held-out metrics.

    python3 scripts/train_default.py --out runs/train_default [--epochs 30] [--align-tokens embed]
"""
import argparse
import json
import logging

from cpg.catalog import GeneratorConfig, generate_catalog
from cpg.teachers import TeacherConfig, build_training_set
from cpg.trainer import TrainConfig, new_model, train

ap = argparse.ArgumentParser()
ap.add_argument("--out", default="runs/train_default")
ap.add_argument("--epochs", type=int, default=30)
ap.add_argument("--seed", type=int, default=0)
ap.add_argument("--align-tokens", default="embed", choices=["embed", "text", "cross"])
ap.add_argument("--drop-logo", action="store_true")
a = ap.parse_args()
logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

gen = GeneratorConfig(n_records=2000, seed=a.seed)
_, records = generate_catalog(gen)
data, stats = build_training_set(records, TeacherConfig.noiseless(a.seed), gen.lexicon.pos_map())
print(json.dumps(stats.to_dict()))
model = new_model(seed=a.seed, align_tokens=a.align_tokens)
res = train(model, data, TrainConfig(epochs=a.epochs, seed=a.seed, drop_logo_annotations=a.drop_logo), out_dir=a.out)
print(json.dumps({"best": res.best_metrics.to_dict(), "steps": res.steps, "seconds": round(res.seconds, 1)}))
