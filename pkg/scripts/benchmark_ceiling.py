"""Downstream headroom with oracle object reps.

Replaces the model's reps by one-hot category vectors of the generator's
product regions plus Gaussian noise, then runs the default benchmark. Shows
how much a category-aware representation could add over text and logos.

    python3 scripts/benchmark_ceiling.py --noise 0 0.3 1.0
"""
import argparse

import numpy as np

from cpg.brand_eval import CPG, LOGO_SET, TEXT, BenchmarkConfig, build_country, run_benchmark
from cpg.catalog import PRODUCT, Lexicon
from cpg.features import ObjectRep


def oracle_reps(records, noise, rng):
    cats = Lexicon().categories
    out = {}
    for r in records:
        reps = []
        for g in r.gt_regions:
            if g.role != PRODUCT:
                continue
            v = np.zeros(len(cats))
            v[cats.index(g.phrase.split()[-1])] = 1.0
            reps.append(ObjectRep(v + rng.normal(0, noise, v.shape), 1.0, g.box, r.record_id))
        out[r.record_id] = reps
    return out


if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--noise", type=float, nargs="+", default=[0.0, 0.3, 1.0])
    ap.add_argument("--seed", type=int, default=0)
    a = ap.parse_args()
    bench = BenchmarkConfig(seed=a.seed)
    recs = [r for c in bench.countries for d in [build_country(c, bench)] for r in d.reference + d.queries]
    for noise in a.noise:
        rep = run_benchmark(None, None, bench, precomputed=oracle_reps(recs, noise, np.random.default_rng(a.seed)),
                            sets=(TEXT, LOGO_SET, CPG))
        r95 = {t: {fs: round(v["r_at_p95"], 3) for fs, v in rep["countries"][t].items()} for t in rep["countries"]}
        print(f"noise {noise}: {r95}")
