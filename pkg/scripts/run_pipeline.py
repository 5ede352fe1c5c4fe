"""Run the full pipeline through the CLI: synth, annotate, train, eval, report.

    python3 scripts/run_pipeline.py --data-dir runs/default
    python3 scripts/run_pipeline.py --data-dir runs/quick --n 400 --epochs 3 --scale 0.25

Each stage writes into its own subdirectory of ``--data-dir`` with a manifest.
"""
import argparse
import json
import os
import sys
import time
from pathlib import Path

from cpg.cli import main as cli


def stage(argv):
    t = time.perf_counter()
    code = cli(argv)
    print(f"[{argv[0]}] exit {code} in {time.perf_counter() - t:.1f}s", flush=True)
    if code:
        sys.exit(code)


def run(data_dir: Path, n=2000, epochs=30, scale=1.0, seed=0, image_embedder="random", model=None):
    os.environ["CPG_DATA_DIR"] = str(data_dir)
    data_dir.mkdir(parents=True, exist_ok=True)
    train_cfg = data_dir / "train_config.json"
    train_cfg.write_text(json.dumps({"epochs": epochs, "model": model or {}}, indent=2))
    stage(["synth", "--n", str(n), "--seed", str(seed)])
    stage(["annotate", "--noiseless", "--seed", str(seed)])
    stage(["train", "--config", str(train_cfg), "--seed", str(seed)])
    stage(["eval", "--scale", str(scale), "--seed", str(seed), "--image-embedder", image_embedder])
    stage(["report"])
    return data_dir / "eval" / "report.json"


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--data-dir", default="runs/default", type=Path)
    ap.add_argument("--n", type=int, default=2000)
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--scale", type=float, default=1.0)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--image-embedder", default="random", choices=["random", "proxy"])
    a = ap.parse_args()
    print(run(a.data_dir, a.n, a.epochs, a.scale, a.seed, a.image_embedder))
