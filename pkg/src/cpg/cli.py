"""Command line entry point: synth, annotate, train, extract, featurize, eval, report.

Every subcommand accepts ``--config file.json``; explicit flags override the
file. Outputs go to ``--out`` (default: a subdirectory of ``$CPG_DATA_DIR``)
together with ``manifest.json``. Failures print one ``ErrorClass: message``
line on stderr; exit 2 is a usage error, 3 a missing input.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__

DATA_ENV = "CPG_DATA_DIR"
EXIT_USAGE, EXIT_MISSING, EXIT_FAIL = 2, 3, 1

log = logging.getLogger("cpg")


class UsageError(Exception):
    code = EXIT_USAGE


class MissingInputError(Exception):
    code = EXIT_MISSING


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message.replace("\n", " "))


def data_dir() -> Path:
    return Path(os.environ.get(DATA_ENV, "cpg_data"))


# ---------------------------------------------------------------- manifest
def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, default=str).encode()).hexdigest()


def write_manifest(out: Path, command: str, argv, cfg: dict, inputs: dict) -> None:
    outputs = {p.name: sha256_file(p) for p in sorted(out.iterdir())
               if p.is_file() and p.name != "manifest.json"}
    m = {
        "command": command,
        "argv": list(argv),
        "config": cfg,
        "config_hash": config_hash(cfg),
        "seed": cfg.get("seed"),
        "versions": {"cpg": __version__, "numpy": np.__version__, "python": platform.python_version()},
        "inputs": {k: {"path": str(v), "sha256": sha256_file(v)} for k, v in inputs.items()},
        "outputs": outputs,
    }
    (out / "manifest.json").write_text(json.dumps(m, indent=2, sort_keys=True))


# ---------------------------------------------------------------- config plumbing
def resolve(args, defaults: dict) -> dict:
    """defaults < JSON config file < explicit flags."""
    cfg = dict(defaults)
    if getattr(args, "config", None):
        p = Path(args.config)
        if not p.exists():
            raise MissingInputError(f"config file not found: {p}")
        try:
            file_cfg = json.loads(p.read_text())
        except json.JSONDecodeError as e:
            raise UsageError(f"config {p} is not valid JSON: {e}") from None
        unknown = set(file_cfg) - set(defaults)
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(file_cfg)
    for k in defaults:
        v = getattr(args, k, None)
        if v is not None:
            cfg[k] = v
    return cfg


def need(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise MissingInputError(f"{what} not found: {p}")
    return p


def out_dir(args, name: str) -> Path:
    return Path(args.out) if args.out else data_dir() / name


# ---------------------------------------------------------------- subcommands
SYNTH_DEFAULTS = {"n": 2000, "seed": 0, "n_brands": 40, "homonym_rate": 0.3, "logo_rate": 0.4,
                  "image_size": 64, "brand_in_title_rate": 0.5, "brand_missing_rate": 0.0,
                  "workers": 1, "pngs": 0}


def cmd_synth(args, argv):
    from .catalog import GeneratorConfig, export_brands, export_catalog, generate_catalog, dump_pngs
    from .text import save_lexicon

    cfg = resolve(args, SYNTH_DEFAULTS)
    gen = GeneratorConfig(n_brands=cfg["n_brands"], homonym_rate=cfg["homonym_rate"], n_records=cfg["n"],
                          logo_rate=cfg["logo_rate"], image_size=cfg["image_size"], seed=cfg["seed"],
                          brand_in_title_rate=cfg["brand_in_title_rate"],
                          brand_missing_rate=cfg["brand_missing_rate"])
    brands, records = generate_catalog(gen, workers=cfg["workers"])
    out = out_dir(args, "synth")
    out.mkdir(parents=True, exist_ok=True)
    export_catalog(records, out / "catalog.jsonl")
    export_brands(brands, out / "brands.json")
    save_lexicon(gen.lexicon.pos_map(), out / "lexicon.json")
    if cfg["pngs"]:
        dump_pngs(records[:cfg["pngs"]], out / "png")
    cfg.pop("workers")   # does not affect outputs
    write_manifest(out, "synth", argv, cfg, {})
    print(f"wrote {len(records)} records to {out}")


ANNOTATE_DEFAULTS = {"catalog": None, "lexicon": None, "seed": 0, "noiseless": False,
                     "box_jitter_sigma": 0.02, "miss_rate": 0.05, "false_positive_rate": 0.02,
                     "confidence_model": "beta"}


def _lexicon(path):
    from .catalog import Lexicon
    from .text import load_lexicon
    return load_lexicon(path) if path else Lexicon().pos_map()


def cmd_annotate(args, argv):
    from .catalog import load_catalog
    from .teachers import TeacherConfig, build_training_set, export_annotations

    cfg = resolve(args, ANNOTATE_DEFAULTS)
    cat = need(cfg["catalog"] or data_dir() / "synth" / "catalog.jsonl", "catalog")
    inputs = {"catalog": cat}
    if cfg["lexicon"]:
        inputs["lexicon"] = need(cfg["lexicon"], "lexicon")
    if cfg["noiseless"]:
        tcfg = TeacherConfig.noiseless(cfg["seed"])
    else:
        tcfg = TeacherConfig(cfg["box_jitter_sigma"], cfg["miss_rate"], cfg["false_positive_rate"],
                             cfg["confidence_model"], cfg["seed"])
    data, stats = build_training_set(load_catalog(cat), tcfg, _lexicon(cfg["lexicon"]))
    out = out_dir(args, "annotate")
    out.mkdir(parents=True, exist_ok=True)
    export_annotations(data, out / "annotations.jsonl")
    (out / "stats.json").write_text(json.dumps(stats.to_dict(), indent=2, sort_keys=True))
    cfg["catalog"] = str(cat)
    write_manifest(out, "annotate", argv, cfg, inputs)
    print(json.dumps(stats.to_dict(), sort_keys=True))


TRAIN_DEFAULTS = {"catalog": None, "annotations": None, "lexicon": None, "seed": 0, "epochs": 30,
                  "batch_size": 16, "lr": 1e-3, "schedule": "warmup_cosine", "warmup_frac": 0.05,
                  "max_steps": None, "eval_fraction": 0.1, "drop_logo": False, "model": {}, "loss": {}}


def cmd_train(args, argv):
    from .catalog import load_catalog
    from .losses import LossConfig
    from .model import CpgModel, ModelConfig
    from .teachers import attach_annotations, load_annotations
    from .text import default_vocab
    from .trainer import TrainConfig, train

    cfg = resolve(args, TRAIN_DEFAULTS)
    cat = need(cfg["catalog"] or data_dir() / "synth" / "catalog.jsonl", "catalog")
    ann = need(cfg["annotations"] or data_dir() / "annotate" / "annotations.jsonl", "annotations")
    inputs = {"catalog": cat, "annotations": ann}
    if cfg["lexicon"]:
        inputs["lexicon"] = need(cfg["lexicon"], "lexicon")
    lex = _lexicon(cfg["lexicon"])
    data = attach_annotations(load_catalog(cat), load_annotations(ann), lex)
    vocab = default_vocab()
    mcfg = ModelConfig(**{"vocab_size": len(vocab), "seed": cfg["seed"], **cfg["model"]})
    tcfg = TrainConfig(batch_size=cfg["batch_size"], epochs=cfg["epochs"], lr=cfg["lr"],
                       schedule=cfg["schedule"], warmup_frac=cfg["warmup_frac"], seed=cfg["seed"],
                       eval_fraction=cfg["eval_fraction"], max_steps=cfg["max_steps"],
                       drop_logo_annotations=cfg["drop_logo"], loss=LossConfig(**cfg["loss"]))
    out = out_dir(args, "train")
    model = CpgModel(mcfg)
    res = train(model, data, tcfg, out, vocab)
    cfg.update(catalog=str(cat), annotations=str(ann))
    write_manifest(out, "train", argv, cfg, inputs)
    print(json.dumps({"checkpoint": str(res.checkpoint), "steps": res.steps,
                      "best": res.best_metrics.to_dict() if res.best_metrics else None}, sort_keys=True))


EXTRACT_DEFAULTS = {"catalog": None, "checkpoint": None, "lexicon": None, "threshold": 0.5, "seed": 0}


def _checkpoint(cfg):
    return need(cfg["checkpoint"] or data_dir() / "train" / "best.ckpt", "checkpoint")


def cmd_extract(args, argv):
    from .catalog import load_catalog
    from .features import extract_reps_batch
    from .trainer import load_trained

    cfg = resolve(args, EXTRACT_DEFAULTS)
    cat = need(cfg["catalog"] or data_dir() / "synth" / "catalog.jsonl", "catalog")
    ck = _checkpoint(cfg)
    model, vocab, _ = load_trained(ck)
    reps = extract_reps_batch(model, load_catalog(cat), vocab, _lexicon(cfg["lexicon"]),
                              threshold=cfg["threshold"])
    out = out_dir(args, "extract")
    out.mkdir(parents=True, exist_ok=True)
    n = 0
    with open(out / "reps.jsonl", "w") as f:
        for rid in sorted(reps):
            for r in reps[rid]:
                n += 1
                f.write(json.dumps({"record_id": rid, "confidence": r.confidence, "box": list(r.box),
                                    "vector": [float(v) for v in r.vector]}, sort_keys=True) + "\n")
    cfg.update(catalog=str(cat), checkpoint=str(ck))
    write_manifest(out, "extract", argv, cfg, {"catalog": cat, "checkpoint": ck})
    print(f"{n} reps from {len(reps)} records (threshold {cfg['threshold']})")


BENCH_DEFAULTS = {"checkpoint": None, "seed": 0, "scale": 1.0, "image_embedder": "random",
                  "pooling": "pooled", "features": "text,logo,image,cpg", "bench": {}}


def _bench(cfg):
    from .brand_eval import BenchmarkConfig, default_countries
    kw = dict(cfg["bench"])
    kw.setdefault("countries", default_countries(cfg["scale"]))
    return BenchmarkConfig(image_embedder=cfg["image_embedder"], pooling=cfg["pooling"], seed=cfg["seed"], **kw)


def _feature_sets(spec: str):
    from .brand_eval import FEATURE_SETS
    names = {"text": "text", "logo": "text+logo", "image": "text+image", "cpg": "text+cpg"}
    sets = []
    for s in spec.split(","):
        s = s.strip()
        if s not in names:
            raise UsageError(f"unknown feature set {s!r}; choose from {sorted(names)}")
        sets.append(names[s])
    if "text" not in sets:
        sets.insert(0, "text")
    return tuple(fs for fs in FEATURE_SETS if fs in sets)


def _prepare_benchmark(cfg):
    from .brand_eval import prepare_features
    from .trainer import load_trained

    ck = _checkpoint(cfg)
    model, vocab, _ = load_trained(ck)
    bench = _bench(cfg)
    fd, reps = prepare_features(model, vocab, bench)
    return ck, bench, fd, reps


def cmd_featurize(args, argv):
    from .brand_eval import CPG
    from .features import write_feature_table

    cfg = resolve(args, BENCH_DEFAULTS)
    ck, bench, fd, reps = _prepare_benchmark(cfg)
    out = out_dir(args, "featurize")
    out.mkdir(parents=True, exist_ok=True)
    keys = [{"country": p.country, "record_id": p.product.record_id, "brand_id": p.brand.brand_id,
             "label": p.label, "negative_kind": p.negative_kind, "split": p.split} for p in fd.pairs]
    cols = fd.columns[CPG]
    write_feature_table(out / "features.csv", cols, fd.X[CPG], keys)
    cfg["checkpoint"] = str(ck)
    write_manifest(out, "featurize", argv, cfg, {"checkpoint": ck})
    print(f"{len(fd.pairs)} pairs x {len(cols)} cpg-table columns written to {out / 'features.csv'}")


def cmd_eval(args, argv):
    from .brand_eval import compare_feature_sets, rep_counts, write_report

    cfg = resolve(args, BENCH_DEFAULTS)
    sets = _feature_sets(cfg["features"])
    ck, bench, fd, reps = _prepare_benchmark(cfg)
    out = out_dir(args, "eval")
    out.mkdir(parents=True, exist_ok=True)
    report = compare_feature_sets(fd, bench, sets, out_dir=out)
    report["rep_counts"] = rep_counts(reps)
    report["config"] = bench.to_dict()
    write_report(report, out / "report.json")
    cfg["checkpoint"] = str(ck)
    write_manifest(out, "eval", argv, cfg, {"checkpoint": ck})
    print(f"report written to {out / 'report.json'}")


REPORT_DEFAULTS = {"report": None, "seed": None}


def format_report(report: dict) -> str:
    lines = ["| country | feature set | R@P90 | R@P95 | n_test |", "|---|---|---|---|---|"]
    for tag in sorted(report["countries"]):
        for fs, v in report["countries"][tag].items():
            lines.append(f"| {tag} | {fs} | {v['r_at_p90']:.3f} | {v['r_at_p95']:.3f} | {v['n_test']} |")
    lines += ["", "| country | comparison | dR@P90 | dR@P95 |", "|---|---|---|---|"]
    for tag in sorted(report["deltas"]):
        for k, v in report["deltas"][tag].items():
            lines.append(f"| {tag} | {k} | {100 * v['d_r_at_p90']:+.1f} | {100 * v['d_r_at_p95']:+.1f} |")
    return "\n".join(lines) + "\n"


def cmd_report(args, argv):
    cfg = resolve(args, REPORT_DEFAULTS)
    src = need(cfg["report"] or data_dir() / "eval" / "report.json", "report")
    try:
        report = json.loads(src.read_text())
    except json.JSONDecodeError as e:
        raise ValueError(f"{src}: not valid JSON ({e})") from None
    text = format_report(report)
    out = out_dir(args, "report")
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.md").write_text(text)
    cfg["report"] = str(src)
    write_manifest(out, "report", argv, cfg, {"report": src})
    print(text, end="")


# ---------------------------------------------------------------- parser
def _bool_flag(p, name, help):
    p.add_argument(f"--{name.replace('_', '-')}", dest=name, action="store_const", const=True, default=None,
                   help=help)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cpg", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="JSON file; explicit flags override its values")
        sp.add_argument("--out", help=f"output directory (default under ${DATA_ENV})")
        sp.add_argument("--seed", type=int)
        return sp

    s = common(sub.add_parser("synth", help="generate a synthetic catalog"))
    s.add_argument("--n", type=int)
    s.add_argument("--n-brands", dest="n_brands", type=int)
    s.add_argument("--homonym-rate", dest="homonym_rate", type=float)
    s.add_argument("--logo-rate", dest="logo_rate", type=float)
    s.add_argument("--image-size", dest="image_size", type=int)
    s.add_argument("--brand-in-title-rate", dest="brand_in_title_rate", type=float)
    s.add_argument("--brand-missing-rate", dest="brand_missing_rate", type=float)
    s.add_argument("--workers", type=int)
    s.add_argument("--pngs", type=int, help="also dump the first N images as PNG")

    s = common(sub.add_parser("annotate", help="run the scripted teachers over a catalog"))
    s.add_argument("--catalog")
    s.add_argument("--lexicon")
    _bool_flag(s, "noiseless", "exact boxes, no misses or spurious detections")
    s.add_argument("--box-jitter-sigma", dest="box_jitter_sigma", type=float)
    s.add_argument("--miss-rate", dest="miss_rate", type=float)
    s.add_argument("--false-positive-rate", dest="false_positive_rate", type=float)
    s.add_argument("--confidence-model", dest="confidence_model", choices=["beta", "fixed"])

    s = common(sub.add_parser("train", help="train the grounding model"))
    s.add_argument("--catalog")
    s.add_argument("--annotations")
    s.add_argument("--lexicon")
    s.add_argument("--epochs", type=int)
    s.add_argument("--batch-size", dest="batch_size", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--schedule", choices=["constant", "warmup", "warmup_cosine"])
    s.add_argument("--warmup-frac", dest="warmup_frac", type=float)
    s.add_argument("--max-steps", dest="max_steps", type=int)
    s.add_argument("--eval-fraction", dest="eval_fraction", type=float)
    _bool_flag(s, "drop_logo", "train without logo annotations (ablation)")

    s = common(sub.add_parser("extract", help="dump confident object representations"))
    s.add_argument("--catalog")
    s.add_argument("--checkpoint")
    s.add_argument("--lexicon")
    s.add_argument("--threshold", type=float)

    for name, help in (("featurize", "build the downstream pair feature table"),
                       ("eval", "compare feature sets on the matching benchmark")):
        s = common(sub.add_parser(name, help=help))
        s.add_argument("--checkpoint")
        s.add_argument("--scale", type=float, help="multiplier on benchmark catalog sizes")
        s.add_argument("--image-embedder", dest="image_embedder", choices=["random", "proxy"])
        s.add_argument("--pooling", choices=["pooled", "per_rep"])
        s.add_argument("--features", help="comma list from text,logo,image,cpg")

    s = common(sub.add_parser("report", help="render report.json as markdown tables"))
    s.add_argument("--report")
    return p


COMMANDS = {"synth": cmd_synth, "annotate": cmd_annotate, "train": cmd_train, "extract": cmd_extract,
            "featurize": cmd_featurize, "eval": cmd_eval, "report": cmd_report}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required: " + ", ".join(COMMANDS))
        logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                            format="%(levelname)s %(name)s: %(message)s")
        COMMANDS[args.command](args, argv)
        return 0
    except SystemExit as e:      # --help
        return int(e.code or 0)
    except (UsageError, MissingInputError) as e:
        print(f"{type(e).__name__}: {e}", file=sys.stderr)
        return e.code
    except Exception as e:  # noqa: BLE001 - single-line contract for every failure
        print(f"{type(e).__name__}: {str(e).splitlines()[0] if str(e) else ''}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
