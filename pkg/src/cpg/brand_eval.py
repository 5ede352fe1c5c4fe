"""Downstream (product, brand) matching benchmark.

Each country tag is a separately seeded catalog. Half of its records serve as
brand representatives, the rest as query products paired with their own brand
(positives) and with homonym or random brands (negatives). A logistic
matcher is trained per feature set; recall at fixed precision is compared.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .catalog import GeneratorConfig, generate_catalog
from .engine import AdamW, Tensor, backward, no_grad, ops
from .features import BrandEntity, build_cpg_features, extract_reps_batch, feature_columns, stat_block
from .teachers import TeacherConfig, detect_logo

log = logging.getLogger(__name__)

TEXT, LOGO_SET, IMAGE, CPG = "text", "text+logo", "text+image", "text+cpg"
FEATURE_SETS = (TEXT, LOGO_SET, IMAGE, CPG)
TEXT_COLUMNS = ["txt_name_edit", "txt_title_jaccard", "txt_exact_name", "txt_name_in_title", "txt_title_len"]
POSITIVE, NEGATIVE = 1, 0
HOMONYM, RANDOM, NONE = "homonym", "random", "none"


# ---------------------------------------------------------------- configs
@dataclass
class CountryConfig:
    tag: str
    seed: int
    homonym_rate: float
    test_homonym_fraction: float
    train_homonym_fraction: float = 0.5
    n_brands: int = 40
    n_records: int = 1200
    logo_rate: float = 0.4
    brand_missing_rate: float = 0.0
    brand_in_title_rate: float = 0.5
    id_offset: int = 0       # record ids start here, keeping countries disjoint

    def __post_init__(self):
        for name in ("homonym_rate", "test_homonym_fraction", "train_homonym_fraction"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name}={getattr(self, name)} outside [0, 1]")

    def generator(self) -> GeneratorConfig:
        return GeneratorConfig(n_brands=self.n_brands, homonym_rate=self.homonym_rate,
                               n_records=self.n_records, logo_rate=self.logo_rate, seed=self.seed,
                               brand_missing_rate=self.brand_missing_rate,
                               brand_in_title_rate=self.brand_in_title_rate, country=self.tag)


def default_countries(scale: float = 1.0) -> list:
    """C: no homonyms. I: homonym-heavy stress tag. E: in between."""
    n = max(200, int(round(1200 * scale)))
    return [
        CountryConfig("C", 101, homonym_rate=0.0, test_homonym_fraction=0.0, n_records=n),
        CountryConfig("I", 202, homonym_rate=0.8, test_homonym_fraction=0.9, n_records=n,
                      id_offset=1_000_000),
        CountryConfig("E", 303, homonym_rate=0.3, test_homonym_fraction=0.3, n_records=n,
                      brand_missing_rate=0.2, id_offset=2_000_000),
    ]


@dataclass
class BenchmarkConfig:
    countries: list = field(default_factory=default_countries)
    reference_fraction: float = 0.5     # records used as brand representatives
    max_representatives: int = 5
    test_fraction: float = 0.5          # of query products
    negatives_per_positive: int = 1
    image_embedder: str = "random"      # random | proxy
    pooling: str = "pooled"
    teacher: TeacherConfig = field(default_factory=TeacherConfig)
    matcher_l2: float = 1e-3
    matcher_steps: int = 400
    matcher_lr: float = 0.05
    seed: int = 0

    def __post_init__(self):
        self.countries = [c if isinstance(c, CountryConfig) else CountryConfig(**c) for c in self.countries]
        if isinstance(self.teacher, dict):
            self.teacher = TeacherConfig(**self.teacher)
        if self.negatives_per_positive < 1:
            raise ValueError("negatives_per_positive must be >= 1")
        for name in ("reference_fraction", "test_fraction"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise ValueError(f"{name} must be in (0, 1)")

    def to_dict(self):
        return asdict(self)


# ---------------------------------------------------------------- pairs
@dataclass
class MatchPair:
    product: object        # CatalogRecord
    brand: BrandEntity
    label: int
    negative_kind: str
    split: str             # train | test
    country: str


@dataclass
class CountryData:
    cfg: CountryConfig
    brands: list           # BrandSpec
    entities: dict         # brand_id -> BrandEntity
    reference: list
    queries: list


def _tokens(s: str) -> set:
    return {t.lower() for t in s.split()}


def shares_token(product, brand_name: str) -> bool:
    """Non-trivial negative: the brand name overlaps the product's title or brand attribute."""
    text = _tokens(" ".join(product.title_tokens)) | _tokens(product.brand_name)
    return bool(text & _tokens(brand_name))


def build_country(cfg: CountryConfig, bench: BenchmarkConfig) -> CountryData:
    brands, records = generate_catalog(cfg.generator(), start_id=cfg.id_offset)
    rng = np.random.default_rng([bench.seed, cfg.seed, 1])
    perm = rng.permutation(len(records))
    n_ref = int(round(bench.reference_fraction * len(records)))
    ref = [records[i] for i in sorted(perm[:n_ref])]
    queries = [records[i] for i in sorted(perm[n_ref:])]
    entities = {}
    for b in brands:
        reps = [r for r in ref if r.brand_id == b.brand_id][:bench.max_representatives]
        entities[b.brand_id] = BrandEntity(b.name, b.brand_id, reps)
    return CountryData(cfg, brands, entities, ref, queries)


def build_pairs(country: CountryData, bench: BenchmarkConfig) -> list:
    """Positive and negative pairs for one country, split into train and test.

    Train negatives must share a token with the product; test negatives are
    drawn uniformly, with a homonym share set by the country config.
    """
    cfg = country.cfg
    rng = np.random.default_rng([bench.seed, cfg.seed, 2])
    by_name = {}
    for b in country.brands:
        by_name.setdefault(b.name, []).append(b.brand_id)
    ids = [b.brand_id for b in country.brands]
    n_test = int(round(bench.test_fraction * len(country.queries)))
    order = rng.permutation(len(country.queries))
    split_of = {country.queries[i].record_id: ("test" if k < n_test else "train") for k, i in enumerate(order)}
    pairs = []
    for prod in country.queries:
        split = split_of[prod.record_id]
        own = country.entities[prod.brand_id]
        pairs.append(MatchPair(prod, own, POSITIVE, NONE, split, cfg.tag))
        homonyms = [i for i in by_name[own.name] if i != prod.brand_id]
        frac = cfg.test_homonym_fraction if split == "test" else cfg.train_homonym_fraction
        for _ in range(bench.negatives_per_positive):
            if homonyms and rng.random() < frac:
                bid, kind = homonyms[int(rng.integers(len(homonyms)))], HOMONYM
            else:
                pool = [i for i in ids if country.entities[i].name != own.name]
                if split == "train":
                    pool = [i for i in pool if shares_token(prod, country.entities[i].name)]
                if not pool:
                    continue
                bid, kind = pool[int(rng.integers(len(pool)))], RANDOM
            pairs.append(MatchPair(prod, country.entities[bid], NEGATIVE, kind, split, cfg.tag))
    return pairs


# ---------------------------------------------------------------- text features
def edit_distance(a: str, b: str) -> int:
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def normalized_edit(a: str, b: str) -> float:
    if not a and not b:
        return 0.0
    return edit_distance(a, b) / max(len(a), len(b))


def jaccard(a: str, b: str) -> float:
    sa, sb = _tokens(a), _tokens(b)
    return len(sa & sb) / len(sa | sb) if sa | sb else 0.0


def text_features(pair: MatchPair) -> list:
    name = pair.brand.name.lower()
    attr = pair.product.brand_name.lower()
    title = " ".join(pair.product.title_tokens).lower()
    nt, tt = name.split(), title.split()
    in_title = any(tt[i:i + len(nt)] == nt for i in range(len(tt) - len(nt) + 1)) if nt else False
    return [normalized_edit(name, attr) if attr else 1.0, jaccard(name, title),
            float(name == attr), float(in_title), float(len(tt))]


# ---------------------------------------------------------------- logo features
LOGO_SIG = 8


def crop_signature(image: np.ndarray, box, size: int = LOGO_SIG) -> np.ndarray:
    """Grayscale crop of a cxcywh box, nearest-neighbour resampled to size x size."""
    S = image.shape[0]
    cx, cy, w, h = box
    x0, x1 = (cx - w / 2) * S, (cx + w / 2) * S
    y0, y1 = (cy - h / 2) * S, (cy + h / 2) * S
    xs = np.clip(np.floor(x0 + (np.arange(size) + 0.5) * (x1 - x0) / size), 0, S - 1).astype(int)
    ys = np.clip(np.floor(y0 + (np.arange(size) + 0.5) * (y1 - y0) / size), 0, S - 1).astype(int)
    gray = image.astype(np.float64).mean(axis=-1) / 255.0
    return gray[np.ix_(ys, xs)].ravel()


def logo_embeddings(records, teacher: TeacherConfig) -> dict:
    """record_id -> glyph signatures of detected logos (0 or 1 per record)."""
    out = {}
    for r in records:
        det = detect_logo(r, teacher)
        out[r.record_id] = [crop_signature(r.image, det[0])] if det is not None else []
    return out


# ---------------------------------------------------------------- image features
def random_projection_embedder(seed: int = 0, dim: int = 32, pool: int = 4):
    rng = np.random.default_rng([seed, 99])
    mats = {}

    def embed(images) -> np.ndarray:
        x = np.asarray(images, dtype=np.float64) / 255.0
        B, S, _, C = x.shape
        x = x.reshape(B, S // pool, pool, S // pool, pool, C).mean(axis=(2, 4)).reshape(B, -1)
        if x.shape[1] not in mats:
            mats[x.shape[1]] = rng.normal(0, 1 / np.sqrt(x.shape[1]), (x.shape[1], dim))
        return (x - 0.5) @ mats[x.shape[1]]
    return embed


def _augment(images, rng):
    """Duplicate proxy: small shift, brightness change and pixel noise."""
    x = np.asarray(images, dtype=np.float64)
    out = np.empty_like(x)
    for i, img in enumerate(x):
        dx, dy = rng.integers(-2, 3, size=2)
        img = np.roll(img, (int(dy), int(dx)), axis=(0, 1))
        img = img * rng.uniform(0.9, 1.1) + rng.normal(0, 6.0, img.shape)
        out[i] = np.clip(img, 0, 255)
    return out


class ProxyImageEncoder:
    """Conv stack (same layout as the grounding model) mean-pooled, trained with InfoNCE
    to match augmented duplicates of the same image."""

    def __init__(self, channels=(16, 32), strides=(4, 2), dim: int = 32, seed: int = 0):
        from .engine import Conv2d, Linear
        rng = np.random.default_rng([seed, 5])
        chans = (3,) + tuple(channels)
        self.convs = [Conv2d(chans[i], chans[i + 1], s if i == 0 else 3, s, 0 if i == 0 else 1, rng)
                      for i, s in enumerate(strides)]
        self.head = Linear(chans[-1], dim, rng)

    def parameters(self):
        ps = [p for c in self.convs for p in (c.weight, c.bias)]
        return ps + [self.head.weight, self.head.bias]

    def forward(self, images) -> Tensor:
        x = Tensor((np.asarray(images, dtype=np.float64) / 255.0 - 0.5) / 0.25)
        for c in self.convs:
            x = ops.relu(c(x))
        return self.head(ops.reduce_mean(x, axis=(1, 2)))

    def fit(self, images, steps: int = 150, batch: int = 32, lr: float = 3e-3, tau: float = 0.1, seed: int = 0):
        rng = np.random.default_rng([seed, 6])
        opt = AdamW(self.parameters(), lr=lr, weight_decay=0.0)
        images = np.asarray(images)
        for _ in range(steps):
            idx = rng.choice(len(images), min(batch, len(images)), replace=False)
            a = ops.l2_normalize(self.forward(_augment(images[idx], rng)))
            b = ops.l2_normalize(self.forward(_augment(images[idx], rng)))
            logits = ops.matmul(a, ops.transpose(b)) * (1.0 / tau)
            eye = np.eye(len(idx))
            loss = -(ops.reduce_sum(ops.log_softmax(logits, axis=-1) * eye)
                     + ops.reduce_sum(ops.log_softmax(ops.transpose(logits), axis=-1) * eye)) * (0.5 / len(idx))
            opt.zero_grad()
            backward(loss)
            opt.step()
        return self

    def __call__(self, images) -> np.ndarray:
        with no_grad():
            return np.concatenate([self.forward(images[s:s + 128]).data for s in range(0, len(images), 128)])


def image_embeddings(records, embedder) -> dict:
    images = np.stack([r.image for r in records])
    emb = embedder(images)
    return {r.record_id: [emb[i]] for i, r in enumerate(records)}


# ---------------------------------------------------------------- matcher
def _standardize_fit(X):
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    sd[sd == 0] = 1.0
    return mu, sd


def logistic_loss(w: Tensor, b: Tensor, X: np.ndarray, y: np.ndarray, l2: float) -> Tensor:
    z = ops.reshape(ops.matmul(Tensor(X), ops.reshape(w, (-1, 1))), (-1,)) + b
    # softplus(z) - y z, written stably
    sp = ops.relu(z) + ops.log(1.0 + ops.exp(-ops.abs(z)))
    return ops.reduce_mean(sp - z * y) + ops.reduce_sum(w * w) * l2


@dataclass
class Matcher:
    weights: np.ndarray
    bias: float
    mu: np.ndarray
    sd: np.ndarray
    columns: list

    def score(self, X) -> np.ndarray:
        z = ((np.asarray(X, dtype=np.float64) - self.mu) / self.sd) @ self.weights + self.bias
        return 1.0 / (1.0 + np.exp(-z))


def train_matcher(X, y, columns=None, l2: float = 1e-3, steps: int = 400, lr: float = 0.05,
                  seed: int = 0) -> Matcher:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(np.unique(y)) < 2:
        raise ValueError("train_matcher needs both classes")
    mu, sd = _standardize_fit(X)
    Xs = (X - mu) / sd
    rng = np.random.default_rng(seed)
    w = Tensor(rng.normal(0, 1e-3, X.shape[1]), requires_grad=True)
    b = Tensor(np.zeros(()), requires_grad=True)
    opt = AdamW([w, b], lr=lr, weight_decay=0.0)
    for _ in range(steps):
        opt.zero_grad()
        backward(logistic_loss(w, b, Xs, y, l2))
        opt.step()
    return Matcher(w.data.copy(), float(b.data), mu, sd, list(columns or []))


# ---------------------------------------------------------------- metrics
def _sweep(scores, labels):
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    if y.sum() == 0:
        raise ValueError("recall_at_precision needs at least one positive")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    # last index of each tie group
    ends = np.nonzero(np.append(s[1:] != s[:-1], True))[0]
    tp = np.cumsum(y)[ends]
    fp = (ends + 1) - tp
    return s[ends], tp / (tp + fp), tp / y.sum()


def recall_at_precision(scores, labels, p: float) -> float:
    """Largest recall over thresholds whose precision is at least ``p``; 0 if none."""
    if not 0.0 < p <= 1.0:
        raise ValueError(f"p must be in (0, 1], got {p}")
    _, prec, rec = _sweep(scores, labels)
    ok = prec >= p
    return float(rec[ok].max()) if ok.any() else 0.0


def pr_curve(scores, labels) -> list:
    th, prec, rec = _sweep(scores, labels)
    return [(float(t), float(p), float(r)) for t, p, r in zip(th, prec, rec)]


# ---------------------------------------------------------------- assembly
@dataclass
class FeatureData:
    columns: dict          # feature set -> column names
    X: dict                # feature set -> (n, k) matrix
    pairs: list


def featurize(pairs, reps: dict, logos: dict, images: dict, pooling: str = "pooled") -> FeatureData:
    """Feature matrices for all four sets; ``reps``/``logos``/``images`` map record_id -> vectors."""
    txt = np.array([text_features(p) for p in pairs]).reshape(len(pairs), len(TEXT_COLUMNS))
    blocks = {}
    for tag, src, prefix, metrics in ((LOGO_SET, logos, "logo", ("euclidean",)),
                                      (IMAGE, images, "img", ("euclidean", "cosine")),
                                      (CPG, reps, "cpg", ("euclidean", "cosine"))):
        rows = []
        for p in pairs:
            if tag == CPG:
                rows.append(build_cpg_features(reps.get(p.product.record_id, []), p.brand, reps,
                                               pooling, exclude_record=p.product.record_id).values)
            else:
                rr = [src.get(r.record_id, []) for r in p.brand.representatives
                      if r.record_id != p.product.record_id]
                rows.append(stat_block(src.get(p.product.record_id, []), rr, metrics, pooling))
        blocks[tag] = (np.array(rows).reshape(len(pairs), -1), _block_columns(prefix, metrics))
    X = {TEXT: txt}
    cols = {TEXT: list(TEXT_COLUMNS)}
    for tag, (m, c) in blocks.items():
        X[tag] = np.hstack([txt, m])
        cols[tag] = list(TEXT_COLUMNS) + c
    return FeatureData(cols, X, list(pairs))


def _block_columns(prefix, metrics):
    if metrics == ("euclidean", "cosine"):
        return feature_columns(prefix)
    cols = [f"{prefix}_{m}_{s}" for m in metrics for s in ("min", "max", "median", "var")]
    return cols + [f"{prefix}_product_empty", f"{prefix}_brand_empty"]


def _r(x: float) -> float:
    return float(x)


def compare_feature_sets(fd: FeatureData, bench: BenchmarkConfig, sets=FEATURE_SETS, out_dir=None) -> dict:
    """Train one matcher per feature set on all train pairs; evaluate per country."""
    labels = np.array([p.label for p in fd.pairs])
    train = np.array([p.split == "train" for p in fd.pairs])
    tags = sorted({p.country for p in fd.pairs})
    country = np.array([p.country for p in fd.pairs])
    per = {t: {} for t in tags}
    curves = {}
    for fs in sets:
        m = train_matcher(fd.X[fs][train], labels[train], fd.columns[fs], bench.matcher_l2,
                          bench.matcher_steps, bench.matcher_lr, bench.seed)
        scores = m.score(fd.X[fs])
        for t in tags:
            sel = (~train) & (country == t)
            y = labels[sel]
            per[t][fs] = {"r_at_p90": _r(recall_at_precision(scores[sel], y, 0.90)),
                          "r_at_p95": _r(recall_at_precision(scores[sel], y, 0.95)),
                          "n_test": int(sel.sum()), "n_pos": int(y.sum()),
                          "n_homonym_neg": int(sum(fd.pairs[i].negative_kind == HOMONYM
                                                   for i in np.nonzero(sel)[0]))}
            curves[(fs, t)] = pr_curve(scores[sel], y)
    deltas = {}
    for t in tags:
        deltas[t] = {}
        for a, b in ((CPG, TEXT), (LOGO_SET, TEXT), (IMAGE, TEXT), (CPG, LOGO_SET), (CPG, IMAGE)):
            if a in per[t] and b in per[t]:
                deltas[t][f"{a} vs {b}"] = {
                    "d_r_at_p90": per[t][a]["r_at_p90"] - per[t][b]["r_at_p90"],
                    "d_r_at_p95": per[t][a]["r_at_p95"] - per[t][b]["r_at_p95"]}
    report = {"countries": per, "deltas": deltas, "feature_sets": {fs: fd.columns[fs] for fs in sets},
              "n_pairs": len(fd.pairs), "n_train": int(train.sum())}
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for (fs, t), c in curves.items():
            with open(out / f"pr_{fs.replace('+', '_')}_{t}.csv", "w", newline="") as f:
                w = csv.writer(f)
                w.writerow(["threshold", "precision", "recall"])
                w.writerows([[repr(v) for v in row] for row in c])
    return report


def prepare_features(model, vocab, bench: BenchmarkConfig, precomputed=None):
    """Build every country, its pairs and all feature matrices; returns ``(fd, reps)``."""
    lex = bench.countries[0].generator().lexicon.pos_map()
    datas = [build_country(c, bench) for c in bench.countries]
    recs = [r for d in datas for r in d.reference + d.queries]
    ids = [r.record_id for r in recs]
    if len(set(ids)) != len(ids):
        raise ValueError("country record ids overlap; set distinct id_offset values")
    all_pairs = [p for d in datas for p in build_pairs(d, bench)]
    if bench.image_embedder == "random":
        embedder = random_projection_embedder(bench.seed)
    elif bench.image_embedder == "proxy":
        embedder = ProxyImageEncoder(seed=bench.seed).fit(np.stack([r.image for r in recs]), seed=bench.seed)
    else:
        raise ValueError(f"unknown image_embedder {bench.image_embedder!r}")
    reps = extract_reps_batch(model, recs, vocab, lex) if model is not None else (precomputed or {})
    logos = logo_embeddings(recs, bench.teacher)
    images = image_embeddings(recs, embedder)
    return featurize(all_pairs, reps, logos, images, bench.pooling), reps


def rep_counts(reps: dict) -> dict:
    return {"records": len(reps), "with_reps": int(sum(bool(v) for v in reps.values())),
            "mean_reps": float(np.mean([len(v) for v in reps.values()])) if reps else 0.0}


def run_benchmark(model, vocab, bench: BenchmarkConfig, out_dir=None, precomputed=None,
                  sets=FEATURE_SETS) -> dict:
    """End-to-end downstream run from a trained grounding model."""
    fd, reps = prepare_features(model, vocab, bench, precomputed)
    report = compare_feature_sets(fd, bench, sets, out_dir=out_dir)
    report["rep_counts"] = rep_counts(reps)
    report["config"] = bench.to_dict()
    return report


def write_report(report: dict, path) -> None:
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True))
