"""Synthetic e-commerce catalog: brands with homonyms, rendered product images, titles.

Every record is a pure function of ``(GeneratorConfig, record_id)``; the
per-record generator is seeded from ``(seed, record_id)`` so serial and
parallel generation agree bit for bit.
"""
from __future__ import annotations

import base64
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

PRODUCT = "product-object"
LOGO = "logo"

# noun -> shape family
DEFAULT_NOUNS = {
    "watch": "circle",
    "wallet": "square",
    "lamp": "triangle",
    "kite": "diamond",
    "bandage": "cross",
    "bagel": "ring",
    "keyboard": "hbar",
    "bottle": "vbar",
    "mirror": "ellipse",
    "bucket": "trapezoid",
}
DEFAULT_COLORS = {
    "red": (210, 40, 40),
    "green": (40, 160, 60),
    "blue": (40, 70, 200),
    "yellow": (225, 190, 30),
    "purple": (130, 50, 170),
    "orange": (235, 120, 20),
    "teal": (20, 140, 140),
    "brown": (120, 70, 30),
}
DEFAULT_TEXTURES = ("striped", "checked")

BRAND_WORDS = (
    "Paul", "Rich", "Gerber", "Nova", "Arco", "Vento", "Lumen", "Kestrel", "Orbis", "Zenit",
    "Halden", "Marlo", "Quill", "Tessa", "Brio", "Cobalto", "Delta", "Ember", "Fjord", "Garnet",
    "Heron", "Ionic", "Jasper", "Koda", "Lyric", "Mosaic", "Nimbus", "Onyx", "Pavo", "Rune",
    "Sable", "Talon", "Umbra", "Vesper", "Wren", "Xeno", "Yarrow", "Zephyr", "Atlas", "Borea",
)

SHAPE_ASPECT = {"hbar": (1.0, 0.45), "vbar": (0.45, 1.0), "ellipse": (1.0, 0.6)}
LOGO_SIZE = 8
LOGO_MARGIN = 2
LOGO_INK = (20, 20, 20)
LOGO_PAPER = (255, 255, 255)


class GeneratorError(ValueError):
    pass


class CatalogFormatError(ValueError):
    """Malformed catalog file; ``lineno`` is 1-based."""

    def __init__(self, path, lineno: int, reason: str):
        self.path = str(path)
        self.lineno = lineno
        super().__init__(f"{path}:{lineno}: {reason}")


@dataclass
class Lexicon:
    nouns: dict = field(default_factory=lambda: dict(DEFAULT_NOUNS))
    colors: dict = field(default_factory=lambda: dict(DEFAULT_COLORS))
    textures: tuple = DEFAULT_TEXTURES

    def __post_init__(self):
        self.colors = {k: tuple(v) for k, v in self.colors.items()}
        self.textures = tuple(self.textures)

    @property
    def categories(self) -> list:
        """Category id -> noun, in a fixed order."""
        return list(self.nouns)

    @property
    def adjectives(self) -> list:
        return list(self.textures) + list(self.colors)

    def pos_map(self) -> dict:
        """token -> NOUN/ADJ for the text pipeline (everything else is OTHER)."""
        pos = {n: "NOUN" for n in self.nouns}
        pos.update({a: "ADJ" for a in self.adjectives})
        return pos


@dataclass
class GeneratorConfig:
    n_brands: int = 40
    homonym_rate: float = 0.3
    n_records: int = 2000
    logo_rate: float = 0.40
    image_size: int = 64
    seed: int = 0
    lexicon: Lexicon = field(default_factory=Lexicon)
    brand_in_title_rate: float = 0.5
    max_adjectives: int = 2
    max_categories: int = 3
    brand_missing_rate: float = 0.0
    zipf_exponent: float = 0.8
    country: str = "default"

    def __post_init__(self):
        if isinstance(self.lexicon, dict):
            self.lexicon = Lexicon(**self.lexicon)
        for name in ("homonym_rate", "logo_rate", "brand_in_title_rate", "brand_missing_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise GeneratorError(f"{name}={v} outside [0, 1]")
        if self.image_size < 32:
            raise GeneratorError("image_size must be >= 32")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class BrandSpec:
    brand_id: int
    name: str
    homonym_group: int
    logo_glyph: int
    category_set: frozenset

    def to_dict(self):
        return {"brand_id": self.brand_id, "name": self.name, "homonym_group": self.homonym_group,
                "logo_glyph": self.logo_glyph, "category_set": sorted(self.category_set)}

    @classmethod
    def from_dict(cls, d):
        return cls(d["brand_id"], d["name"], d["homonym_group"], d["logo_glyph"],
                   frozenset(d["category_set"]))


@dataclass
class Region:
    box: tuple          # normalized cx, cy, w, h
    role: str           # PRODUCT or LOGO
    phrase: str


@dataclass
class CatalogRecord:
    record_id: int
    image: np.ndarray   # (H, W, 3) uint8
    title_tokens: list
    brand_name: str
    gt_regions: list
    country: str = "default"
    brand_id: int = -1

    @property
    def has_logo(self) -> bool:
        return any(r.role == LOGO for r in self.gt_regions)

    def to_json(self) -> dict:
        return {
            "record_id": self.record_id,
            "brand_id": self.brand_id,
            "brand_name": self.brand_name,
            "country": self.country,
            "title_tokens": list(self.title_tokens),
            "gt_regions": [{"box": list(r.box), "role": r.role, "phrase": r.phrase}
                           for r in self.gt_regions],
            "image": {"shape": list(self.image.shape),
                      "b64": base64.b64encode(self.image.tobytes()).decode("ascii")},
        }

    @classmethod
    def from_json(cls, d: dict) -> "CatalogRecord":
        shape = tuple(d["image"]["shape"])
        raw = base64.b64decode(d["image"]["b64"], validate=True)
        if len(raw) != int(np.prod(shape)):
            raise ValueError(f"image payload has {len(raw)} bytes, expected {int(np.prod(shape))}")
        img = np.frombuffer(raw, dtype=np.uint8).reshape(shape).copy()
        regions = [Region(tuple(r["box"]), r["role"], r["phrase"]) for r in d["gt_regions"]]
        return cls(d["record_id"], img, list(d["title_tokens"]), d["brand_name"], regions,
                   d.get("country", "default"), d.get("brand_id", -1))


# ---------------------------------------------------------------- brands
def _brand_name(rng) -> str:
    k = 1 if rng.random() < 0.3 else 2
    return " ".join(rng.choice(BRAND_WORDS, size=k, replace=False))


def gen_brand_universe(cfg: GeneratorConfig) -> list:
    """Brands with ``ceil(homonym_rate * n_brands)`` members placed in homonym groups.

    Homonym groups have size >= 2, share one name, and have pairwise disjoint
    category sets. Everyone else gets a unique name.
    """
    if cfg.n_brands < 1:
        raise GeneratorError("n_brands must be >= 1")
    rng = np.random.default_rng([cfg.seed, 0xB4A4D])
    n_cat = len(cfg.lexicon.categories)
    n_h = math.ceil(cfg.homonym_rate * cfg.n_brands - 1e-9)
    if n_h == 1:
        n_h = 2 if cfg.n_brands >= 2 else 0
    sizes = [2] * (n_h // 2)
    if n_h % 2:
        sizes[-1] += 1
    if sizes and max(sizes) > n_cat:
        raise GeneratorError(f"homonym group of {max(sizes)} needs >= {max(sizes)} categories, lexicon has {n_cat}")

    used_names: set = set()

    def fresh_name():
        for _ in range(10_000):
            nm = _brand_name(rng)
            if nm not in used_names:
                used_names.add(nm)
                return nm
        raise GeneratorError("brand name pool exhausted")

    specs = []  # (name, group_key, categories)
    for g, size in enumerate(sizes):
        name = fresh_name()
        cats = rng.permutation(n_cat)
        per = max(1, min(cfg.max_categories, n_cat // size))
        for m in range(size):
            k = int(rng.integers(1, per + 1))
            specs.append((name, ("h", g), frozenset(int(c) for c in cats[m * per:m * per + k])))
    for _ in range(cfg.n_brands - n_h):
        k = int(rng.integers(1, min(cfg.max_categories, n_cat) + 1))
        cats = frozenset(int(c) for c in rng.choice(n_cat, size=k, replace=False))
        specs.append((fresh_name(), None, cats))

    order = rng.permutation(len(specs))
    group_ids: dict = {}
    brands = []
    for brand_id, j in enumerate(order):
        name, key, cats = specs[j]
        if key is None:
            key = ("s", brand_id)
        gid = group_ids.setdefault(key, len(group_ids))
        brands.append(BrandSpec(brand_id, name, gid, cfg.seed * 100_003 + brand_id, cats))
    return brands


def glyph_pattern(glyph_id: int) -> np.ndarray:
    """8x8 boolean ink mask: solid frame plus a 6x6 interior derived from the id."""
    rng = np.random.default_rng([glyph_id, 0x610])
    m = np.zeros((LOGO_SIZE, LOGO_SIZE), dtype=bool)
    m[0, :] = m[-1, :] = m[:, 0] = m[:, -1] = True
    m[1:-1, 1:-1] = rng.random((LOGO_SIZE - 2, LOGO_SIZE - 2)) < 0.5
    return m


# ---------------------------------------------------------------- rendering
def shape_mask(family: str, w: int, h: int) -> np.ndarray:
    """Boolean (h, w) mask whose painted pixels reach all four bbox edges."""
    ys, xs = np.mgrid[0:h, 0:w]
    cx, cy = xs + 0.5 - w / 2, ys + 0.5 - h / 2
    rx, ry = w / 2, h / 2
    if family in ("square", "hbar", "vbar"):
        return np.ones((h, w), dtype=bool)
    if family in ("circle", "ellipse"):
        return (cx / rx) ** 2 + (cy / ry) ** 2 <= 1.0
    if family == "ring":
        r = (cx / rx) ** 2 + (cy / ry) ** 2
        return (r <= 1.0) & (r >= 0.3)
    if family == "triangle":
        return np.abs(cx) <= rx * (ys + 1) / h
    if family == "trapezoid":
        return np.abs(cx) <= rx * (0.45 + 0.55 * (ys + 1) / h)
    if family == "diamond":
        return np.abs(cx) / rx + np.abs(cy) / ry <= 1.0 + 1.0 / min(w, h)
    if family == "cross":
        return (np.abs(cx) <= w / 6 + 0.01) | (np.abs(cy) <= h / 6 + 0.01)
    raise GeneratorError(f"unknown shape family {family!r}")


def _texture(texture: Optional[str], h: int, w: int) -> np.ndarray:
    ys, xs = np.mgrid[0:h, 0:w]
    if texture == "striped":
        return (ys // 2) % 2 == 1
    if texture == "checked":
        return ((ys // 3) + (xs // 3)) % 2 == 1
    return np.zeros((h, w), dtype=bool)


def _overlaps(a, b, gap=1):
    return not (a[2] + gap <= b[0] or b[2] + gap <= a[0] or a[3] + gap <= b[1] or b[3] + gap <= a[1])


def gen_title(brand: BrandSpec, phrases: list, cfg: GeneratorConfig, rng) -> list:
    """``[brand tokens?] (ADJ* NOUN)+`` where ``phrases`` are pre-built token lists."""
    if not phrases:
        raise GeneratorError("gen_title needs at least one category phrase")
    tokens = []
    if brand.name and rng.random() < cfg.brand_in_title_rate:
        tokens.extend(brand.name.split())
    for p in phrases:
        tokens.extend(p)
    return tokens


def _phrase_tokens(noun, color, texture, cfg, rng) -> list:
    k = int(rng.integers(0, cfg.max_adjectives + 1)) if cfg.max_adjectives > 0 else 0
    adjs = []
    if k >= 2 and texture is not None:
        adjs.append(texture)
    if k >= 1:
        adjs.append(color)
    return adjs + [noun]


def render_record(brand: BrandSpec, cfg: GeneratorConfig, rng, record_id: int = 0) -> CatalogRecord:
    """Paint 1-2 of the brand's product shapes (and maybe its logo) on a plain background."""
    if not brand.category_set:
        raise GeneratorError(f"brand {brand.brand_id} has no categories")
    lex = cfg.lexicon
    nouns = lex.categories
    S = cfg.image_size
    cats = sorted(brand.category_set)
    n_shapes = 2 if len(cats) >= 2 and rng.random() < 0.5 else 1
    chosen = [int(c) for c in rng.choice(cats, size=n_shapes, replace=False)]
    has_logo = rng.random() < cfg.logo_rate

    bg = np.array(rng.integers(195, 236, size=3), dtype=np.uint8)
    img = np.empty((S, S, 3), dtype=np.uint8)
    img[:] = bg
    occupied = []
    regions = []

    logo_box = None
    if has_logo:
        corner = int(rng.integers(4))
        x0 = LOGO_MARGIN if corner in (0, 2) else S - LOGO_MARGIN - LOGO_SIZE
        y0 = LOGO_MARGIN if corner in (0, 1) else S - LOGO_MARGIN - LOGO_SIZE
        logo_box = (x0, y0, x0 + LOGO_SIZE, y0 + LOGO_SIZE)
        occupied.append((x0 - 1, y0 - 1, x0 + LOGO_SIZE + 1, y0 + LOGO_SIZE + 1))

    color_names = list(lex.colors)
    phrases = []
    lo, hi = max(10, S // 4 - 2), max(12, S * 7 // 16)
    for cat in chosen:
        family = lex.nouns[nouns[cat]]
        ax, ay = SHAPE_ASPECT.get(family, (1.0, 1.0))
        for attempt in range(200):
            s = int(rng.integers(lo, hi + 1)) if attempt < 100 else lo
            w, h = max(4, int(round(s * ax))), max(4, int(round(s * ay)))
            x0, y0 = int(rng.integers(1, S - w)), int(rng.integers(1, S - h))
            box = (x0, y0, x0 + w, y0 + h)
            if not any(_overlaps(box, o) for o in occupied):
                break
        else:
            raise GeneratorError("could not place shapes without overlap")
        occupied.append(box)
        color = color_names[int(rng.integers(len(color_names)))]
        texture = None
        if lex.textures and rng.random() < 0.4:
            texture = lex.textures[int(rng.integers(len(lex.textures)))]
        rgb = np.array(lex.colors[color], dtype=np.float64)
        mask = shape_mask(family, w, h)
        dark = _texture(texture, h, w)
        patch = img[y0:y0 + h, x0:x0 + w]
        patch[mask & ~dark] = rgb.astype(np.uint8)
        patch[mask & dark] = (rgb * 0.55).astype(np.uint8)
        toks = _phrase_tokens(nouns[cat], color, texture, cfg, rng)
        phrases.append(toks)
        regions.append(Region(_norm_box(box, S), PRODUCT, " ".join(toks)))

    if has_logo:
        x0, y0, x1, y1 = logo_box
        ink = glyph_pattern(brand.logo_glyph)
        patch = img[y0:y1, x0:x1]
        patch[ink] = LOGO_INK
        patch[~ink] = LOGO_PAPER
        regions.append(Region(_norm_box(logo_box, S), LOGO, brand.name))

    title = gen_title(brand, phrases, cfg, rng)
    brand_name = "" if rng.random() < cfg.brand_missing_rate else brand.name
    return CatalogRecord(record_id, img, title, brand_name, regions, cfg.country, brand.brand_id)


def _norm_box(box, S):
    x0, y0, x1, y1 = box
    return ((x0 + x1) / 2 / S, (y0 + y1) / 2 / S, (x1 - x0) / S, (y1 - y0) / S)


def brand_weights(n: int, exponent: float) -> np.ndarray:
    """Long-tailed (Zipf-like) popularity over brand ids."""
    w = 1.0 / np.arange(1, n + 1) ** exponent
    return w / w.sum()


def generate_record(cfg: GeneratorConfig, brands: list, record_id: int) -> CatalogRecord:
    rng = np.random.default_rng([cfg.seed, record_id])
    probs = brand_weights(len(brands), cfg.zipf_exponent)
    brand = brands[int(rng.choice(len(brands), p=probs))]
    return render_record(brand, cfg, rng, record_id)


def _gen_chunk(args):
    cfg, brands, ids = args
    return [generate_record(cfg, brands, i) for i in ids]


def generate_catalog(cfg: GeneratorConfig, workers: int = 1, start_id: int = 0):
    """Return ``(brands, records)`` for ``cfg``; ``workers > 1`` uses processes."""
    brands = gen_brand_universe(cfg)
    ids = list(range(start_id, start_id + cfg.n_records))
    if workers <= 1:
        return brands, [generate_record(cfg, brands, i) for i in ids]
    chunks = [ids[i::workers] for i in range(workers)]
    with ProcessPoolExecutor(workers) as ex:
        parts = list(ex.map(_gen_chunk, [(cfg, brands, c) for c in chunks]))
    by_id = {r.record_id: r for part in parts for r in part}
    return brands, [by_id[i] for i in ids]


# ---------------------------------------------------------------- I/O
def export_catalog(records, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            f.write(json.dumps(r.to_json(), sort_keys=True))
            f.write("\n")


def load_catalog(path) -> list:
    records = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                records.append(CatalogRecord.from_json(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise CatalogFormatError(path, lineno, f"{type(e).__name__}: {e}") from None
    return records


def export_brands(brands, path) -> None:
    Path(path).write_text(json.dumps([b.to_dict() for b in brands], indent=1), encoding="utf-8")


def load_brands(path) -> list:
    try:
        return [BrandSpec.from_dict(d) for d in json.loads(Path(path).read_text(encoding="utf-8"))]
    except (json.JSONDecodeError, KeyError, TypeError) as e:
        raise CatalogFormatError(path, 1, f"{type(e).__name__}: {e}") from None


def dump_pngs(records, out_dir) -> None:
    """Sidecar PNGs with ground-truth boxes drawn, for eyeballing."""
    from PIL import Image, ImageDraw

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for r in records:
        im = Image.fromarray(r.image).resize((r.image.shape[1] * 4, r.image.shape[0] * 4), Image.NEAREST)
        d = ImageDraw.Draw(im)
        W, H = im.size
        for reg in r.gt_regions:
            cx, cy, w, h = reg.box
            d.rectangle([(cx - w / 2) * W, (cy - h / 2) * H, (cx + w / 2) * W - 1, (cy + h / 2) * H - 1],
                        outline=(255, 0, 255) if reg.role == LOGO else (0, 0, 0))
        im.save(out / f"{r.record_id:06d}.png")
