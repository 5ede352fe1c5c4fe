"""Caption crafting, span-tracking tokenization and ADJ* NOUN phrase chunking."""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

NOUN, ADJ, OTHER = "NOUN", "ADJ", "OTHER"
BRAND_PREFIX = "Brand: "
TITLE_PREFIX = "Title: "

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


def tokenize(text: str) -> list:
    """Split on whitespace and punctuation, keeping punctuation as tokens.

    Returns ``[(surface, (start, end)), ...]`` with half-open char spans.
    """
    return [(m.group(), (m.start(), m.end())) for m in _TOKEN_RE.finditer(text)]


def reconstruct(tokens: list, seps: list) -> str:
    """Rebuild text from token surfaces and the ``len(tokens) + 1`` separators."""
    return "".join(seps[i] + s for i, (s, _) in enumerate(tokens)) + seps[len(tokens)]


def separators(text: str, tokens: list) -> list:
    """The ``len(tokens) + 1`` gaps between tokens (leading and trailing included)."""
    out, prev = [], 0
    for _, (a, b) in tokens:
        out.append(text[prev:a])
        prev = b
    out.append(text[prev:])
    return out


def load_lexicon(path) -> dict:
    pos = json.loads(Path(path).read_text(encoding="utf-8"))
    bad = {k: v for k, v in pos.items() if v not in (NOUN, ADJ, OTHER)}
    if bad:
        raise ValueError(f"lexicon tags must be NOUN/ADJ/OTHER, got {bad}")
    return pos


def save_lexicon(pos: dict, path) -> None:
    Path(path).write_text(json.dumps(pos, indent=1, sort_keys=True), encoding="utf-8")


def pos_tag(token: str, lexicon: dict) -> str:
    return lexicon.get(token) or lexicon.get(token.lower()) or OTHER


def extract_noun_phrases(tokens: list, lexicon: dict) -> list:
    """Half-open intervals covering each maximal ``ADJ* NOUN`` run.

    ``tokens`` may be plain strings or ``(surface, span)`` pairs.
    """
    out = []
    run_start: Optional[int] = None
    for i, tok in enumerate(tokens):
        surface = tok[0] if isinstance(tok, tuple) else tok
        tag = pos_tag(surface, lexicon)
        if tag == ADJ:
            if run_start is None:
                run_start = i
        elif tag == NOUN:
            out.append((i if run_start is None else run_start, i + 1))
            run_start = None
        else:
            run_start = None
    return out


@dataclass
class Caption:
    text: str
    tokens: list
    title_span: tuple
    brand_span: Optional[tuple] = None
    noun_phrases: list = field(default_factory=list)

    @property
    def surfaces(self) -> list:
        return [s for s, _ in self.tokens]

    def span_text(self, span) -> str:
        a, b = span
        return self.text[self.tokens[a][1][0]:self.tokens[b - 1][1][1]]

    def reconstruct(self) -> str:
        return reconstruct(self.tokens, separators(self.text, self.tokens))


def craft_caption(brand: str, title_tokens: list, lexicon: Optional[dict] = None) -> Caption:
    """``"Brand: <brand>, Title: <title>"`` (or ``"Title: <title>"`` without a brand).

    ``brand_span`` covers the whole ``Brand: <brand>`` section; ``title_span``
    covers the title words after the ``Title:`` prefix.
    """
    if not title_tokens:
        raise ValueError("title_tokens must be nonempty")
    title = " ".join(title_tokens)
    brand = brand.strip()
    if brand:
        head = f"{BRAND_PREFIX}{brand}, "
        text = f"{head}{TITLE_PREFIX}{title}"
    else:
        head = ""
        text = f"{TITLE_PREFIX}{title}"
    tokens = tokenize(text)
    title_char0 = len(head) + len(TITLE_PREFIX)
    t0 = next(i for i, (_, (a, _)) in enumerate(tokens) if a >= title_char0)
    title_span = (t0, len(tokens))
    brand_span = None
    if brand:
        brand_end = len(BRAND_PREFIX) + len(brand)
        b1 = max(i for i, (_, (_, b)) in enumerate(tokens) if b <= brand_end) + 1
        brand_span = (0, b1)
    phrases = []
    if lexicon is not None:
        phrases = [(a + t0, b + t0) for a, b in extract_noun_phrases(tokens[t0:], lexicon)]
    return Caption(text, tokens, title_span, brand_span, phrases)


def caption_for_record(record, lexicon: dict) -> Caption:
    return craft_caption(record.brand_name, record.title_tokens, lexicon)


class Vocab:
    """Closed token vocabulary for the model; index 0 is padding, 1 unknown."""

    PAD, UNK = "<pad>", "<unk>"

    def __init__(self, tokens=()):
        self.itos = [self.PAD, self.UNK]
        self.stoi = {self.PAD: 0, self.UNK: 1}
        for t in tokens:
            self.add(t)

    def add(self, tok: str) -> int:
        if tok not in self.stoi:
            self.stoi[tok] = len(self.itos)
            self.itos.append(tok)
        return self.stoi[tok]

    def __len__(self):
        return len(self.itos)

    def encode(self, surfaces) -> list:
        return [self.stoi.get(s, 1) for s in surfaces]

    @classmethod
    def build(cls, captions) -> "Vocab":
        v = cls()
        toks = sorted({s for c in captions for s in c.surfaces})
        for t in toks:
            v.add(t)
        return v

    def to_list(self) -> list:
        return list(self.itos)

    @classmethod
    def from_list(cls, items) -> "Vocab":
        v = cls()
        for t in items[2:]:
            v.add(t)
        return v


def default_vocab(lexicon=None) -> Vocab:
    """Every surface the generator can emit: prefixes, lexicon and brand words."""
    from .catalog import BRAND_WORDS, Lexicon

    lex = lexicon or Lexicon()
    words = [s for p in (BRAND_PREFIX, TITLE_PREFIX) for s, _ in tokenize(p)] + [","]
    words += sorted(lex.nouns) + sorted(lex.adjectives) + sorted(BRAND_WORDS)
    return Vocab(dict.fromkeys(words))
