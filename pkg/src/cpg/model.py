"""Miniature grounding network.

Text self-attention stack, a strided conv image encoder with learned row/col
positional embeddings, a joint encoder over ``[text; image]``, and a decoder
over learned object queries that feeds an alignment head and a box head.
Everything is batched: captions are padded to ``max_tokens``.
"""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .engine import (
    Conv2d, DecoderLayer, Embedding, EncoderLayer, LayerNorm, Linear, Module, Tensor,
    load_checkpoint, no_grad, ops, param, save_checkpoint,
)
from .text import Vocab

log = logging.getLogger(__name__)


ALIGN_TOKENS = ("word", "embed", "text", "cross")
IMAGE_POS = ("concat", "attention")


@dataclass
class ModelConfig:
    vocab_size: int = 128
    d_model: int = 32
    text_layers: int = 2
    cross_encoder_layers: int = 2
    decoder_layers: int = 2
    n_heads: int = 4
    n_queries: int = 8
    max_tokens: int = 32
    image_size: int = 64
    conv_channels: tuple = (16, 32)
    conv_strides: tuple = (4, 2)
    pos_dim: int = 8          # per axis; row and col embeddings are concatenated
    ff_mult: int = 2
    tau: float = 0.07
    # tokens the alignment head scores against: "word" (token embedding table),
    # "embed" (plus position), "text" (text-encoder output) or "cross" (joint-encoder output)
    align_tokens: str = "embed"
    align_init_gain: float = 0.1
    # "concat": grid positions concatenated to conv features before projection;
    # "attention": projected positions added to queries/keys only (values stay content-only)
    image_pos: str = "concat"
    seed: int = 0

    def __post_init__(self):
        self.conv_channels = tuple(self.conv_channels)
        self.conv_strides = tuple(self.conv_strides)
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if len(self.conv_channels) != len(self.conv_strides):
            raise ValueError("conv_channels and conv_strides differ in length")
        if self.tau <= 0:
            raise ValueError("tau must be > 0")
        if self.align_tokens not in ALIGN_TOKENS:
            raise ValueError(f"align_tokens must be one of {ALIGN_TOKENS}, got {self.align_tokens!r}")
        if self.image_pos not in IMAGE_POS:
            raise ValueError(f"image_pos must be one of {IMAGE_POS}, got {self.image_pos!r}")

    @property
    def grid(self) -> int:
        s = self.image_size
        for st in self.conv_strides:
            s //= st
        return s

    def to_dict(self):
        d = asdict(self)
        d["conv_channels"], d["conv_strides"] = list(self.conv_channels), list(self.conv_strides)
        return d


@dataclass
class CpgOutput:
    """Batched outputs; leading dim is the batch."""
    token_features: Tensor     # (B, M, d) token states the alignment head scores against
    object_reps: Tensor        # (B, N, d) final decoder states
    boxes: Tensor              # (B, N, 4) cx, cy, w, h in (0, 1)
    alignment_logits: Tensor   # (B, N, M+1); last column is no-object
    obj_proj: Tensor           # (B, N, d)
    tok_proj: Tensor           # (B, M, d)
    token_mask: np.ndarray     # (B, M) True at real tokens

    def item(self, b: int) -> dict:
        return {k: getattr(self, k).data[b] for k in
                ("token_features", "object_reps", "boxes", "alignment_logits")}


@dataclass
class EncodedBatch:
    ids: np.ndarray           # (B, M) int
    mask: np.ndarray          # (B, M) bool
    images: np.ndarray        # (B, S, S, 3) uint8
    truncated: list = field(default_factory=list)


def encode_tokens(surfaces_list, vocab: Vocab, max_tokens: int):
    """Pad/truncate token lists to ``max_tokens``; returns ids, mask, truncated indices."""
    B = len(surfaces_list)
    ids = np.zeros((B, max_tokens), dtype=np.int64)
    mask = np.zeros((B, max_tokens), dtype=bool)
    truncated = []
    for b, s in enumerate(surfaces_list):
        if len(s) > max_tokens:
            truncated.append(b)
            warnings.warn(f"caption of {len(s)} tokens truncated to {max_tokens}", stacklevel=2)
            log.warning("caption %d truncated from %d to %d tokens", b, len(s), max_tokens)
            s = s[:max_tokens]
        ids[b, :len(s)] = vocab.encode(s)
        mask[b, :len(s)] = True
    return ids, mask, truncated


def normalize_images(images) -> np.ndarray:
    x = np.asarray(images, dtype=np.float64)
    return (x / 255.0 - 0.5) / 0.25


class MLP(Module):
    def __init__(self, d_in, d_hidden, d_out, rng):
        self.fc1 = Linear(d_in, d_hidden, rng)
        self.fc2 = Linear(d_hidden, d_out, rng)

    def forward(self, x):
        return self.fc2(ops.relu(self.fc1(x)))


class CpgModel(Module):
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        d = cfg.d_model
        self.tok_embed = Embedding(cfg.vocab_size, d, rng)
        self.text_pos = param(rng.normal(0, 0.02, (cfg.max_tokens, d)))
        self.text_layers = [EncoderLayer(d, cfg.n_heads, rng, cfg.ff_mult) for _ in range(cfg.text_layers)]
        self.text_ln = LayerNorm(d)

        chans = (3,) + cfg.conv_channels
        self.convs = []
        for i, st in enumerate(cfg.conv_strides):
            k, p = (st, 0) if i == 0 else (3, 1)
            self.convs.append(Conv2d(chans[i], chans[i + 1], k, st, p, rng))
        g = cfg.grid
        self.row_embed = param(rng.normal(0, 1.0, (g, cfg.pos_dim)))
        self.col_embed = param(rng.normal(0, 1.0, (g, cfg.pos_dim)))

        self.text_proj = Linear(d, d, rng)
        if cfg.image_pos == "concat":
            self.img_proj = Linear(chans[-1] + 2 * cfg.pos_dim, d, rng)
        else:
            self.img_proj = Linear(chans[-1], d, rng)
            self.pos_proj = Linear(2 * cfg.pos_dim, d, rng)
        self.modality = param(rng.normal(0, 0.02, (2, d)))
        self.cross_layers = [EncoderLayer(d, cfg.n_heads, rng, cfg.ff_mult)
                             for _ in range(cfg.cross_encoder_layers)]
        self.cross_ln = LayerNorm(d)

        self.query_embed = param(rng.normal(0, 1.0, (cfg.n_queries, d)))
        self.dec_layers = [DecoderLayer(d, cfg.n_heads, rng, cfg.ff_mult) for _ in range(cfg.decoder_layers)]
        self.dec_ln = LayerNorm(d)

        self.align_obj = Linear(d, d, rng, gain=cfg.align_init_gain)
        self.align_tok = Linear(d, d, rng, gain=cfg.align_init_gain)
        self.noobj_head = Linear(d, 1, rng, gain=cfg.align_init_gain)
        # untrained queries start confidently "no object"
        self.noobj_head.bias.data[:] = np.log(cfg.max_tokens) + 3.0
        self.box_head = MLP(d, d, 4, rng)

    # ------------------------------------------------------------ encoders
    def encode_text(self, ids, mask) -> Tensor:
        """(B, M) ids -> (B, M, d) features; ``mask`` True at real tokens."""
        ids = np.asarray(ids)
        M = self.cfg.max_tokens
        if ids.shape[1] != M:
            raise ValueError(f"expected {M} token slots, got {ids.shape[1]}")
        return self._text_stack(self.embed_tokens(ids), mask)

    def embed_tokens(self, ids) -> Tensor:
        """Context-free token embeddings (token + position)."""
        return self.tok_embed(np.asarray(ids)) + self.text_pos

    def _text_stack(self, x: Tensor, mask) -> Tensor:
        pad = ~np.asarray(mask, bool)
        for layer in self.text_layers:
            x = layer(x, pad)
        return self.text_ln(x)

    def conv_features(self, images) -> Tensor:
        x = Tensor(normalize_images(images))
        S = self.cfg.image_size
        if x.shape[1:] != (S, S, 3):
            raise ValueError(f"expected images of shape ({S}, {S}, 3), got {x.shape[1:]}")
        for conv in self.convs:
            x = ops.relu(conv(x))
        return x

    def positional_grid(self) -> Tensor:
        g, p = self.cfg.grid, self.cfg.pos_dim
        rows = ops.reshape(self.row_embed, (g, 1, p)) + Tensor(np.zeros((g, g, p)))
        cols = ops.reshape(self.col_embed, (1, g, p)) + Tensor(np.zeros((g, g, p)))
        return ops.reshape(ops.concat([rows, cols], axis=-1), (g * g, 2 * p))

    def encode_image(self, images) -> Tensor:
        """(B, S, S, 3) rasters -> (B, G, d) grid features with 2-D positions."""
        f = self.conv_features(images)
        B, g, _, c = f.shape
        f = ops.reshape(f, (B, g * g, c))
        if self.cfg.image_pos == "attention":
            return self.img_proj(f)
        pos = self.positional_grid()
        pos = ops.reshape(pos, (1, g * g, pos.shape[1])) + Tensor(np.zeros((B, 1, 1)))
        return self.img_proj(ops.concat([f, pos], axis=-1))

    def memory_pos(self, M: int):
        """(1, M + G, d) attention positions for the joint sequence, or None in concat mode."""
        if self.cfg.image_pos != "attention":
            return None
        img = self.pos_proj(self.positional_grid())
        txt = Tensor(np.zeros((M, self.cfg.d_model)))
        return ops.reshape(ops.concat([txt, img], axis=0), (1, M + img.shape[0], self.cfg.d_model))

    # ------------------------------------------------------------ forward
    def forward_batch(self, ids, mask, images) -> CpgOutput:
        cfg = self.cfg
        mask = np.asarray(mask, bool)
        B, M = mask.shape
        if np.asarray(ids).shape[1] != cfg.max_tokens:
            raise ValueError(f"expected {cfg.max_tokens} token slots, got {np.asarray(ids).shape[1]}")
        emb = self.embed_tokens(ids)
        enc = self._text_stack(emb, mask)
        text = self.text_proj(enc) + self.modality[0]
        img = self.encode_image(images) + self.modality[1]
        G = img.shape[1]
        x = ops.concat([text, img], axis=1)
        pad = np.concatenate([~mask, np.zeros((B, G), bool)], axis=1)
        mpos = self.memory_pos(M)
        for layer in self.cross_layers:
            x = layer(x, pad, mpos)
        mem = self.cross_ln(x)
        if cfg.align_tokens == "word":
            tok = self.tok_embed(np.asarray(ids))
        else:
            tok = {"embed": emb, "text": enc, "cross": mem[:, :M]}[cfg.align_tokens]

        q = Tensor(np.zeros((B, cfg.n_queries, cfg.d_model)))
        for layer in self.dec_layers:
            q = layer(q, mem, self.query_embed, mpos, pad)
        obj = self.dec_ln(q)

        po = self.align_obj(obj)
        pt = self.align_tok(tok)
        sim = ops.matmul(po, ops.swapaxes(pt, -1, -2)) * (1.0 / cfg.tau)
        sim = ops.masked_fill(sim, ~mask[:, None, :], -1e9)
        logits = ops.concat([sim, self.noobj_head(obj)], axis=-1)
        boxes = ops.sigmoid(self.box_head(obj))
        return CpgOutput(tok, obj, boxes, logits, po, pt, mask)

    def forward(self, ids, mask, images) -> CpgOutput:
        """Single example convenience wrapper: 1-D ids/mask, one (S, S, 3) image."""
        return self.forward_batch(np.asarray(ids)[None], np.asarray(mask)[None], np.asarray(images)[None])

    # ------------------------------------------------------------ io
    def save(self, path, meta=None) -> None:
        m = {"model_config": self.cfg.to_dict()}
        m.update(meta or {})
        save_checkpoint(path, self.state_dict(), m)

    @classmethod
    def load(cls, path):
        tensors, meta = load_checkpoint(path)
        model = cls(ModelConfig(**meta["model_config"]))
        model.load_state_dict(tensors)
        return model, meta


def query_confidence(alignment_logits) -> np.ndarray:
    """1 - P(no-object) over the last axis of (..., M+1) logits."""
    z = np.asarray(alignment_logits.data if isinstance(alignment_logits, Tensor) else alignment_logits,
                   dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return 1.0 - e[..., -1] / e.sum(axis=-1)


def predict(model: CpgModel, ids, mask, images, batch_size: int = 64):
    """Inference in chunks without recording a tape; returns numpy arrays."""
    outs = {k: [] for k in ("object_reps", "boxes", "alignment_logits", "token_features", "obj_proj")}
    with no_grad():
        for s in range(0, len(ids), batch_size):
            o = model.forward_batch(ids[s:s + batch_size], mask[s:s + batch_size], images[s:s + batch_size])
            for k in outs:
                outs[k].append(getattr(o, k).data)
    return {k: np.concatenate(v) if v else np.zeros((0,)) for k, v in outs.items()}


def save_config(cfg: ModelConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))


def load_config(path) -> ModelConfig:
    return ModelConfig(**json.loads(Path(path).read_text()))
