"""The four frozen networks and the tokenizer.

Everything here is built once from a seed and never updated: the causal LM
(text rows of its embedding matrix; the trailing image-token rows are passed
in per call and live in the adapter set), the visual encoder, the target text
encoder whose outputs the mapper is regressed onto, and the image decoder.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import tensorgrad as tg
from . import nnops
from .tensorgrad import Tensor

CONTEXT_LIMIT = 512

PAD, BOS, EOS = 0, 1, 2
_SPECIALS = ["<pad>", "<bos>", "<eos>"]
_CORE_WORDS = [
    "a", "the", "is", "there", "at", "in", "on", "and", "of", "near",
    "square", "circle", "triangle",
    "red", "green", "blue", "yellow",
    "small", "medium", "large",
    "top", "middle", "bottom", "left", "center", "right",
]


@dataclass(frozen=True)
class BackboneConfig:
    V: int = 64          # base vocabulary size (text tokens, incl. specials)
    e: int = 32          # LM embedding width
    d: int = 24          # visual embedding width
    L: int = 8           # conditioning rows expected by the image decoder
    c: int = 16          # conditioning width
    n_layer: int = 2
    n_head: int = 4
    H: int = 8
    W: int = 8
    C: int = 3
    seed: int = 0

    def __post_init__(self):
        for name in ("V", "e", "d", "L", "c", "n_layer", "n_head", "H", "W", "C"):
            if getattr(self, name) <= 0:
                raise ValueError(f"BackboneConfig.{name} must be positive")
        if self.e % self.n_head:
            raise ValueError(f"e={self.e} not divisible by n_head={self.n_head}")
        if self.V < len(_SPECIALS) + len(_CORE_WORDS):
            raise ValueError(f"V={self.V} too small for the base word list")


class Vocabulary:
    """Word-level vocabulary: text ids 0..V-1, image tokens V..V+r-1."""

    def __init__(self, base_size: int, img_token_count: int):
        if img_token_count < 1:
            raise ValueError("img_token_count must be >= 1")
        self.base_size = base_size
        self.img_token_count = img_token_count
        words = _SPECIALS + _CORE_WORDS
        words += [f"w{i:02d}" for i in range(base_size - len(words))]
        self._words = words + [f"[IMG{i + 1}]" for i in range(img_token_count)]
        self._ids = {w: i for i, w in enumerate(self._words)}

    @property
    def total_size(self) -> int:
        return self.base_size + self.img_token_count

    @property
    def img_ids(self) -> list[int]:
        return list(range(self.base_size, self.total_size))

    def img_id(self, i: int) -> int:
        """Id of [IMG{i}], 1-based."""
        if not 1 <= i <= self.img_token_count:
            raise ValueError(f"image token index {i} out of range")
        return self.base_size + i - 1

    def is_img(self, token_id: int) -> bool:
        return self.base_size <= token_id < self.total_size

    def encode(self, text: str) -> list[int]:
        ids = []
        for w in text.split():
            if w not in self._ids:
                raise ValueError(f"unknown word: {w!r}")
            ids.append(self._ids[w])
        return ids

    def decode(self, ids) -> str:
        out = []
        for i in ids:
            i = int(i)
            if not 0 <= i < self.total_size:
                raise ValueError(f"token id {i} out of range")
            out.append(self._words[i])
        return " ".join(out)


class CausalLM:
    """Frozen decoder-only transformer with a tied output head.

    The trailing image-token embedding rows are not stored here: callers pass
    them per forward so they can stay trainable while the text rows stay
    frozen.
    """

    def __init__(self, rng: np.random.Generator, cfg: BackboneConfig):
        self.cfg = cfg
        self.tok_embed = tg.randn(rng, (cfg.V, cfg.e), std=0.6)
        self.blocks = [nnops.BlockParams(rng, cfg.e, cfg.n_head, trainable=False)
                       for _ in range(cfg.n_layer)]
        self._mask_cache: dict[int, Tensor] = {}
        self._pos_cache: dict[int, Tensor] = {}

    def _mask(self, t: int) -> Tensor:
        if t not in self._mask_cache:
            self._mask_cache[t] = tg.constant(nnops.causal_mask(t))
        return self._mask_cache[t]

    def _pos(self, t: int) -> Tensor:
        if t not in self._pos_cache:
            self._pos_cache[t] = tg.constant(
                nnops.sinusoidal_positions(t, self.cfg.e))
        return self._pos_cache[t]

    def forward(self, tokens, prefix_slots, img_embeds: Tensor):
        """Run the LM over tokens with embedding blocks spliced in.

        ``prefix_slots`` maps a start position in the final sequence to a
        [k x e] tensor occupying k consecutive positions there; those
        positions use the given embeddings verbatim instead of a token
        lookup. Returns (hidden [T x e], logits [T x (V + r)]).
        """
        cfg = self.cfg
        tokens = [int(t) for t in tokens]
        r = img_embeds.shape[0]
        for t in tokens:
            if not 0 <= t < cfg.V + r:
                raise ValueError(f"token id {t} out of range (vocab {cfg.V}+{r})")
        slots = sorted((prefix_slots or {}).items())
        slot_len = 0
        for pos, block in slots:
            if block.ndim != 2 or block.shape[1] != cfg.e:
                raise ValueError(
                    f"prefix slot at {pos}: expected [k x {cfg.e}], got {block.shape}")
            slot_len += block.shape[0]
        total = len(tokens) + slot_len
        if total > CONTEXT_LIMIT:
            raise ValueError(f"sequence length {total} exceeds context limit {CONTEXT_LIMIT}")
        if total == 0:
            raise ValueError("empty input")

        full_embed = tg.concat([self.tok_embed, img_embeds], axis=0)
        parts = []
        cur = 0
        tok_i = 0
        for pos, block in slots:
            if pos < cur:
                raise ValueError(f"overlapping prefix slots at position {pos}")
            if pos > total - block.shape[0]:
                raise ValueError(f"prefix slot at {pos} does not fit in length {total}")
            gap = pos - cur
            if gap:
                parts.append(tg.embedding(full_embed, tokens[tok_i:tok_i + gap]))
                tok_i += gap
                cur += gap
            parts.append(block)
            cur += block.shape[0]
        if tok_i < len(tokens):
            parts.append(tg.embedding(full_embed, tokens[tok_i:]))

        x = parts[0] if len(parts) == 1 else tg.concat(parts, axis=0)
        x = tg.add(x, self._pos(total))
        mask = self._mask(total)
        for blk in self.blocks:
            x = nnops.block_forward(x, blk, mask=mask)
        hidden = tg.layer_norm(x)
        logits = tg.matmul(hidden, tg.transpose(full_embed))
        return hidden, logits

    def named_params(self) -> dict[str, Tensor]:
        out = {"lm.tok_embed": self.tok_embed}
        for i, blk in enumerate(self.blocks):
            out.update(blk.named_params(f"lm.l{i}"))
        return out


def extract_img_hidden(hidden: Tensor, img_positions) -> Tensor:
    """Select the hidden rows of the image-token positions, in order."""
    pos = [int(p) for p in img_positions]
    if not pos:
        raise ValueError("no image-token positions given")
    if any(b <= a for a, b in zip(pos, pos[1:])):
        raise ValueError(f"image-token positions must be strictly increasing: {pos}")
    if pos[0] < 0 or pos[-1] >= hidden.shape[0]:
        raise ValueError(f"position out of range for hidden of {hidden.shape[0]} rows")
    return tg.embedding(hidden, pos)


class VisualEncoder:
    """Frozen linear map from a raster to a pooled d-vector."""

    def __init__(self, rng: np.random.Generator, cfg: BackboneConfig):
        self.cfg = cfg
        n_in = cfg.H * cfg.W * cfg.C
        self.weight = rng.normal(0, 1.0 / np.sqrt(n_in), size=(n_in, cfg.d))

    def encode(self, raster: np.ndarray) -> np.ndarray:
        raster = np.asarray(raster, dtype=np.float64)
        expect = (self.cfg.H, self.cfg.W, self.cfg.C)
        if raster.shape != expect:
            raise ValueError(f"raster shape {raster.shape}, expected {expect}")
        return raster.reshape(-1) @ self.weight


def _np_layer_norm(x: np.ndarray) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + 1e-5)


class TargetTextEncoder:
    """Frozen 1-layer bidirectional encoder; output is always [L x c].

    Token ids are truncated or padded to L internally, so the conditioning
    matrix shape never depends on the caption length. Output rows are
    layer-normalized, which keeps distillation targets on a common scale.
    """

    def __init__(self, rng: np.random.Generator, cfg: BackboneConfig):
        self.cfg = cfg
        c = cfg.c
        hd = c // 2
        self.embed = rng.normal(0, 0.7, size=(cfg.V, c))
        self.pos = nnops.sinusoidal_positions(cfg.L, c)
        s = 0.9 / np.sqrt(c)
        self.heads = [(rng.normal(0, s, (c, hd)), rng.normal(0, s, (c, hd)),
                       rng.normal(0, s, (c, hd))) for _ in range(2)]
        self.out_w = rng.normal(0, s, (c, c))
        self.mlp_w1 = rng.normal(0, s, (c, 4 * c))
        self.mlp_w2 = rng.normal(0, s, (4 * c, c))

    def encode(self, token_ids) -> np.ndarray:
        cfg = self.cfg
        ids = [int(t) for t in token_ids][:cfg.L]
        for t in ids:
            if not 0 <= t < cfg.V:
                raise ValueError(f"target encoder got non-text token id {t}")
        ids = ids + [PAD] * (cfg.L - len(ids))
        x = self.embed[ids] + self.pos
        h = _np_layer_norm(x)
        outs = []
        for wq, wk, wv in self.heads:
            q, k, v = h @ wq, h @ wk, h @ wv
            scores = q @ k.T / np.sqrt(wq.shape[1])
            scores -= scores.max(axis=1, keepdims=True)
            attn = np.exp(scores)
            attn /= attn.sum(axis=1, keepdims=True)
            outs.append(attn @ v)
        x = x + np.concatenate(outs, axis=1) @ self.out_w
        h = _np_layer_norm(x)
        u = h @ self.mlp_w1
        gelu = 0.5 * u * (1 + np.tanh(np.sqrt(2 / np.pi) * (u + 0.044715 * u ** 3)))
        x = x + gelu @ self.mlp_w2
        return _np_layer_norm(x)

    def arrays(self) -> dict[str, np.ndarray]:
        out = {"tenc.embed": self.embed, "tenc.out_w": self.out_w,
               "tenc.mlp_w1": self.mlp_w1, "tenc.mlp_w2": self.mlp_w2}
        for i, (wq, wk, wv) in enumerate(self.heads):
            out[f"tenc.h{i}.wq"] = wq
            out[f"tenc.h{i}.wk"] = wk
            out[f"tenc.h{i}.wv"] = wv
        return out


class ImageDecoder:
    """Frozen linear decoder from a conditioning matrix to a raster in [0,1]."""

    def __init__(self, rng: np.random.Generator, cfg: BackboneConfig):
        self.cfg = cfg
        n_out = cfg.H * cfg.W * cfg.C
        self.weight = rng.normal(0, 1.5 / np.sqrt(cfg.c), size=(cfg.c, n_out))
        self.bias = rng.normal(0, 0.3, size=(n_out,))

    def decode(self, cond: np.ndarray) -> np.ndarray:
        cfg = self.cfg
        cond = np.asarray(cond, dtype=np.float64)
        if cond.shape != (cfg.L, cfg.c):
            raise ValueError(f"conditioning shape {cond.shape}, expected {(cfg.L, cfg.c)}")
        z = cond.mean(axis=0) @ self.weight + self.bias
        return (1.0 / (1.0 + np.exp(-z))).reshape(cfg.H, cfg.W, cfg.C)


@dataclass
class FrozenBackbones:
    config: BackboneConfig
    img_token_count: int
    vocab: Vocabulary
    lm: CausalLM
    visual: VisualEncoder
    target_enc: TargetTextEncoder
    image_dec: ImageDecoder

    def frozen_arrays(self) -> dict[str, np.ndarray]:
        out = {name: t.value() for name, t in self.lm.named_params().items()}
        out["visual.weight"] = self.visual.weight
        out.update(self.target_enc.arrays())
        out["idec.weight"] = self.image_dec.weight
        out["idec.bias"] = self.image_dec.bias
        return out

    def frozen_digest(self) -> str:
        arrays = self.frozen_arrays()
        h = hashlib.sha256()
        for name in sorted(arrays):
            h.update(name.encode())
            h.update(np.ascontiguousarray(arrays[name]).tobytes())
        return h.hexdigest()


def build_frozen(config: BackboneConfig, img_token_count: int = 8) -> FrozenBackbones:
    """Build all four frozen networks deterministically from the config seed."""
    rng = np.random.default_rng(config.seed)
    vocab = Vocabulary(config.V, img_token_count)
    lm = CausalLM(rng, config)
    visual = VisualEncoder(rng, config)
    target_enc = TargetTextEncoder(rng, config)
    image_dec = ImageDecoder(rng, config)
    return FrozenBackbones(config, img_token_count, vocab, lm, visual,
                           target_enc, image_dec)
