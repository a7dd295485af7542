"""Autoregressive interleaved decoding.

Decoding re-runs the LM over the growing context each step (no KV cache at
desk scale). Image tokens beyond the first are masked from the sampler
everywhere; once the first one is emitted the remaining r-1 are appended
deterministically, the hidden rows of the whole window are captured, and the
decision callback picks retrieval or synthesis to fill the slot. Produced
slots keep their image-token ids in context; the produced raster is not
re-encoded.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensorgrad as tg
from .adapters import AdapterSet, map_image_to_prefix, mapper_forward
from .backbones import FrozenBackbones, extract_img_hidden
from .sequences import ImageSlot, MultimodalSequence, TextSpan

_MIN_NORM = 1e-12


@dataclass(frozen=True)
class DecodeConfig:
    mode: str = "greedy"             # "greedy" | "sample"
    temperature: float = 1.0
    max_new_tokens: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("greedy", "sample"):
            raise ValueError(f"unknown decode mode {self.mode!r}")
        if self.mode == "sample" and self.temperature <= 0:
            raise ValueError("temperature must be positive in sampling mode")


class CandidateSet:
    """Retrieval pool: rasters with precomputed projected embeddings."""

    def __init__(self, ids, rasters, embeddings):
        self.ids = [int(i) for i in ids]
        self.rasters = list(rasters)
        self.embeddings = np.asarray(embeddings, dtype=np.float64)
        if len(self.ids) != len(self.rasters) or \
                self.embeddings.shape[0] != len(self.ids):
            raise ValueError("candidate ids, rasters and embeddings must align")

    def __len__(self):
        return len(self.ids)

    @classmethod
    def build(cls, rasters, frozen: FrozenBackbones, aset: AdapterSet, ids=None):
        rasters = list(rasters)
        if ids is None:
            ids = list(range(len(rasters)))
        vecs = [frozen.visual.encode(r) for r in rasters]
        emb = aset.head.image_embed(np.stack(vecs)).value()
        return cls(ids, rasters, emb)

    def recompute_check(self, frozen, aset, atol: float = 1e-6) -> bool:
        fresh = self.build(self.rasters, frozen, aset, self.ids)
        return bool(np.allclose(fresh.embeddings, self.embeddings, atol=atol))


def retrieve_topk(img_hidden1, candidates: CandidateSet, aset: AdapterSet,
                  k: int) -> list[tuple[int, float]]:
    """Rank candidates by cosine to the projected first-image-token row;
    ties broken by lower id."""
    if len(candidates) == 0:
        raise ValueError("empty candidate set")
    if not 1 <= k <= len(candidates):
        raise ValueError(f"k={k} out of range for {len(candidates)} candidates")
    h = np.asarray(img_hidden1, dtype=np.float64).reshape(-1)
    q = aset.head.text_embed(tg.constant(h)).value()[0]
    qn = np.linalg.norm(q)
    cn = np.linalg.norm(candidates.embeddings, axis=1)
    if qn < _MIN_NORM or np.any(cn < _MIN_NORM):
        raise ValueError("degenerate embedding norm in retrieval")
    scores = (candidates.embeddings @ q) / (cn * qn)
    order = sorted(range(len(candidates)),
                   key=lambda i: (-scores[i], candidates.ids[i]))
    return [(candidates.ids[i], float(scores[i])) for i in order[:k]]


def max_candidate_cosine(img_hidden1, candidates, aset) -> float:
    return retrieve_topk(img_hidden1, candidates, aset, k=1)[0][1]


def synthesize_image(img_hidden, aset: AdapterSet,
                     frozen: FrozenBackbones) -> np.ndarray:
    """Map the image-token hidden rows to conditioning rows and decode."""
    cond = mapper_forward(aset.mapper, np.asarray(img_hidden, dtype=np.float64))
    return frozen.image_dec.decode(cond.value())


class _Context:
    """Growing LM input: token ids interleaved with prefix blocks."""

    def __init__(self):
        self.tokens: list[int] = []
        self.slots: dict[int, tg.Tensor] = {}
        self.length = 0

    def add_token(self, tid: int):
        self.tokens.append(tid)
        self.length += 1

    def add_block(self, block: tg.Tensor):
        self.slots[self.length] = block
        self.length += block.shape[0]


def generate_sequence(prompt: MultimodalSequence, cfg: DecodeConfig,
                      aset: AdapterSet, frozen: FrozenBackbones,
                      candidates: CandidateSet | None = None,
                      decider=None) -> MultimodalSequence:
    """Decode a continuation of the prompt, filling image slots as decided.

    ``decider(img_hidden, candidates)`` returns "ret" or "gen"; without
    candidates every produced image is generated. Input image slots must
    carry rasters (spliced in as prefix blocks).
    """
    vocab = frozen.vocab
    r = vocab.img_token_count
    first_img = vocab.img_id(1)
    forced_ids = [vocab.img_id(i) for i in range(2, r + 1)]
    from .backbones import EOS

    ctx = _Context()
    out_segments = []
    for seg in prompt.segments:
        if isinstance(seg, TextSpan):
            for t in seg.ids:
                if vocab.is_img(t):
                    raise ValueError("prompt text spans must not contain image-token ids")
                ctx.add_token(t)
            out_segments.append(TextSpan(list(seg.ids)))
        else:
            if seg.raster is None:
                raise ValueError("input image slots must carry rasters")
            v = frozen.visual.encode(seg.raster)
            ctx.add_block(map_image_to_prefix(v, aset.prefix))
            out_segments.append(seg)
    if ctx.length == 0:
        raise ValueError("empty prompt")

    rng = np.random.default_rng(cfg.seed)
    masked = set(forced_ids)
    new_tokens = 0
    cur_text: list[int] = []

    def flush_text():
        if cur_text:
            out_segments.append(TextSpan(list(cur_text)))
            cur_text.clear()

    while new_tokens < cfg.max_new_tokens:
        hidden, logits = frozen.lm.forward(ctx.tokens, ctx.slots, aset.img_embeds)
        row = logits.value()[-1].copy()
        for tid in masked:
            row[tid] = -np.inf
        if cfg.mode == "greedy":
            tid = int(np.argmax(row))
        else:
            z = row / cfg.temperature
            z -= z.max()
            p = np.exp(z)
            p /= p.sum()
            tid = int(rng.choice(len(row), p=p))
        new_tokens += 1

        if tid == EOS:
            ctx.add_token(tid)
            break
        if tid != first_img:
            ctx.add_token(tid)
            cur_text.append(tid)
            continue

        # forcing window: the remaining image tokens are appended
        # deterministically even if the budget runs out mid-window
        ctx.add_token(first_img)
        start = ctx.length - 1
        for fid in forced_ids:
            ctx.add_token(fid)
            new_tokens += 1
        hidden, _ = frozen.lm.forward(ctx.tokens, ctx.slots, aset.img_embeds)
        rows = extract_img_hidden(hidden, range(start, start + r)).value()

        verdict = "gen"
        if candidates is not None and len(candidates):
            if decider is not None:
                verdict = decider(rows, candidates)
            else:
                # fallback heuristic: retrieve on a strong candidate match
                cos = max_candidate_cosine(rows[0], candidates, aset)
                verdict = "ret" if cos > 0.5 else "gen"
        if verdict not in ("ret", "gen"):
            raise ValueError(f"decision module returned {verdict!r}")

        flush_text()
        if verdict == "ret":
            cid, score = retrieve_topk(rows[0], candidates, aset, k=1)[0]
            idx = candidates.ids.index(cid)
            out_segments.append(ImageSlot("retrieved",
                                          raster=candidates.rasters[idx],
                                          img_hidden=rows, retrieved_id=cid,
                                          score=score))
        else:
            raster = synthesize_image(rows, aset, frozen)
            out_segments.append(ImageSlot("generated", raster=raster,
                                          img_hidden=rows))
        if new_tokens >= cfg.max_new_tokens:
            break

    flush_text()
    return MultimodalSequence(out_segments)
