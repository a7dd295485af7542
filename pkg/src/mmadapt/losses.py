"""The four training losses and their unweighted sum.

A training item is either a single (image, caption) pair or a packed
sequence of two such pairs. The captioning loss runs the LM with image
prefixes spliced in; the image-token prediction, distillation and retrieval
losses share a second pass over text plus appended image tokens with no
prefixes, per their written conditioning. Packed items are supervised per
segment; the captioning loss averages over the concatenated caption tokens.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensorgrad as tg
from .adapters import AdapterSet, map_image_to_prefix, mapper_forward
from .backbones import FrozenBackbones, extract_img_hidden
from .sequences import ImageSlot, MultimodalSequence, TextSpan
from .tensorgrad import Tensor

_MIN_NORM = 1e-12


@dataclass
class TrainingExample:
    """One image with its caption token ids (no image-token ids).

    ``second`` holds the optional packed partner; ``pack_group`` restricts
    which examples the packer may pair this one with.
    """

    image: np.ndarray
    caption_ids: list[int]
    caption: str = ""
    pack_group: int | None = None
    second: "TrainingExample | None" = None


@dataclass
class LossBreakdown:
    l_c: float
    l_p: float
    l_g: float
    l_r: float
    total: float


def _segments(item, base_vocab_size: int) -> list[tuple[np.ndarray, list[int]]]:
    """Normalize an item to ordered (raster, caption_ids) pairs."""
    if isinstance(item, TrainingExample):
        pairs = [(item.image, list(item.caption_ids))]
        if item.second is not None:
            pairs.append((item.second.image, list(item.second.caption_ids)))
    elif isinstance(item, MultimodalSequence):
        pairs = []
        pending = None
        for seg in item.segments:
            if isinstance(seg, ImageSlot):
                if pending is not None:
                    raise ValueError("image slot without a following caption")
                pending = seg.raster
            else:
                if pending is None:
                    raise ValueError("caption without a preceding image")
                pairs.append((pending, list(seg.ids)))
                pending = None
        if pending is not None:
            raise ValueError("trailing image slot without a caption")
    else:
        raise TypeError(f"unsupported training item: {type(item).__name__}")
    for _, ids in pairs:
        if not ids:
            raise ValueError("empty caption")
        if any(not 0 <= t < base_vocab_size for t in ids):
            raise ValueError("raw captions must not contain image-token ids")
    return pairs


class _TextImgForward:
    """Shared no-prefix pass over [caption, IMG tokens] per segment."""

    def __init__(self, frozen: FrozenBackbones, aset: AdapterSet, segs):
        vocab = frozen.vocab
        img_ids = vocab.img_ids
        tokens: list[int] = []
        self.img_starts: list[int] = []
        self.caption_ids = [ids for _, ids in segs]
        for _, ids in segs:
            tokens.extend(ids)
            self.img_starts.append(len(tokens))
            tokens.extend(img_ids)
        self.hidden, self.logits = frozen.lm.forward(tokens, {}, aset.img_embeds)
        self.r = len(img_ids)


def _caption_forward(frozen, aset, segs):
    """Prefixed pass: [image prefix, caption, IMG tokens] per segment."""
    vocab = frozen.vocab
    k = aset.config.prefix_len
    tokens: list[int] = []
    slots: dict[int, Tensor] = {}
    pred_rows: list[int] = []
    targets: list[int] = []
    pos = 0
    for raster, ids in segs:
        v = frozen.visual.encode(raster)
        slots[pos] = map_image_to_prefix(v, aset.prefix)
        pos += k
        # logits at pos-1 predict the first caption token, and so on
        pred_rows.extend(range(pos - 1, pos - 1 + len(ids)))
        targets.extend(ids)
        tokens.extend(ids)
        pos += len(ids)
        tokens.extend(vocab.img_ids)
        pos += len(vocab.img_ids)
    hidden, logits = frozen.lm.forward(tokens, slots, aset.img_embeds)
    return logits, pred_rows, targets


def caption_loss(frozen: FrozenBackbones, aset: AdapterSet, item) -> Tensor:
    """Mean NLL of the caption tokens given the image prefix and history."""
    segs = _segments(item, frozen.vocab.base_size)
    logits, pred_rows, targets = _caption_forward(frozen, aset, segs)
    logp = tg.log_softmax(tg.embedding(logits, pred_rows), axis=1)
    return tg.nll_from_log_softmax(logp, targets)


def img_pred_loss(frozen: FrozenBackbones, aset: AdapterSet, item,
                  fwd: _TextImgForward | None = None) -> Tensor:
    """NLL of the first image token right after each caption, text-only pass."""
    segs = _segments(item, frozen.vocab.base_size)
    if fwd is None:
        fwd = _TextImgForward(frozen, aset, segs)
    first_img = frozen.vocab.img_id(1)
    rows = [start - 1 for start in fwd.img_starts]
    logp = tg.log_softmax(tg.embedding(fwd.logits, rows), axis=1)
    return tg.nll_from_log_softmax(logp, [first_img] * len(rows))


def _resolve_target(frozen, targets, ids) -> np.ndarray:
    if targets is None:
        return frozen.target_enc.encode(ids)
    key = frozen.vocab.decode(ids)
    if key not in targets:
        raise KeyError(f"no cached conditioning target for caption {key!r}")
    return targets[key]


def gen_loss(frozen: FrozenBackbones, aset: AdapterSet, item,
             targets: dict | None = None, fwd: _TextImgForward | None = None,
             reduction: str = "mean") -> Tensor:
    """MSE between the mapper output and the target-encoder conditioning."""
    segs = _segments(item, frozen.vocab.base_size)
    if fwd is None:
        fwd = _TextImgForward(frozen, aset, segs)
    per_seg = []
    for start, (_, ids) in zip(fwd.img_starts, segs):
        rows = extract_img_hidden(fwd.hidden, range(start, start + fwd.r))
        out = mapper_forward(aset.mapper, rows)
        tgt = tg.constant(_resolve_target(frozen, targets, ids))
        loss = tg.mse(out, tgt)
        if reduction == "sum":
            loss = tg.smul(loss, out.size)
        elif reduction != "mean":
            raise ValueError(f"unknown reduction {reduction!r}")
        per_seg.append(loss)
    return tg.mean_scalars(per_seg)


def infonce(text_embs: Tensor, img_embs: Tensor, temperature: float) -> Tensor:
    """Symmetric InfoNCE over projected (not yet normalized) embeddings."""
    if text_embs.shape != img_embs.shape or text_embs.ndim != 2:
        raise ValueError(
            f"embedding shapes {text_embs.shape} and {img_embs.shape} must match")
    for name, emb in (("text", text_embs), ("image", img_embs)):
        norms = np.linalg.norm(emb.value(), axis=1)
        if np.any(norms < _MIN_NORM):
            raise ValueError(f"degenerate {name} embedding (norm < 1e-12)")
    n = text_embs.shape[0]
    tn = tg.l2_normalize(text_embs, axis=1)
    im = tg.l2_normalize(img_embs, axis=1)
    sims = tg.smul(tg.matmul(tn, tg.transpose(im)), 1.0 / float(temperature))
    diag = list(range(n))
    t2i = tg.nll_from_log_softmax(tg.log_softmax(sims, axis=1), diag)
    i2t = tg.nll_from_log_softmax(tg.log_softmax(tg.transpose(sims), axis=1), diag)
    return tg.add(t2i, i2t)


def retrieval_loss(frozen: FrozenBackbones, aset: AdapterSet, items,
                   fwds: list[_TextImgForward] | None = None) -> Tensor:
    """Contrastive pairing of each segment's first image-token hidden row
    with its image embedding, over all segments in the batch."""
    items = list(items)
    if not items:
        raise ValueError("empty batch")
    text_rows = []
    image_vecs = []
    for i, item in enumerate(items):
        segs = _segments(item, frozen.vocab.base_size)
        fwd = fwds[i] if fwds is not None else _TextImgForward(frozen, aset, segs)
        for start, (raster, _) in zip(fwd.img_starts, segs):
            text_rows.append(tg.embedding(fwd.hidden, [start]))
            image_vecs.append(frozen.visual.encode(raster))
    h = text_rows[0] if len(text_rows) == 1 else tg.concat(text_rows, axis=0)
    text_embs = aset.head.text_embed(h)
    img_embs = aset.head.image_embed(np.stack(image_vecs))
    return infonce(text_embs, img_embs, aset.head.temperature)


def total_loss(frozen: FrozenBackbones, aset: AdapterSet, items,
               targets: dict | None = None, use_caption: bool = True,
               use_img_pred: bool = True, use_gen: bool = True,
               use_retrieval: bool = True, gen_reduction: str = "mean"):
    """Per-item means of the three per-example losses plus the batch
    retrieval loss; returns (breakdown, taped total)."""
    items = list(items)
    if not items:
        raise ValueError("empty batch")
    fwds = [_TextImgForward(frozen, aset, _segments(it, frozen.vocab.base_size))
            for it in items]

    parts: list[Tensor] = []

    def batch_mean(fn):
        return tg.mean_scalars([fn(i) for i in range(len(items))])

    l_c = l_p = l_g = 0.0
    if use_caption:
        t = batch_mean(lambda i: caption_loss(frozen, aset, items[i]))
        l_c = t.item(); parts.append(t)
    if use_img_pred:
        t = batch_mean(lambda i: img_pred_loss(frozen, aset, items[i], fwd=fwds[i]))
        l_p = t.item(); parts.append(t)
    if use_gen:
        t = batch_mean(lambda i: gen_loss(frozen, aset, items[i], targets=targets,
                                          fwd=fwds[i], reduction=gen_reduction))
        l_g = t.item(); parts.append(t)
    l_r = 0.0
    if use_retrieval:
        t = retrieval_loss(frozen, aset, items, fwds=fwds)
        l_r = t.item(); parts.append(t)

    for name, val in (("caption", l_c), ("img-pred", l_p),
                      ("gen", l_g), ("retrieval", l_r)):
        if not np.isfinite(val):
            raise RuntimeError(f"non-finite {name} loss")

    total = parts[0]
    for p in parts[1:]:
        total = tg.add(total, p)
    return LossBreakdown(l_c, l_p, l_g, l_r, l_c + l_p + l_g + l_r), total
