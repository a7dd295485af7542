"""Taped transformer building blocks shared by the language model and mappers.

Multi-head attention is built from per-head projection matrices so the whole
stack stays inside the fixed primitive set (no tensor slicing required).
Layer norm is pure normalization: the frozen nets don't need affine terms and
the trainable mappers do fine without them.
"""

from __future__ import annotations

import numpy as np

from . import tensorgrad as tg
from .tensorgrad import Tensor

NEG_MASK = -1e9


def sinusoidal_positions(length: int, width: int) -> np.ndarray:
    """Standard interleaved sin/cos positional table [length x width]."""
    pos = np.arange(length)[:, None]
    i = np.arange(width)[None, :]
    angles = pos / np.power(10000.0, (2 * (i // 2)) / width)
    table = np.where(i % 2 == 0, np.sin(angles), np.cos(angles))
    return table


def causal_mask(length: int) -> np.ndarray:
    """Additive mask: position i may attend to positions <= i."""
    m = np.zeros((length, length))
    m[np.triu_indices(length, k=1)] = NEG_MASK
    return m


def attention(q_src: Tensor, kv_src: Tensor, heads, out_w: Tensor,
              out_b: Tensor, mask: Tensor | None = None) -> Tensor:
    """Multi-head attention; ``heads`` is a list of (wq, wk, wv) triples."""
    head_dim = heads[0][0].shape[1]
    scale = 1.0 / np.sqrt(head_dim)
    outs = []
    for wq, wk, wv in heads:
        q = tg.matmul(q_src, wq)
        k = tg.matmul(kv_src, wk)
        v = tg.matmul(kv_src, wv)
        scores = tg.smul(tg.matmul(q, tg.transpose(k)), scale)
        if mask is not None:
            scores = tg.add(scores, mask)
        outs.append(tg.matmul(tg.softmax(scores, axis=1), v))
    cat = tg.concat(outs, axis=1) if len(outs) > 1 else outs[0]
    return tg.add(tg.matmul(cat, out_w), out_b)


def mlp(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    h = tg.gelu(tg.add(tg.matmul(x, w1), b1))
    return tg.add(tg.matmul(h, w2), b2)


class BlockParams:
    """Parameter bundle for one pre-LN transformer block."""

    def __init__(self, rng: np.random.Generator, width: int, n_head: int,
                 trainable: bool, cross: bool = False):
        if width % n_head:
            raise ValueError(f"width {width} not divisible by {n_head} heads")
        hd = width // n_head
        std = 1.0 / np.sqrt(width)

        def mk(shape, s=std):
            return tg.randn(rng, shape, std=s, requires_grad=trainable)

        self.heads = [(mk((width, hd)), mk((width, hd)), mk((width, hd)))
                      for _ in range(n_head)]
        self.out_w = mk((width, width))
        self.out_b = tg.zeros((width,), requires_grad=trainable)
        self.cross_heads = None
        self.cross_out_w = None
        self.cross_out_b = None
        if cross:
            self.cross_heads = [(mk((width, hd)), mk((width, hd)), mk((width, hd)))
                                for _ in range(n_head)]
            self.cross_out_w = mk((width, width))
            self.cross_out_b = tg.zeros((width,), requires_grad=trainable)
        self.mlp_w1 = mk((width, 4 * width))
        self.mlp_b1 = tg.zeros((4 * width,), requires_grad=trainable)
        self.mlp_w2 = mk((4 * width, width), s=std / 2)
        self.mlp_b2 = tg.zeros((width,), requires_grad=trainable)

    def named_params(self, prefix: str):
        out = {}
        for h, (wq, wk, wv) in enumerate(self.heads):
            out[f"{prefix}.h{h}.wq"] = wq
            out[f"{prefix}.h{h}.wk"] = wk
            out[f"{prefix}.h{h}.wv"] = wv
        out[f"{prefix}.out_w"] = self.out_w
        out[f"{prefix}.out_b"] = self.out_b
        if self.cross_heads is not None:
            for h, (wq, wk, wv) in enumerate(self.cross_heads):
                out[f"{prefix}.x{h}.wq"] = wq
                out[f"{prefix}.x{h}.wk"] = wk
                out[f"{prefix}.x{h}.wv"] = wv
            out[f"{prefix}.cross_out_w"] = self.cross_out_w
            out[f"{prefix}.cross_out_b"] = self.cross_out_b
        out[f"{prefix}.mlp_w1"] = self.mlp_w1
        out[f"{prefix}.mlp_b1"] = self.mlp_b1
        out[f"{prefix}.mlp_w2"] = self.mlp_w2
        out[f"{prefix}.mlp_b2"] = self.mlp_b2
        return out


def block_forward(x: Tensor, params: BlockParams, mask: Tensor | None = None,
                  memory: Tensor | None = None) -> Tensor:
    h = tg.layer_norm(x)
    x = tg.add(x, attention(h, h, params.heads, params.out_w, params.out_b, mask))
    if memory is not None:
        if params.cross_heads is None:
            raise ValueError("block has no cross-attention parameters")
        h = tg.layer_norm(x)
        x = tg.add(x, attention(h, memory, params.cross_heads,
                                params.cross_out_w, params.cross_out_b))
    h = tg.layer_norm(x)
    return tg.add(x, mlp(h, params.mlp_w1, params.mlp_b1,
                         params.mlp_w2, params.mlp_b2))
