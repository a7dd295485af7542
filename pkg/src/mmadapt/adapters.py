"""All trainable parameters and their forward maps.

Four adapter groups bridge the frozen networks: a linear prefix mapper that
turns a pooled image embedding into k LM input rows, the r trainable
image-token embedding rows, the retrieval projection pair, and one of four
mapper networks that turn the r image-token hidden states into the decoder's
[L x c] conditioning matrix.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import nnops
from . import tensorgrad as tg
from .backbones import BackboneConfig
from .tensorgrad import Tensor


class MapperVariant(str, Enum):
    LINEAR = "linear"            # one flat matrix [r*e -> L*c]
    MLP3 = "mlp3"                # 3 linear layers with leaky-relu
    TXENCODER = "txencoder"      # bidirectional stack over inputs + queries
    ENCDEC = "encdec"            # 2 encoder + 2 decoder layers, learned queries


@dataclass(frozen=True)
class AdapterConfig:
    prefix_len: int = 4          # k: LM input rows per image
    img_tokens: int = 8          # r: image-token count
    proj_dim: int = 24           # p: retrieval embedding width
    mapper_dim: int = 16         # m: mapper working width
    variant: MapperVariant = MapperVariant.ENCDEC
    temperature: float = 0.07    # fixed contrastive temperature
    seed: int = 0

    def __post_init__(self):
        if self.prefix_len < 1 or self.img_tokens < 1:
            raise ValueError("prefix_len and img_tokens must be >= 1")
        if not 1e-3 <= self.temperature <= 10.0:
            raise ValueError("temperature must lie in [1e-3, 10]")
        object.__setattr__(self, "variant", MapperVariant(self.variant))


class PrefixMapper:
    """Linear map from a pooled image embedding to k LM input rows."""

    def __init__(self, rng, bcfg: BackboneConfig, k: int):
        self.k = k
        self.e = bcfg.e
        self.weight = tg.randn(rng, (bcfg.d, k * bcfg.e),
                               std=1.0 / np.sqrt(bcfg.d), requires_grad=True)

    def map(self, v) -> Tensor:
        if isinstance(v, Tensor):
            vt = v
        else:
            vt = tg.constant(np.asarray(v, dtype=np.float64))
        if vt.ndim != 1 or vt.shape[0] != self.weight.shape[0]:
            raise ValueError(
                f"image embedding shape {vt.shape}, expected ({self.weight.shape[0]},)")
        flat = tg.matmul(tg.reshape(vt, (1, vt.shape[0])), self.weight)
        return tg.reshape(flat, (self.k, self.e))

    def named_params(self):
        return {"prefix.weight": self.weight}


def map_image_to_prefix(v, prefix: PrefixMapper) -> Tensor:
    return prefix.map(v)


class RetrievalHead:
    """Projections into the shared retrieval space plus a fixed temperature."""

    def __init__(self, rng, bcfg: BackboneConfig, p: int, temperature: float):
        self.text_proj = tg.randn(rng, (bcfg.e, p), std=1.0 / np.sqrt(bcfg.e),
                                  requires_grad=True)
        self.image_proj = tg.randn(rng, (bcfg.d, p), std=1.0 / np.sqrt(bcfg.d),
                                   requires_grad=True)
        self.temperature = float(np.clip(temperature, 1e-3, 10.0))

    def text_embed(self, h: Tensor) -> Tensor:
        """Project image-token hidden rows ([e] or [n x e]) to [n x p]."""
        if h.ndim == 1:
            h = tg.reshape(h, (1, h.shape[0]))
        if h.shape[1] != self.text_proj.shape[0]:
            raise ValueError(
                f"hidden width {h.shape[1]}, expected {self.text_proj.shape[0]}")
        return tg.matmul(h, self.text_proj)

    def image_embed(self, v) -> Tensor:
        if not isinstance(v, Tensor):
            v = tg.constant(np.asarray(v, dtype=np.float64))
        if v.ndim == 1:
            v = tg.reshape(v, (1, v.shape[0]))
        if v.shape[1] != self.image_proj.shape[0]:
            raise ValueError(
                f"visual width {v.shape[1]}, expected {self.image_proj.shape[0]}")
        return tg.matmul(v, self.image_proj)

    def named_params(self):
        return {"head.text_proj": self.text_proj, "head.image_proj": self.image_proj}


def retrieval_text_embed(h, head: RetrievalHead) -> Tensor:
    return head.text_embed(h if isinstance(h, Tensor) else tg.constant(h))

def retrieval_image_embed(v, head: RetrievalHead) -> Tensor:
    return head.image_embed(v)


# ---------------------------------------------------------------------------
# mapper variants: [r x e] image-token hidden states -> [L x c]
# ---------------------------------------------------------------------------

class _MapperBase:
    variant: MapperVariant

    def __init__(self, bcfg: BackboneConfig, acfg: AdapterConfig):
        self.r = acfg.img_tokens
        self.e = bcfg.e
        self.L = bcfg.L
        self.c = bcfg.c

    def _check(self, img_hidden: Tensor):
        if img_hidden.shape != (self.r, self.e):
            raise ValueError(
                f"mapper input shape {img_hidden.shape}, expected {(self.r, self.e)}")


class LinearMapper(_MapperBase):
    variant = MapperVariant.LINEAR

    def __init__(self, rng, bcfg, acfg):
        super().__init__(bcfg, acfg)
        n_in, n_out = self.r * self.e, self.L * self.c
        self.weight = tg.randn(rng, (n_in, n_out), std=1.0 / np.sqrt(n_in),
                               requires_grad=True)

    def forward(self, img_hidden: Tensor) -> Tensor:
        self._check(img_hidden)
        flat = tg.reshape(img_hidden, (1, self.r * self.e))
        return tg.reshape(tg.matmul(flat, self.weight), (self.L, self.c))

    def named_params(self):
        return {"mapper.weight": self.weight}


class Mlp3Mapper(_MapperBase):
    variant = MapperVariant.MLP3

    def __init__(self, rng, bcfg, acfg):
        super().__init__(bcfg, acfg)
        n_in, n_out = self.r * self.e, self.L * self.c
        hidden = 4 * n_out
        dims = [n_in, hidden, hidden, n_out]
        self.weights = []
        self.biases = []
        for a, b in zip(dims, dims[1:]):
            self.weights.append(tg.randn(rng, (a, b), std=1.0 / np.sqrt(a),
                                         requires_grad=True))
            self.biases.append(tg.zeros((b,), requires_grad=True))

    def forward(self, img_hidden: Tensor) -> Tensor:
        self._check(img_hidden)
        x = tg.reshape(img_hidden, (1, self.r * self.e))
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            x = tg.add(tg.matmul(x, w), b)
            if i < len(self.weights) - 1:
                x = tg.leaky_relu(x, 0.01)
        return tg.reshape(x, (self.L, self.c))

    def named_params(self):
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"mapper.l{i}.w"] = w
            out[f"mapper.l{i}.b"] = b
        return out


class _ProjectedMapper(_MapperBase):
    """Shared pieces: input projection, queries, positional tables, output."""

    def __init__(self, rng, bcfg, acfg):
        super().__init__(bcfg, acfg)
        m = acfg.mapper_dim
        self.m = m
        self.n_head = 2 if m % 2 == 0 else 1
        self.in_w = tg.randn(rng, (self.e, m), std=1.0 / np.sqrt(self.e),
                             requires_grad=True)
        self.in_b = tg.zeros((m,), requires_grad=True)
        self.queries = tg.randn(rng, (self.L, m), std=0.5, requires_grad=True)
        self.out_w = tg.randn(rng, (m, self.c), std=1.0 / np.sqrt(m),
                              requires_grad=True)
        self.out_b = tg.zeros((self.c,), requires_grad=True)
        self.pos_r = tg.constant(nnops.sinusoidal_positions(self.r, m))
        self.pos_L = tg.constant(nnops.sinusoidal_positions(self.L, m))

    def _project_inputs(self, img_hidden: Tensor) -> Tensor:
        x = tg.add(tg.matmul(img_hidden, self.in_w), self.in_b)
        return tg.add(x, self.pos_r)

    def _queries_with_pos(self) -> Tensor:
        return tg.add(self.queries, self.pos_L)

    def _readout(self, x: Tensor) -> Tensor:
        return tg.add(tg.matmul(tg.layer_norm(x), self.out_w), self.out_b)

    def _shared_params(self):
        return {"mapper.in_w": self.in_w, "mapper.in_b": self.in_b,
                "mapper.queries": self.queries,
                "mapper.out_w": self.out_w, "mapper.out_b": self.out_b}


class TxEncoderMapper(_ProjectedMapper):
    """One bidirectional stack over projected inputs and queries."""

    variant = MapperVariant.TXENCODER
    n_layers = 4

    def __init__(self, rng, bcfg, acfg):
        super().__init__(rng, bcfg, acfg)
        self.blocks = [nnops.BlockParams(rng, self.m, self.n_head, trainable=True)
                       for _ in range(self.n_layers)]

    def forward(self, img_hidden: Tensor) -> Tensor:
        self._check(img_hidden)
        x = tg.concat([self._project_inputs(img_hidden), self._queries_with_pos()],
                      axis=0)
        for blk in self.blocks:
            x = nnops.block_forward(x, blk)
        # read out the L query positions
        x = tg.embedding(x, list(range(self.r, self.r + self.L)))
        return self._readout(x)

    def named_params(self):
        out = self._shared_params()
        for i, blk in enumerate(self.blocks):
            out.update(blk.named_params(f"mapper.l{i}"))
        return out


class EncDecMapper(_ProjectedMapper):
    """2 encoder layers over the r inputs, 2 decoder layers over L queries.

    The learned queries enter as the decoder's initial inputs and every
    decoder layer cross-attends to the encoded image-token states; queries
    are ordinary parameters, fixed at inference.
    """

    variant = MapperVariant.ENCDEC

    def __init__(self, rng, bcfg, acfg):
        super().__init__(rng, bcfg, acfg)
        self.enc_blocks = [nnops.BlockParams(rng, self.m, self.n_head, trainable=True)
                           for _ in range(2)]
        self.dec_blocks = [nnops.BlockParams(rng, self.m, self.n_head,
                                             trainable=True, cross=True)
                           for _ in range(2)]

    def forward(self, img_hidden: Tensor) -> Tensor:
        self._check(img_hidden)
        src = self._project_inputs(img_hidden)
        for blk in self.enc_blocks:
            src = nnops.block_forward(src, blk)
        x = self._queries_with_pos()
        for blk in self.dec_blocks:
            x = nnops.block_forward(x, blk, memory=src)
        return self._readout(x)

    def named_params(self):
        out = self._shared_params()
        for i, blk in enumerate(self.enc_blocks):
            out.update(blk.named_params(f"mapper.enc{i}"))
        for i, blk in enumerate(self.dec_blocks):
            out.update(blk.named_params(f"mapper.dec{i}"))
        return out


_MAPPERS = {
    MapperVariant.LINEAR: LinearMapper,
    MapperVariant.MLP3: Mlp3Mapper,
    MapperVariant.TXENCODER: TxEncoderMapper,
    MapperVariant.ENCDEC: EncDecMapper,
}


def mapper_forward(mapper, img_hidden) -> Tensor:
    if not isinstance(img_hidden, Tensor):
        img_hidden = tg.constant(np.asarray(img_hidden, dtype=np.float64))
    return mapper.forward(img_hidden)


@dataclass
class AdapterSet:
    """Every trainable parameter group, owned by the trainer during training."""

    config: AdapterConfig
    prefix: PrefixMapper
    img_embeds: Tensor
    head: RetrievalHead
    mapper: object

    @classmethod
    def build(cls, bcfg: BackboneConfig, acfg: AdapterConfig) -> "AdapterSet":
        rng = np.random.default_rng(acfg.seed)
        prefix = PrefixMapper(rng, bcfg, acfg.prefix_len)
        img_embeds = tg.randn(rng, (acfg.img_tokens, bcfg.e), std=0.6,
                              requires_grad=True)
        head = RetrievalHead(rng, bcfg, acfg.proj_dim, acfg.temperature)
        mapper = _MAPPERS[acfg.variant](rng, bcfg, acfg)
        return cls(acfg, prefix, img_embeds, head, mapper)

    def named_params(self) -> dict[str, Tensor]:
        out = {"img_embeds": self.img_embeds}
        out.update(self.prefix.named_params())
        out.update(self.head.named_params())
        out.update(self.mapper.named_params())
        return out

    def zero_grads(self) -> None:
        for p in self.named_params().values():
            p.zero_grad()
