"""Optimization loop: example packing, Adam on the adapters, persistence.

Batch composition is derived from (run seed, step index) alone, so a resumed
run draws exactly the batches the uninterrupted run would have drawn.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import checkpoint as ckpt
from . import losses as ls
from . import tensorgrad as tg
from .adapters import AdapterConfig, AdapterSet
from .backbones import BackboneConfig, FrozenBackbones, build_frozen
from .losses import LossBreakdown, TrainingExample
from .sequences import ImageSlot, MultimodalSequence, TextSpan


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    batch_size: int = 32
    steps: int = 2000
    pack_probability: float = 0.5
    seed: int = 0
    ckpt_interval: int = 0          # 0: only the final checkpoint
    grad_clip: float | None = None  # global-norm clip, off by default
    use_caption: bool = True
    use_img_pred: bool = True
    use_gen: bool = True
    use_retrieval: bool = True
    gen_reduction: str = "mean"

    def __post_init__(self):
        if not 0.0 <= self.pack_probability <= 1.0:
            raise ValueError("pack_probability must lie in [0, 1]")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 1 or self.steps < 0:
            raise ValueError("batch_size must be >= 1 and steps >= 0")


class AdamState:
    """First/second moments per parameter plus the shared step counter."""

    def __init__(self, params: dict[str, tg.Tensor]):
        self.m = {n: np.zeros(p.size) for n, p in params.items()}
        self.v = {n: np.zeros(p.size) for n, p in params.items()}
        self.step = 0

    def update(self, params: dict[str, tg.Tensor], cfg: TrainConfig) -> None:
        self.step += 1
        t = self.step
        grads = {n: (p.grad if p.grad is not None else np.zeros(p.size))
                 for n, p in params.items()}
        if cfg.grad_clip is not None:
            gnorm = np.sqrt(sum(float(g @ g) for g in grads.values()))
            if gnorm > cfg.grad_clip:
                scale = cfg.grad_clip / gnorm
                grads = {n: g * scale for n, g in grads.items()}
        bc1 = 1.0 - cfg.beta1 ** t
        bc2 = 1.0 - cfg.beta2 ** t
        for name in sorted(params):
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= cfg.beta1
            m += (1 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1 - cfg.beta2) * g * g
            params[name].data -= cfg.lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)


def step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, step]))


def _single(ex: TrainingExample) -> MultimodalSequence:
    return MultimodalSequence([ImageSlot("input", raster=ex.image),
                               TextSpan(list(ex.caption_ids))])


def _packed(a: TrainingExample, b: TrainingExample) -> MultimodalSequence:
    return MultimodalSequence([
        ImageSlot("input", raster=a.image), TextSpan(list(a.caption_ids)),
        ImageSlot("input", raster=b.image), TextSpan(list(b.caption_ids)),
    ])


def pack_batch(rng: np.random.Generator, pool, cfg: TrainConfig):
    """Draw a batch; with probability pack_probability an item interleaves
    two examples (image, caption, image, caption)."""
    pool = list(pool)
    if not pool:
        raise ValueError("empty example pool")
    batch = []
    for _ in range(cfg.batch_size):
        first = pool[int(rng.integers(len(pool)))]
        if float(rng.random()) < cfg.pack_probability:
            group = getattr(first, "pack_group", None)
            if group is not None:
                mates = [x for x in pool
                         if getattr(x, "pack_group", None) == group and x is not first]
                second = mates[int(rng.integers(len(mates)))] if mates \
                    else pool[int(rng.integers(len(pool)))]
            else:
                second = pool[int(rng.integers(len(pool)))]
            batch.append(_packed(first, second))
        else:
            batch.append(_single(first))
    return batch


def precompute_targets(dataset, frozen: FrozenBackbones) -> dict[str, np.ndarray]:
    """One conditioning matrix per distinct caption, keyed by the caption."""
    cache: dict[str, np.ndarray] = {}
    for ex in dataset:
        key = frozen.vocab.decode(ex.caption_ids)
        if key not in cache:
            cache[key] = frozen.target_enc.encode(ex.caption_ids)
    return cache


def train_step(frozen: FrozenBackbones, aset: AdapterSet, batch,
               adam: AdamState, cfg: TrainConfig,
               targets: dict | None = None) -> LossBreakdown:
    """One Adam update on the adapter parameters; returns pre-update losses."""
    params = aset.named_params()
    for p in params.values():
        p.zero_grad()
    breakdown, total = ls.total_loss(
        frozen, aset, batch, targets=targets,
        use_caption=cfg.use_caption, use_img_pred=cfg.use_img_pred,
        use_gen=cfg.use_gen, use_retrieval=cfg.use_retrieval,
        gen_reduction=cfg.gen_reduction)
    tg.backward(total)
    adam.update(params, cfg)
    return breakdown


# ---------------------------------------------------------------------------
# run state persistence
# ---------------------------------------------------------------------------

def _cfg_meta(bcfg: BackboneConfig, acfg: AdapterConfig, tcfg: TrainConfig):
    a = dataclasses.asdict(acfg)
    a["variant"] = acfg.variant.value
    return {"backbone": dataclasses.asdict(bcfg), "adapters": a,
            "train": dataclasses.asdict(tcfg)}


def save_state(path, bcfg: BackboneConfig, acfg: AdapterConfig,
               tcfg: TrainConfig, aset: AdapterSet, adam: AdamState,
               step: int) -> None:
    arrays = {}
    for name, p in aset.named_params().items():
        arrays[f"param.{name}"] = p.value()
        arrays[f"adam.m.{name}"] = adam.m[name]
        arrays[f"adam.v.{name}"] = adam.v[name]
    meta = _cfg_meta(bcfg, acfg, tcfg)
    meta["step"] = step
    meta["kind"] = "train-state"
    ckpt.save_container(path, arrays, meta)


def load_state(path):
    """Rebuild (frozen, aset, adam, cfgs, step) from a checkpoint file."""
    arrays, meta = ckpt.load_container(path)
    if meta.get("kind") != "train-state":
        raise ValueError(f"{path}: not a training checkpoint")
    bcfg = BackboneConfig(**meta["backbone"])
    acfg = AdapterConfig(**meta["adapters"])
    tcfg = TrainConfig(**meta["train"])
    frozen = build_frozen(bcfg, img_token_count=acfg.img_tokens)
    aset = AdapterSet.build(bcfg, acfg)
    adam = AdamState(aset.named_params())
    for name, p in aset.named_params().items():
        key = f"param.{name}"
        if key not in arrays:
            raise ValueError(f"{path}: missing array {key!r}")
        if arrays[key].shape != p.shape:
            raise ValueError(f"{path}: shape mismatch for {key!r}")
        p.data[:] = arrays[key].reshape(-1)
        adam.m[name][:] = arrays[f"adam.m.{name}"].reshape(-1)
        adam.v[name][:] = arrays[f"adam.v.{name}"].reshape(-1)
    adam.step = int(meta["step"])
    return frozen, aset, adam, bcfg, acfg, tcfg, int(meta["step"])


@dataclass
class RunResult:
    frozen: FrozenBackbones
    aset: AdapterSet
    adam: AdamState
    history: list        # rows: (step, l_c, l_p, l_g, l_r, total)
    final_ckpt: str | None


def run_training(bcfg: BackboneConfig, acfg: AdapterConfig, tcfg: TrainConfig,
                 dataset, outdir=None, targets: dict | None = None,
                 resume_from: str | None = None,
                 progress=None) -> RunResult:
    """Train adapters from scratch or resume; optionally write checkpoints."""
    if resume_from is not None:
        # model shape comes from the checkpoint; the caller's tcfg controls
        # the schedule so a resumed run can extend the step budget
        frozen, aset, adam, bcfg, acfg, _, start = load_state(resume_from)
    else:
        frozen = build_frozen(bcfg, img_token_count=acfg.img_tokens)
        aset = AdapterSet.build(bcfg, acfg)
        adam = AdamState(aset.named_params())
        start = 0
    if targets is None and tcfg.use_gen:
        targets = precompute_targets(dataset, frozen)

    history = []
    final_path = None
    for step in range(start, tcfg.steps):
        rng = step_rng(tcfg.seed, step)
        batch = pack_batch(rng, dataset, tcfg)
        b = train_step(frozen, aset, batch, adam, tcfg, targets=targets)
        history.append((step, b.l_c, b.l_p, b.l_g, b.l_r, b.total))
        if progress is not None:
            progress(step, b)
        if outdir is not None and tcfg.ckpt_interval and \
                (step + 1) % tcfg.ckpt_interval == 0 and (step + 1) < tcfg.steps:
            save_state(f"{outdir}/step_{step + 1:06d}.ckpt",
                       bcfg, acfg, tcfg, aset, adam, step + 1)
    if outdir is not None:
        final_path = f"{outdir}/final.ckpt"
        save_state(final_path, bcfg, acfg, tcfg, aset, adam, tcfg.steps)
    return RunResult(frozen, aset, adam, history, final_path)
