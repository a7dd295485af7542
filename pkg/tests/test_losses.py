import numpy as np
import pytest

from mmadapt import adapters as ad
from mmadapt import backbones as bb
from mmadapt import losses as ls
from mmadapt import tensorgrad as tg
from mmadapt.sequences import ImageSlot, MultimodalSequence, TextSpan
from mmadapt.tensorgrad import Tensor

BCFG = bb.BackboneConfig(seed=3)
ACFG = ad.AdapterConfig(seed=5)


@pytest.fixture(scope="module")
def frozen():
    return bb.build_frozen(BCFG, img_token_count=ACFG.img_tokens)


@pytest.fixture(scope="module")
def aset():
    return ad.AdapterSet.build(BCFG, ACFG)


def make_example(rng, frozen, n_tokens=4):
    raster = rng.random((BCFG.H, BCFG.W, BCFG.C))
    ids = rng.integers(3, frozen.vocab.base_size, size=n_tokens).tolist()
    return ls.TrainingExample(raster, ids)


class StubLM:
    """Returns fixed logits regardless of input; hidden is zeros."""

    def __init__(self, width, logits_fn):
        self.width = width
        self.logits_fn = logits_fn

    def forward(self, tokens, prefix_slots, img_embeds):
        total = len(tokens) + sum(b.shape[0] for b in (prefix_slots or {}).values())
        logits = self.logits_fn(total)
        return Tensor(np.zeros((total, img_embeds.shape[1]))), Tensor(logits)


def with_stub_lm(frozen, logits_fn):
    import copy
    out = copy.copy(frozen)
    out.lm = StubLM(frozen.vocab.total_size, logits_fn)
    return out


# ---------------------------------------------------------------------------
# caption loss
# ---------------------------------------------------------------------------

def test_caption_loss_uniform_logits(frozen, aset):
    total = frozen.vocab.total_size
    stub = with_stub_lm(frozen, lambda t: np.zeros((t, total)))
    ex = make_example(np.random.default_rng(0), frozen)
    loss = ls.caption_loss(stub, aset, ex)
    assert loss.item() == pytest.approx(np.log(total), abs=1e-10)


def test_caption_loss_perfect_prediction(frozen, aset):
    # probability ~1 on each true token -> loss ~0
    ex = make_example(np.random.default_rng(1), frozen)
    k = aset.config.prefix_len
    total = frozen.vocab.total_size

    def logits_fn(t):
        out = np.zeros((t, total))
        for i, tok in enumerate(ex.caption_ids):
            out[k - 1 + i, tok] = 60.0
        return out

    loss = ls.caption_loss(with_stub_lm(frozen, logits_fn), aset, ex)
    assert loss.item() == pytest.approx(0.0, abs=1e-10)


def test_caption_loss_matches_naive_nll_oracle(frozen, aset):
    rng = np.random.default_rng(2)
    ex = make_example(rng, frozen, n_tokens=4)
    loss = ls.caption_loss(frozen, aset, ex).item()

    # independent recomputation: raw forward, numpy log-softmax + gather
    k = aset.config.prefix_len
    v = frozen.visual.encode(ex.image)
    prefix = ad.map_image_to_prefix(v, aset.prefix)
    tokens = ex.caption_ids + frozen.vocab.img_ids
    _, logits = frozen.lm.forward(tokens, {0: prefix}, aset.img_embeds)
    lg = logits.value()
    nll = []
    for i, tok in enumerate(ex.caption_ids):
        row = lg[k - 1 + i]
        row = row - row.max()
        logp = row - np.log(np.exp(row).sum())
        nll.append(-logp[tok])
    assert loss == pytest.approx(np.mean(nll), abs=1e-10)


def test_caption_loss_empty_caption(frozen, aset):
    with pytest.raises(ValueError, match="empty caption"):
        ls.caption_loss(frozen, aset, ls.TrainingExample(np.zeros((8, 8, 3)), []))


def test_caption_rejects_img_ids(frozen, aset):
    with pytest.raises(ValueError, match="image-token ids"):
        ls.caption_loss(frozen, aset,
                        ls.TrainingExample(np.zeros((8, 8, 3)), [64]))


# ---------------------------------------------------------------------------
# image-token prediction loss
# ---------------------------------------------------------------------------

def test_img_pred_loss_uniform(frozen, aset):
    total = frozen.vocab.total_size
    stub = with_stub_lm(frozen, lambda t: np.zeros((t, total)))
    ex = make_example(np.random.default_rng(3), frozen)
    loss = ls.img_pred_loss(stub, aset, ex)
    assert loss.item() == pytest.approx(np.log(total), abs=1e-10)


def test_img_pred_loss_certain(frozen, aset):
    ex = make_example(np.random.default_rng(4), frozen)
    total = frozen.vocab.total_size
    first_img = frozen.vocab.img_id(1)
    row = len(ex.caption_ids) - 1

    def logits_fn(t):
        out = np.zeros((t, total))
        out[row, first_img] = 60.0
        return out

    loss = ls.img_pred_loss(with_stub_lm(frozen, logits_fn), aset, ex)
    assert loss.item() == pytest.approx(0.0, abs=1e-10)


def test_img_pred_loss_matches_naive_oracle(frozen, aset):
    ex = make_example(np.random.default_rng(5), frozen)
    loss = ls.img_pred_loss(frozen, aset, ex).item()

    tokens = ex.caption_ids + frozen.vocab.img_ids
    _, logits = frozen.lm.forward(tokens, {}, aset.img_embeds)
    row = logits.value()[len(ex.caption_ids) - 1]
    row = row - row.max()
    logp = row - np.log(np.exp(row).sum())
    assert loss == pytest.approx(-logp[frozen.vocab.img_id(1)], abs=1e-10)


def test_img_pred_loss_grads_only_into_adapters(frozen, aset):
    aset.zero_grads()
    ex = make_example(np.random.default_rng(6), frozen)
    tg.backward(ls.img_pred_loss(frozen, aset, ex))
    assert aset.img_embeds.grad is not None
    for name, p in frozen.lm.named_params().items():
        assert p.grad is None, name


# ---------------------------------------------------------------------------
# distillation loss
# ---------------------------------------------------------------------------

class ConstMapper:
    def __init__(self, out):
        self.out = out

    def forward(self, img_hidden):
        return Tensor(self.out)


def test_gen_loss_zero_when_output_equals_target(frozen, aset):
    import copy
    ex = make_example(np.random.default_rng(7), frozen)
    target = frozen.target_enc.encode(ex.caption_ids)
    a2 = copy.copy(aset)
    a2.mapper = ConstMapper(target)
    assert ls.gen_loss(frozen, a2, ex).item() == pytest.approx(0.0, abs=1e-12)


def test_gen_loss_ones_vs_zeros(frozen, aset):
    import copy
    ex = make_example(np.random.default_rng(8), frozen)
    key = frozen.vocab.decode(ex.caption_ids)
    a2 = copy.copy(aset)
    a2.mapper = ConstMapper(np.ones((BCFG.L, BCFG.c)))
    targets = {key: np.zeros((BCFG.L, BCFG.c))}
    assert ls.gen_loss(frozen, a2, ex, targets=targets).item() == pytest.approx(1.0)


def test_gen_loss_matches_naive_mse_oracle(frozen, aset):
    ex = make_example(np.random.default_rng(9), frozen)
    loss = ls.gen_loss(frozen, aset, ex).item()

    tokens = ex.caption_ids + frozen.vocab.img_ids
    hidden, _ = frozen.lm.forward(tokens, {}, aset.img_embeds)
    rows = hidden.value()[len(ex.caption_ids):]
    out = ad.mapper_forward(aset.mapper, rows).value()
    tgt = frozen.target_enc.encode(ex.caption_ids)
    naive = float(np.mean((out - tgt) ** 2))
    assert loss == pytest.approx(naive, abs=1e-12)


def test_gen_loss_sum_reduction(frozen, aset):
    ex = make_example(np.random.default_rng(10), frozen)
    m = ls.gen_loss(frozen, aset, ex, reduction="mean").item()
    s = ls.gen_loss(frozen, aset, ex, reduction="sum").item()
    assert s == pytest.approx(m * BCFG.L * BCFG.c, rel=1e-12)


def test_gen_loss_missing_cache_entry(frozen, aset):
    ex = make_example(np.random.default_rng(11), frozen)
    with pytest.raises(KeyError, match="no cached conditioning target"):
        ls.gen_loss(frozen, aset, ex, targets={})


# ---------------------------------------------------------------------------
# retrieval loss
# ---------------------------------------------------------------------------

def test_retrieval_loss_single_example_zero(frozen, aset):
    ex = make_example(np.random.default_rng(12), frozen)
    assert ls.retrieval_loss(frozen, aset, [ex]).item() == pytest.approx(0.0, abs=1e-12)


def test_infonce_closed_form_n2():
    # matched pairs identical unit vectors, cross pairs orthogonal, tau=1
    text = Tensor(np.eye(2), requires_grad=True)
    img = Tensor(np.eye(2), requires_grad=True)
    loss = ls.infonce(text, img, temperature=1.0)
    expected = 2 * np.log(1 + np.exp(-1.0))
    assert loss.item() == pytest.approx(expected, abs=1e-12)
    assert loss.item() == pytest.approx(0.6265, abs=2e-4)


def test_retrieval_loss_matches_naive_double_loop(frozen, aset):
    rng = np.random.default_rng(13)
    batch = [make_example(rng, frozen) for _ in range(5)]
    loss = ls.retrieval_loss(frozen, aset, batch).item()

    # independent oracle: recompute embeddings then a plain double loop
    text, img = [], []
    for ex in batch:
        tokens = ex.caption_ids + frozen.vocab.img_ids
        hidden, _ = frozen.lm.forward(tokens, {}, aset.img_embeds)
        h = hidden.value()[len(ex.caption_ids)]
        text.append(h @ aset.head.text_proj.value())
        img.append(frozen.visual.encode(ex.image) @ aset.head.image_proj.value())
    text = [t / np.linalg.norm(t) for t in text]
    img = [v / np.linalg.norm(v) for v in img]
    tau = aset.head.temperature
    n = len(batch)
    total = 0.0
    for i in range(n):
        denom_t2i = sum(np.exp(text[i] @ img[j] / tau) for j in range(n))
        denom_i2t = sum(np.exp(text[j] @ img[i] / tau) for j in range(n))
        total += -np.log(np.exp(text[i] @ img[i] / tau) / denom_t2i)
        total += -np.log(np.exp(text[i] @ img[i] / tau) / denom_i2t)
    assert loss == pytest.approx(total / n, abs=1e-10)


def test_retrieval_loss_batch_permutation_invariant(frozen, aset):
    rng = np.random.default_rng(14)
    batch = [make_example(rng, frozen) for _ in range(4)]
    a = ls.retrieval_loss(frozen, aset, batch).item()
    b = ls.retrieval_loss(frozen, aset, batch[::-1]).item()
    assert a == pytest.approx(b, abs=1e-10)


def test_infonce_scaling_invariance(rng):
    text = Tensor(rng.normal(size=(4, 6)))
    img = Tensor(rng.normal(size=(4, 6)))
    a = ls.infonce(text, img, 0.5).item()
    b = ls.infonce(tg.smul(text, 37.0), tg.smul(img, 37.0), 0.5).item()
    assert a == pytest.approx(b, abs=1e-9)


def test_infonce_degenerate_norm_error(rng):
    text = Tensor(np.zeros((2, 4)))
    img = Tensor(rng.normal(size=(2, 4)))
    with pytest.raises(ValueError, match="degenerate"):
        ls.infonce(text, img, 1.0)


# ---------------------------------------------------------------------------
# packed items
# ---------------------------------------------------------------------------

def packed_item(rng, frozen):
    a = make_example(rng, frozen, 3)
    b = make_example(rng, frozen, 4)
    return MultimodalSequence([
        ImageSlot("input", raster=a.image), TextSpan(a.caption_ids),
        ImageSlot("input", raster=b.image), TextSpan(b.caption_ids),
    ])


def test_packed_item_losses_run(frozen, aset):
    item = packed_item(np.random.default_rng(15), frozen)
    for loss in (ls.caption_loss(frozen, aset, item),
                 ls.img_pred_loss(frozen, aset, item),
                 ls.gen_loss(frozen, aset, item)):
        assert np.isfinite(loss.item())
        assert loss.item() >= 0


def test_packed_retrieval_uses_both_segments(frozen, aset):
    item = packed_item(np.random.default_rng(16), frozen)
    # a packed item contributes two contrastive pairs -> nonzero loss
    assert ls.retrieval_loss(frozen, aset, [item]).item() > 0


# ---------------------------------------------------------------------------
# total loss
# ---------------------------------------------------------------------------

def test_total_loss_bookkeeping(frozen, aset):
    rng = np.random.default_rng(17)
    batch = [make_example(rng, frozen) for _ in range(3)]
    breakdown, total = ls.total_loss(frozen, aset, batch)
    s = breakdown.l_c + breakdown.l_p + breakdown.l_g + breakdown.l_r
    assert breakdown.total == pytest.approx(s, abs=1e-12)
    assert total.item() == pytest.approx(s, abs=1e-10)


def test_total_loss_all_components_nonnegative(frozen, aset):
    rng = np.random.default_rng(18)
    batch = [make_example(rng, frozen) for _ in range(2)]
    breakdown, _ = ls.total_loss(frozen, aset, batch)
    assert breakdown.l_c >= 0 and breakdown.l_p >= 0
    assert breakdown.l_g >= 0 and breakdown.l_r >= 0


def test_total_loss_component_flags(frozen, aset):
    rng = np.random.default_rng(19)
    batch = [make_example(rng, frozen) for _ in range(2)]
    breakdown, total = ls.total_loss(frozen, aset, batch, use_retrieval=False)
    assert breakdown.l_r == 0.0
    assert total.item() == pytest.approx(
        breakdown.l_c + breakdown.l_p + breakdown.l_g, abs=1e-10)


def test_total_loss_frozen_grads_absent(frozen, aset):
    rng = np.random.default_rng(20)
    batch = [make_example(rng, frozen) for _ in range(2)]
    aset.zero_grads()
    _, total = ls.total_loss(frozen, aset, batch)
    tg.backward(total)
    for name, p in frozen.lm.named_params().items():
        assert p.grad is None, name
    assert all(p.grad is not None for p in aset.named_params().values())


def test_total_loss_finite_difference():
    small_b = bb.BackboneConfig(V=32, e=6, d=4, L=3, c=4, n_layer=1, n_head=2,
                                H=4, W=4, seed=1)
    small_a = ad.AdapterConfig(prefix_len=2, img_tokens=2, proj_dim=4,
                               mapper_dim=4, seed=1)
    frozen = bb.build_frozen(small_b, img_token_count=2)
    aset = ad.AdapterSet.build(small_b, small_a)
    rng = np.random.default_rng(21)
    batch = [ls.TrainingExample(rng.random((4, 4, 3)),
                                rng.integers(3, 32, size=3).tolist())
             for _ in range(2)]
    params = list(aset.named_params().values())

    def f(*ps):
        _, total = ls.total_loss(frozen, aset, batch)
        return total

    assert tg.check_gradients(f, params) <= 1e-4
