import numpy as np
import pytest

from mmadapt import tensorgrad as tg
from mmadapt.tensorgrad import Tensor


def randt(rng, shape, requires_grad=True, std=1.0):
    return Tensor(rng.normal(0, std, size=shape), requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# forward contracts
# ---------------------------------------------------------------------------

def test_matmul_shape():
    a = Tensor(np.ones((2, 3)))
    b = Tensor(np.ones((3, 1)))
    assert tg.matmul(a, b).shape == (2, 1)


def test_matmul_shape_mismatch_message():
    with pytest.raises(ValueError, match=r"matmul.*\(2, 3\).*\(2, 1\)"):
        tg.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 1))))


def test_unknown_kind():
    with pytest.raises(ValueError, match="unknown primitive kind"):
        tg.primitive("convolve", Tensor([1.0]))


def test_primitive_dispatch_matches_wrapper(rng):
    a = randt(rng, (3, 4), requires_grad=False)
    b = randt(rng, (4, 2), requires_grad=False)
    via_kind = tg.primitive("matmul", a, b)
    assert np.array_equal(via_kind.data, tg.matmul(a, b).data)


def test_softmax_uniform():
    out = tg.softmax(Tensor([0.0, 0.0, 0.0, 0.0]), axis=0)
    assert np.allclose(out.value(), [0.25, 0.25, 0.25, 0.25])


def test_softmax_rows_sum_to_one(rng):
    for _ in range(20):
        x = randt(rng, (5, 7), requires_grad=False, std=3.0)
        s = tg.softmax(x, axis=1).value()
        assert np.all(s >= 0) and np.all(s <= 1)
        assert np.allclose(s.sum(axis=1), 1.0, atol=1e-9)


def test_cosine_identity(rng):
    for _ in range(10):
        v = randt(rng, (6,), requires_grad=False)
        assert tg.cosine(v, v).item() == pytest.approx(1.0, abs=1e-12)


def test_l2_normalize_unit_norm(rng):
    for _ in range(20):
        x = randt(rng, (4, 5), requires_grad=False, std=2.0)
        y = tg.l2_normalize(x, axis=1).value()
        assert np.allclose(np.linalg.norm(y, axis=1), 1.0, atol=1e-9)


def test_l2_normalize_zero_guard():
    y = tg.l2_normalize(Tensor([0.0, 0.0, 0.0]), axis=0)
    assert np.all(np.isfinite(y.value()))


def test_concat_and_reshape_roundtrip(rng):
    a = randt(rng, (2, 3), requires_grad=False)
    b = randt(rng, (1, 3), requires_grad=False)
    cat = tg.concat([a, b], axis=0)
    assert cat.shape == (3, 3)
    back = tg.reshape(cat, (9,))
    assert np.array_equal(back.data, cat.data)


def test_embedding_lookup_gather(rng):
    table = randt(rng, (5, 4), requires_grad=False)
    out = tg.embedding(table, [3, 0, 3])
    assert np.array_equal(out.value(), table.value()[[3, 0, 3]])
    with pytest.raises(ValueError, match="out of range"):
        tg.embedding(table, [5])


# ---------------------------------------------------------------------------
# backward basics
# ---------------------------------------------------------------------------

def test_backward_sum_ones():
    x = Tensor([1.0, -2.0, 3.0], requires_grad=True)
    tg.tsum(x).backward()
    assert np.array_equal(x.grad, [1.0, 1.0, 1.0])


def test_backward_mse_quadratic():
    # mse(x, 0) with x=[2] is 4; d/dx = 2*x = [4]
    x = Tensor([2.0], requires_grad=True)
    loss = tg.mse(x, Tensor([0.0]))
    assert loss.item() == pytest.approx(4.0)
    loss.backward()
    assert np.allclose(x.grad, [4.0])


def test_backward_non_scalar_error():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = tg.smul(x, 2.0)
    with pytest.raises(ValueError, match="scalar"):
        tg.backward(y)


def test_backward_empty_tape_error():
    x = Tensor([1.0], requires_grad=True)
    with pytest.raises(ValueError, match="empty tape"):
        tg.backward(x)


def test_backward_twice_error():
    x = Tensor([1.0, 2.0], requires_grad=True)
    loss = tg.tsum(x)
    loss.backward()
    with pytest.raises(RuntimeError, match="already called"):
        loss.backward()


def test_backward_additive(rng):
    x = randt(rng, (4,))
    w = randt(rng, (4,))

    def l1():
        return tg.tsum(tg.mul(x, w))

    def l2():
        return tg.mse(x, w)

    x.zero_grad(); w.zero_grad()
    tg.backward(tg.add(l1(), l2()))
    joint = (x.grad.copy(), w.grad.copy())

    x.zero_grad(); w.zero_grad()
    tg.backward(l1())
    g1 = (x.grad.copy(), w.grad.copy())
    x.zero_grad(); w.zero_grad()
    tg.backward(l2())
    g2 = (x.grad.copy(), w.grad.copy())

    assert np.allclose(joint[0], g1[0] + g2[0], atol=1e-10)
    assert np.allclose(joint[1], g1[1] + g2[1], atol=1e-10)


def test_frozen_inputs_get_no_grad(rng):
    frozen = randt(rng, (3, 3), requires_grad=False)
    live = randt(rng, (3, 3))
    tg.backward(tg.tsum(tg.matmul(frozen, live)))
    assert frozen.grad is None
    assert live.grad is not None


# ---------------------------------------------------------------------------
# gradient checks (finite-difference oracle)
# ---------------------------------------------------------------------------

def test_check_gradients_matmul(rng):
    a = randt(rng, (3, 4))
    b = randt(rng, (4, 2))
    err = tg.check_gradients(lambda x, y: tg.tsum(tg.matmul(x, y)), [a, b])
    assert err <= 1e-6


def test_check_gradients_constant_param(rng):
    a = randt(rng, (3,))
    unused = randt(rng, (2,))

    def f(x, u):
        return tg.tsum(x)

    tg.zero_grads([a, unused])
    tg.backward(f(a, unused))
    assert unused.grad is None  # analytic grad exactly zero / absent


def test_check_gradients_nondeterministic_error(rng):
    state = {"n": 0.0}

    def f(x):
        state["n"] += 1.0
        return tg.tsum(tg.smul(x, state["n"]))

    with pytest.raises(ValueError, match="not deterministic"):
        tg.check_gradients(f, [randt(rng, (2,))])


def test_random_network_matches_finite_differences(rng):
    # 5-parameter network: y = cos-sim(gelu(W x + b), t) * s, loss = mse-ish
    w = randt(rng, (3, 3))
    b = randt(rng, (3,))
    x = randt(rng, (1, 3))
    t = randt(rng, (3,))
    s = randt(rng, (1,))

    def f(w, b, x, t, s):
        h = tg.gelu(tg.add(tg.matmul(x, w), b))
        c = tg.cosine(tg.reshape(h, (3,)), t)
        return tg.mul(c, tg.reshape(s, ()))

    err = tg.check_gradients(f, [w, b, x, t, s])
    assert err <= 1e-4


def _cases(rng):
    """Randomized gradient-check cases spanning every primitive kind."""
    cases = []
    for i in range(6):
        n, m, p = rng.integers(2, 5, size=3)
        cases.append((lambda a, b: tg.tsum(tg.matmul(a, b)),
                      [randt(rng, (n, m)), randt(rng, (m, p))]))
        cases.append((lambda a, b: tg.tsum(tg.add(a, b)),
                      [randt(rng, (n, m)), randt(rng, (m,))]))
        cases.append((lambda a, b: tg.tsum(tg.sub(a, b)),
                      [randt(rng, (n, m)), randt(rng, (n, m))]))
        cases.append((lambda a, b: tg.tsum(tg.mul(a, b)),
                      [randt(rng, (n, m)), randt(rng, (n, m))]))
        cases.append((lambda a: tg.tsum(tg.smul(a, 1.7)), [randt(rng, (n, m))]))
        cases.append((lambda a, b: tg.tsum(tg.concat([a, b], axis=1)),
                      [randt(rng, (n, m)), randt(rng, (n, 2))]))
        cases.append((lambda a: tg.tsum(tg.reshape(a, (a.size,))), [randt(rng, (n, m))]))
        cases.append((lambda a: tg.tsum(tg.transpose(a)), [randt(rng, (n, m))]))
        cases.append((lambda a: tg.mean(tg.embedding(a, [0, 1, 1])),
                      [randt(rng, (n + 2, m))]))
        cases.append((lambda a: tg.tsum(tg.mul(tg.softmax(a, axis=1), a)),
                      [randt(rng, (n, m))]))
        cases.append((lambda a: tg.mean(tg.mul(tg.log_softmax(a, axis=1), a)),
                      [randt(rng, (n, m))]))
        cases.append((lambda a: tg.tsum(tg.mul(tg.layer_norm(a), a)),
                      [randt(rng, (n, m))]))
        cases.append((lambda a: tg.tsum(tg.gelu(a)), [randt(rng, (n, m))]))
        # keep leaky-relu inputs away from the kink at 0
        lr_in = rng.normal(0, 1, size=(n, m))
        lr_in = np.where(np.abs(lr_in) < 1e-2, 0.5, lr_in)
        cases.append((lambda a: tg.tsum(tg.leaky_relu(a, 0.1)),
                      [Tensor(lr_in, requires_grad=True)]))
        cases.append((lambda a: tg.mean(a), [randt(rng, (n, m))]))
        cases.append((lambda a, b: tg.mse(a, b),
                      [randt(rng, (n, m)), randt(rng, (n, m))]))
        ids = rng.integers(0, m, size=n)
        cases.append((lambda a, ids=ids: tg.nll_from_log_softmax(
            tg.log_softmax(a, axis=1), ids), [randt(rng, (n, m))]))
        cases.append((lambda a: tg.tsum(tg.mul(tg.l2_normalize(a, axis=1), a)),
                      [randt(rng, (n, m))]))
        cases.append((lambda a, b: tg.cosine(a, b),
                      [randt(rng, (m,)), randt(rng, (m,))]))
    return cases


def test_every_primitive_gradient_property():
    rng = np.random.default_rng(7)
    cases = _cases(rng)
    assert len(cases) >= 100
    for f, params in cases:
        assert tg.check_gradients(f, params) <= 1e-4


def test_mean_scalars(rng):
    parts = [tg.tsum(randt(rng, (2,))) for _ in range(3)]
    m = tg.mean_scalars(parts)
    expected = np.mean([p.item() for p in parts])
    assert m.item() == pytest.approx(expected, abs=1e-12)
