import numpy as np
import pytest

from pathlm import autodiff as ad
from pathlm import tree as pt
from pathlm.model import batch_loss, init_params


def finite_diff_grads(params, loss_fn, eps=1e-5):
    """Central finite differences of loss_fn(params) for every entry."""
    grads = pt.zeros_like(params)
    for name, arr in params.items():
        flat = arr.ravel()
        gflat = grads[name].ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = loss_fn(params)
            flat[i] = orig - eps
            lo = loss_fn(params)
            flat[i] = orig
            gflat[i] = (hi - lo) / (2 * eps)
    return grads


def test_add_mul_broadcast_grads():
    a = ad.leaf(np.arange(6.0).reshape(2, 3), requires_grad=True)
    b = ad.leaf(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    out = ad.mul(ad.add(a, b), b)
    ad.backward(out, seed=1.0)
    # d/da (a+b)*b = b broadcast; d/db = (a+2b) summed over rows
    assert np.allclose(a.grad, np.broadcast_to(b.data, (2, 3)))
    assert np.allclose(b.grad, (a.data + 2 * b.data).sum(axis=0))


def test_matmul_batched_grad_shapes():
    x = ad.leaf(np.random.default_rng(0).normal(size=(4, 5, 3)), requires_grad=True)
    w = ad.leaf(np.random.default_rng(1).normal(size=(3, 2)), requires_grad=True)
    out = ad.matmul(x, w)
    ad.backward(out)
    assert x.grad.shape == (4, 5, 3)
    assert w.grad.shape == (3, 2)
    # weight grad sums over the batch
    g = np.ones((4, 5, 2))
    expect = np.einsum("btd,bto->do", x.data, g)
    assert np.allclose(w.grad, expect)


def test_gather_scatter_add():
    table = ad.leaf(np.eye(4), requires_grad=True)
    out = ad.gather(table, np.array([0, 2, 2]))
    ad.backward(out)
    # row 0 hit once, row 2 twice, rows 1 and 3 never
    expect = np.array([1.0, 0.0, 2.0, 0.0])[:, None] * np.ones((1, 4))
    assert np.allclose(table.grad, expect)


def test_cross_entropy_matches_manual():
    rng = np.random.default_rng(2)
    logits = rng.normal(size=(5, 7))
    targets = rng.integers(0, 7, size=5)
    mask = np.array([True, False, True, True, False])
    node = ad.cross_entropy(ad.leaf(logits, requires_grad=True), targets, mask)
    p = np.exp(logits) / np.exp(logits).sum(-1, keepdims=True)
    manual = -np.log(p[np.arange(5), targets])[mask].mean()
    assert np.isclose(node.item(), manual)


def test_cross_entropy_rejects_empty_mask():
    logits = ad.leaf(np.zeros((3, 4)), requires_grad=True)
    with pytest.raises(ValueError):
        ad.cross_entropy(logits, np.zeros(3, dtype=int), np.zeros(3, dtype=bool))


def test_backward_detached_graph_raises():
    a = ad.leaf(np.ones(3))  # requires_grad False
    out = ad.scale(a, 2.0)
    with pytest.raises(ad.DetachedGraphError):
        ad.backward(out)


def test_param_grads_zero_for_unused(tiny_cfg):
    params = init_params(tiny_cfg)
    ptensors = ad.wrap_params(params)
    tokens = np.array([[1, 2, 3, 4, 5, 6]])
    loss = batch_loss(tokens, ptensors, tiny_cfg, prefix_len=2)
    grads = ad.param_grads(loss, ptensors)
    assert pt.congruent(grads, params)
    # embedding rows for tokens never seen get zero gradient
    unused = [v for v in range(tiny_cfg.vocab_size) if v not in tokens]
    assert unused
    assert np.allclose(grads["tok_emb"][unused], 0.0)


def test_loss_linearity_of_grads(tiny_cfg, tiny_params):
    tokens = np.array([[3, 1, 4, 1, 5, 9, 2, 6]])

    def grads_scaled(c):
        ptensors = ad.wrap_params(tiny_params)
        loss = ad.scale(batch_loss(tokens, ptensors, tiny_cfg, prefix_len=2), c)
        return ad.param_grads(loss, ptensors)

    g1, g2 = grads_scaled(1.0), grads_scaled(2.0)
    for k in g1:
        assert np.allclose(2.0 * g1[k], g2[k])


def test_gradcheck_full_model(tiny_cfg, tiny_params):
    # the central oracle for the whole autodiff stack
    assert pt.n_params(tiny_params) <= 5000
    tokens = np.array([[7, 3, 0, 11, 5, 2, 8, 1]])

    def loss_value(params):
        ptensors = ad.wrap_params(params)
        return batch_loss(tokens, ptensors, tiny_cfg, prefix_len=2).item()

    ptensors = ad.wrap_params(tiny_params)
    analytic = ad.param_grads(batch_loss(tokens, ptensors, tiny_cfg, prefix_len=2), ptensors)
    numeric = finite_diff_grads(pt.copy(tiny_params), loss_value, eps=1e-5)

    scale = max(pt.norm(analytic), 1e-8)
    for k in analytic:
        err = np.abs(analytic[k] - numeric[k])
        denom = np.maximum(np.abs(numeric[k]), 1e-6 * scale)
        assert (err / denom).max() < 1e-4, f"gradcheck failed for {k}"


def test_determinism_same_inputs(tiny_cfg, tiny_params):
    tokens = np.array([[1, 2, 3, 4, 5, 6, 7, 8]])
    ptensors = ad.wrap_params(tiny_params)
    l1 = batch_loss(tokens, ptensors, tiny_cfg, prefix_len=2)
    ptensors2 = ad.wrap_params(tiny_params)
    l2 = batch_loss(tokens, ptensors2, tiny_cfg, prefix_len=2)
    assert l1.item() == l2.item()
    g1 = ad.param_grads(l1, ptensors)
    g2 = ad.param_grads(l2, ptensors2)
    assert pt.equal(g1, g2)
