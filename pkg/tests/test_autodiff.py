import math

import numpy as np
import pytest

from gradcheck import check_op, rel_err
from peftqa import autodiff as ad
from peftqa.autodiff import ContractError, DimensionError, Tensor
from peftqa.model import Batch, ModelConfig, attach_adapters, build_model, qa_loss

RNG = np.random.default_rng(1234)
SHAPES = [(3, 4), (2, 3, 5), (1, 7)]


def weighted_sum(out):
    """Contract an op output with fixed random weights so every element matters."""
    w = np.random.default_rng(99).normal(size=out.shape)
    return ad.sum_(ad.mul(out, w))


@pytest.mark.parametrize("shape", SHAPES)
@pytest.mark.parametrize("op", [ad.add, ad.sub, ad.mul, ad.div])
def test_binary_elementwise_gradients(op, shape):
    a = RNG.normal(size=shape)
    b = RNG.uniform(0.5, 2.0, size=shape)
    assert check_op(lambda x, y: weighted_sum(op(x, y)), [a, b]) < 1e-6


def test_broadcast_gradients_reduce_to_input_shape():
    a = RNG.normal(size=(4, 3))
    b = RNG.normal(size=(3,))
    assert check_op(lambda x, y: weighted_sum(ad.mul(ad.add(x, y), y)), [a, b]) < 1e-6


@pytest.mark.parametrize("shape", SHAPES)
def test_gelu_gradient(shape):
    assert check_op(lambda x: weighted_sum(ad.gelu(x)), [RNG.normal(size=shape) * 2]) < 1e-6


@pytest.mark.parametrize("shapes", [((5, 7), (7, 3)), ((2, 4, 6), (6, 3)), ((2, 3, 4), (2, 4, 5))])
def test_matmul_gradient(shapes):
    a, b = (RNG.normal(size=s) for s in shapes)
    assert check_op(lambda x, y: weighted_sum(ad.matmul(x, y)), [a, b], eps=1e-3) < 1e-3


def test_matmul_values_and_shape_error():
    eye = Tensor([[1.0, 0.0], [0.0, 1.0]])
    np.testing.assert_array_equal(ad.matmul(eye, Tensor([[3.0], [4.0]])).data, [[3.0], [4.0]])
    np.testing.assert_array_equal(ad.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data, [[11.0]])
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


@pytest.mark.parametrize("shape", SHAPES)
def test_softmax_gradient(shape):
    assert check_op(lambda x: weighted_sum(ad.softmax_rows(x)), [RNG.normal(size=shape)]) < 1e-6


def test_softmax_values():
    np.testing.assert_allclose(ad.softmax_rows(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, atol=1e-7)
    p = ad.softmax_rows(Tensor([1000.0, 0.0, 0.0])).data
    assert np.all(np.isfinite(p))
    np.testing.assert_allclose(p, [1.0, 0.0, 0.0], atol=1e-7)
    rows = ad.softmax_rows(Tensor(RNG.normal(size=(6, 9)) * 10)).data
    np.testing.assert_allclose(rows.sum(axis=-1), 1.0, atol=1e-6)


def test_softmax_mask_is_constant():
    mask = np.array([0.0, -1e9, 0.0])
    assert check_op(lambda x: weighted_sum(ad.softmax_rows(x, mask)), [RNG.normal(size=(2, 3))]) < 1e-6
    assert ad.softmax_rows(Tensor([5.0, 5.0, 5.0]), mask).data[1] == 0.0


@pytest.mark.parametrize("shape", SHAPES)
def test_layer_norm_gradient(shape):
    n = shape[-1]
    args = [RNG.normal(size=shape), RNG.normal(size=n), RNG.normal(size=n)]
    assert check_op(lambda x, g, b: weighted_sum(ad.layer_norm(x, g, b, 1e-5)), args) < 1e-5


def test_layer_norm_values():
    ones, zeros = Tensor(np.ones(4)), Tensor(np.zeros(4))
    np.testing.assert_array_equal(ad.layer_norm(Tensor(np.full((2, 4), 3.0)), ones, zeros).data, 0.0)
    x = np.array([[-1.0, 1.0, -1.0, 1.0]])
    np.testing.assert_allclose(ad.layer_norm(Tensor(x), ones, zeros, 1e-12).data, x, atol=1e-5)
    with pytest.raises(DimensionError):
        ad.layer_norm(Tensor(x), Tensor(np.ones(3)), zeros)


@pytest.mark.parametrize("b,n", [(1, 4), (3, 5), (6, 2)])
def test_cross_entropy_gradient(b, n):
    targets = RNG.integers(0, n, size=b)
    assert check_op(lambda x: ad.cross_entropy_from_logits(x, targets), [RNG.normal(size=(b, n))]) < 1e-6


def test_cross_entropy_values_and_errors():
    assert math.isclose(ad.cross_entropy_from_logits(Tensor(np.zeros((2, 4))), [1, 3]).item(), math.log(4),
                        rel_tol=1e-6)
    peaked = np.array([[50.0, 0.0, 0.0]])
    assert ad.cross_entropy_from_logits(Tensor(peaked), [0]).item() < 1e-6
    with pytest.raises(IndexError):
        ad.cross_entropy_from_logits(Tensor(np.zeros((1, 3))), [3])


@pytest.mark.parametrize("shape", [(4, 3), (7, 2), (2, 6)])
def test_column_norm_gradient(shape):
    assert check_op(lambda x: weighted_sum(ad.column_l2_norms(x)), [RNG.normal(size=shape)]) < 1e-6


def test_column_norms_value():
    x = np.array([[3.0, 0.0], [4.0, 0.0]])
    np.testing.assert_allclose(ad.column_l2_norms(Tensor(x), eps=0.0).data, [5.0, 0.0])
    assert ad.column_l2_norms(Tensor(x)).data[1] == pytest.approx(1e-4, rel=1e-3)


@pytest.mark.parametrize("shape,axes", [((3, 4), None), ((2, 3, 4), (2, 0, 1)), ((2, 5), (1, 0))])
def test_transpose_gradient(shape, axes):
    assert check_op(lambda x: weighted_sum(ad.transpose(x, axes)), [RNG.normal(size=shape)]) < 1e-6


@pytest.mark.parametrize("shape,new", [((3, 4), (12,)), ((2, 3, 4), (6, 4)), ((2, 6), (3, 2, 2))])
def test_reshape_gradient(shape, new):
    assert check_op(lambda x: weighted_sum(ad.reshape(x, new)), [RNG.normal(size=shape)]) < 1e-6


def test_getitem_gradient_basic_and_advanced():
    x = RNG.normal(size=(4, 5))
    assert check_op(lambda t: weighted_sum(t[1:3, ::2]), [x]) < 1e-6
    assert check_op(lambda t: weighted_sum(t[np.array([0, 0, 2])]), [x]) < 1e-6


@pytest.mark.parametrize("shape", SHAPES)
def test_sum_and_mean_gradients(shape):
    x = RNG.normal(size=shape)
    assert check_op(lambda t: weighted_sum(ad.sum_(t, axis=-1)), [x]) < 1e-6
    assert check_op(lambda t: weighted_sum(ad.mean(t, axis=0, keepdims=True)), [x]) < 1e-6


@pytest.mark.parametrize("ids_shape", [(5,), (2, 3), (1, 4)])
def test_embedding_gradient_accumulates_repeated_ids(ids_shape):
    ids = RNG.integers(0, 3, size=ids_shape)
    assert check_op(lambda w: weighted_sum(ad.embedding_lookup(w, ids)), [RNG.normal(size=(3, 4))]) < 1e-6
    with pytest.raises(IndexError):
        ad.embedding_lookup(Tensor(np.zeros((3, 4))), [3])


def test_dropout_modes():
    x = Tensor(np.ones((200, 100)))
    assert ad.dropout(x, 0.3, np.random.default_rng(0), training=False) is x
    out = ad.dropout(x, 0.3, np.random.default_rng(0), training=True).data
    assert out.size >= 10**4
    assert abs(out.mean() - 1.0) < 0.02
    assert set(np.unique(out)) <= {0.0, np.float32(1 / 0.7)}
    with pytest.raises(ContractError):
        ad.dropout(x, 1.0, np.random.default_rng(0), training=True)


def test_dropout_gradient_uses_same_mask():
    mask_rng = lambda: np.random.default_rng(5)  # noqa: E731
    x = RNG.normal(size=(3, 4))
    assert check_op(lambda t: weighted_sum(ad.dropout(t, 0.5, mask_rng(), True)), [x]) < 1e-6


def test_backward_basic_rules():
    w = Tensor(np.zeros(3), requires_grad=True)
    ad.backward(ad.sum_(w))
    np.testing.assert_array_equal(w.grad, [1.0, 1.0, 1.0])

    v = Tensor(np.array([2.0, -1.0]), requires_grad=True)
    ad.backward(ad.sum_(ad.add(ad.mul(v, 3.0), v)))  # used twice
    np.testing.assert_array_equal(v.grad, [4.0, 4.0])

    with pytest.raises(ContractError):
        ad.backward(ad.mul(Tensor(np.ones(2), requires_grad=True), 2.0))


def test_tape_topological_order_and_single_visit():
    a = Tensor(RNG.normal(size=(3,)), requires_grad=True)
    b = ad.mul(a, 2.0)
    c = ad.add(b, a)
    d = ad.add(ad.mul(c, b), c)
    loss = ad.sum_(d)
    tape = ad.Tape(loss)
    ids = [n.id for n in tape.nodes]
    assert len(ids) == len(set(ids))
    pos = {nid: i for i, nid in enumerate(ids)}
    for node in tape.nodes:
        for inp in node.inputs:
            if inp.node is not None:
                assert pos[inp.node.id] < pos[node.id]
    ad.backward(loss, tape)
    # d = (3a)(2a) + 3a  ->  dd/da = 12a + 3
    np.testing.assert_allclose(a.grad, 12 * a.data + 3, rtol=1e-6)


def test_no_grad_records_nothing():
    w = Tensor(np.ones(2), requires_grad=True)
    with ad.no_grad():
        out = ad.mul(w, 2.0)
    assert out.node is None and not out.requires_grad


def test_debug_mode_flags_non_finite():
    with ad.debug_mode(), np.errstate(divide="ignore"):
        with pytest.raises(FloatingPointError):
            ad.div(Tensor([1.0]), Tensor([0.0]))


def test_forward_determinism():
    x = RNG.normal(size=(4, 8)).astype(np.float32)
    outs = [ad.gelu(ad.matmul(Tensor(x), Tensor(x.T))).data for _ in range(2)]
    assert np.array_equal(outs[0], outs[1])


@pytest.mark.parametrize("method", ["FullFT", "LoRA", "DoRA"])
def test_full_encoder_gradients_match_finite_differences(method):
    rng = np.random.default_rng(7)
    with ad.precision(np.float64):
        cfg = ModelConfig(layers=2, d_model=16, heads=2, intermediate=32, vocab_size=30, max_len=24)
        model = build_model(cfg, seed=0)
        attach_adapters(model, method, r=4, dropout=0.0)
        for p in model.parameters():
            p.data = p.data.astype(np.float64)
        for _, layer in model.attention_projections():
            if layer.adapter is not None:
                lora = getattr(layer.adapter, "lora", layer.adapter)
                lora.up.data = rng.normal(0.0, 0.3, lora.up.shape)
        ids = rng.integers(4, 30, size=(3, 12))
        mask = np.ones_like(ids)
        mask[2, 9:] = 0
        batch = Batch(ids, mask, np.ones((3, 12), bool), np.array([1, 5, 3]), np.array([2, 6, 8]), [])
        model.eval()
        ad.backward(qa_loss(model, batch))
        trainable = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
        worst = 0.0
        for k in range(10):
            name, p = trainable[rng.integers(len(trainable))]
            idx = tuple(int(rng.integers(s)) for s in p.shape)
            old = p.data[idx]
            p.data[idx] = old + 1e-6
            up = qa_loss(model, batch).item()
            p.data[idx] = old - 1e-6
            down = qa_loss(model, batch).item()
            p.data[idx] = old
            fd = (up - down) / 2e-6
            an = p.grad[idx]
            if abs(fd) + abs(an) > 1e-9:
                worst = max(worst, abs(fd - an) / (abs(fd) + abs(an)))
    assert worst < 1e-2
