import numpy as np
import pytest

from gradcheck import check_op
from peftqa import autodiff as ad
from peftqa.adapters import (
    AdaptedLinear,
    AdapterStateError,
    DoraAdapter,
    LoraAdapter,
    UnsupportedMergeError,
    count_trainable,
    init_adapter,
    lora_forward,
    make_dora,
    merge_lora,
    merged_layer,
    quantize_layer,
)
from peftqa.autodiff import ContractError, DimensionError, Tensor
from peftqa.quant import dequantize


def dense_layer(d: int, k: int, seed: int = 0, bias: bool = False) -> AdaptedLinear:
    rng = np.random.default_rng(seed)
    w = Tensor(rng.normal(0, 0.1, (d, k)).astype(np.float32), requires_grad=True)
    b = Tensor(rng.normal(0, 0.1, d).astype(np.float32), requires_grad=True) if bias else None
    return AdaptedLinear(w, b)


def randomize_up(adapter: LoraAdapter, seed: int) -> None:
    adapter.up.data = np.random.default_rng(seed).normal(0, 0.1, adapter.up.shape).astype(np.float32)


def test_parameter_arithmetic_768():
    layer = dense_layer(768, 768)
    layer.attach(init_adapter(768, 768, 16, 32.0, seed=0))
    rep = count_trainable(layer)
    assert rep.trainable == 24_576
    assert rep.frozen == 589_824
    assert rep.reduction == pytest.approx(0.9583, abs=1e-4)


def test_small_layer_counts():
    layer = dense_layer(4, 6)
    layer.attach(init_adapter(4, 6, 2, 4.0, seed=0))
    assert count_trainable(layer).trainable == 2 * (4 + 6)


def test_dora_adds_one_magnitude_per_output():
    layer = dense_layer(5, 7)
    layer.attach(make_dora(layer, init_adapter(5, 7, 2, 4.0, seed=0)))
    assert count_trainable(layer).trainable == 2 * (5 + 7) + 5


def test_init_distribution():
    a = init_adapter(512, 512, 8, 16.0, seed=3)
    assert np.all(a.up.data == 0)
    assert a.down.data.var() == pytest.approx(1 / 8, rel=0.05)
    assert a.scaling == 2.0


@pytest.mark.parametrize("r", [0, 5, 2.5])
def test_init_rank_contract(r):
    with pytest.raises(ContractError):
        init_adapter(4, 4, r, 1.0, seed=0)


def test_init_alpha_contract():
    with pytest.raises(ContractError):
        init_adapter(4, 4, 2, 0.0, seed=0)


@pytest.mark.parametrize("kind", ["lora", "dora"])
def test_identity_at_init(kind):
    layer = dense_layer(8, 12, bias=True)
    x = Tensor(np.random.default_rng(1).normal(size=(5, 12)).astype(np.float32))
    before = layer(x).data.copy()
    lora = init_adapter(8, 12, 4, 8.0, seed=2, dropout_p=0.0)
    layer.attach(make_dora(layer, lora) if kind == "dora" else lora)
    layer.eval()
    assert np.max(np.abs(layer(x).data - before)) < 1e-6


def test_lora_matches_dense_oracle():
    layer = dense_layer(6, 9, bias=True)
    lora = init_adapter(6, 9, 3, 6.0, seed=0)
    randomize_up(lora, 1)
    layer.attach(lora)
    layer.eval()
    x = np.random.default_rng(2).normal(size=(4, 9)).astype(np.float32)
    w = layer.weight.data + 2.0 * lora.up.data @ lora.down.data
    np.testing.assert_allclose(layer(Tensor(x)).data, x @ w.T + layer.bias.data, atol=1e-5)


def test_lora_forward_accepts_vector():
    layer = dense_layer(3, 4)
    layer.attach(init_adapter(3, 4, 1, 1.0, seed=0))
    layer.eval()
    assert lora_forward(layer, Tensor(np.ones(4, dtype=np.float32))).shape == (3,)


def test_dora_matches_dense_oracle():
    layer = dense_layer(6, 9)
    lora = init_adapter(6, 9, 3, 6.0, seed=0)
    randomize_up(lora, 1)
    dora = make_dora(layer, lora)
    dora.magnitude.data = dora.magnitude.data * np.linspace(0.5, 1.5, 6).astype(np.float32)
    layer.attach(dora)
    layer.eval()
    x = np.random.default_rng(3).normal(size=(4, 9)).astype(np.float32)
    v = layer.weight.data.astype(np.float64) + 2.0 * lora.up.data @ lora.down.data
    w = dora.magnitude.data[:, None] * v / np.linalg.norm(v, axis=1, keepdims=True)
    np.testing.assert_allclose(layer(Tensor(x)).data, x @ w.T, atol=1e-5)


def test_dora_gradients_include_norm_path():
    rng = np.random.default_rng(4)
    w0 = rng.normal(size=(4, 5))
    x = rng.normal(size=(3, 5))

    def build(down, up, magnitude):
        layer = AdaptedLinear(Tensor(w0))
        layer.attach(DoraAdapter(LoraAdapter(down, up, alpha=4.0), magnitude))
        layer.eval()
        out = layer(Tensor(x))
        return ad.sum_(ad.mul(out, out))

    arrays = [rng.normal(size=(2, 5)), rng.normal(size=(4, 2)), rng.uniform(0.5, 2, 4)]
    assert check_op(build, arrays) < 1e-5


def test_lora_gradients():
    rng = np.random.default_rng(5)
    w0 = rng.normal(size=(4, 5))
    x = rng.normal(size=(3, 5))

    def build(down, up):
        layer = AdaptedLinear(Tensor(w0))
        layer.attach(LoraAdapter(down, up, alpha=2.0))
        layer.eval()
        out = layer(Tensor(x))
        return ad.sum_(ad.mul(out, out))

    assert check_op(build, [rng.normal(size=(2, 5)), rng.normal(size=(4, 2))]) < 1e-6


def test_merge_equivalence_many_layers():
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        d, k = int(rng.integers(2, 40)), int(rng.integers(2, 40))
        r = int(rng.integers(1, min(d, k) + 1))
        layer = dense_layer(d, k, seed=seed, bias=bool(seed % 2))
        lora = init_adapter(d, k, r, float(rng.uniform(1, 32)), seed=seed, dropout_p=0.1)
        randomize_up(lora, seed + 1000)
        layer.attach(lora)
        layer.eval()
        x = Tensor(rng.normal(size=(7, k)).astype(np.float32))
        worst = max(worst, float(np.max(np.abs(layer(x).data - merged_layer(layer)(x).data))))
    assert worst < 1e-5


def test_merged_layer_costs_like_plain_layer():
    layer = dense_layer(16, 24, bias=True)
    plain = layer.flops_per_token()
    layer.attach(init_adapter(16, 24, 4, 8.0, seed=0))
    assert layer.flops_per_token() > plain
    assert merged_layer(layer).flops_per_token() == plain


def test_dropout_only_on_adapter_branch():
    layer = dense_layer(6, 8)
    lora = init_adapter(6, 8, 2, 4.0, seed=0, dropout_p=0.5)
    layer.attach(lora)
    layer.train()
    x = Tensor(np.random.default_rng(6).normal(size=(3, 8)).astype(np.float32))
    # up = 0 so the branch contributes nothing; the base path must be untouched by dropout
    np.testing.assert_allclose(layer(x).data, layer.base_forward(x).data)


def test_attach_freezes_base_and_rejects_second_adapter():
    layer = dense_layer(4, 4, bias=True)
    layer.attach(init_adapter(4, 4, 2, 1.0, seed=0))
    assert not layer.weight.requires_grad and not layer.bias.requires_grad
    with pytest.raises(AdapterStateError):
        layer.attach(init_adapter(4, 4, 2, 1.0, seed=1))


def test_attach_shape_mismatch():
    with pytest.raises(DimensionError):
        dense_layer(4, 6).attach(init_adapter(6, 4, 2, 1.0, seed=0))


def test_merge_requires_lora_and_dense_base():
    layer = dense_layer(4, 4)
    with pytest.raises(AdapterStateError):
        merge_lora(layer)
    layer.attach(init_adapter(4, 4, 2, 1.0, seed=0))
    quantize_layer(layer, block_size=8)
    with pytest.raises(UnsupportedMergeError):
        merge_lora(layer)


def test_quantized_base_forward_and_grad():
    layer = dense_layer(8, 16)
    layer.attach(init_adapter(8, 16, 2, 4.0, seed=0))
    quantize_layer(layer, block_size=16)
    assert layer.quantized
    layer.eval()
    xv = np.random.default_rng(7).normal(size=(3, 16)).astype(np.float32)
    x = Tensor(xv, requires_grad=True)
    out = layer(x)
    w = dequantize(layer.weight)
    np.testing.assert_allclose(out.data, xv @ w.T, atol=1e-5)
    ad.backward(ad.sum_(out))
    np.testing.assert_allclose(x.grad, np.ones((3, 8)) @ w, atol=1e-5)
    assert layer.adapter.up.grad is not None


def test_quantized_linear_saves_no_dense_weight():
    layer = dense_layer(64, 64)
    quantize_layer(layer, block_size=64)
    x = Tensor(np.ones((2, 64), dtype=np.float32), requires_grad=True)
    tape = ad.backward(ad.sum_(layer(x)))
    assert tape.saved_bytes < 64 * 64 * 4


def test_qlora_decomposition_matches_dense_adapter_on_dequantized_base():
    layer = dense_layer(8, 16, seed=3)
    lora = init_adapter(8, 16, 2, 4.0, seed=0)
    randomize_up(lora, 9)
    layer.attach(lora)
    quantize_layer(layer, block_size=16)
    layer.eval()
    x = np.random.default_rng(8).normal(size=(2, 16)).astype(np.float32)
    w = dequantize(layer.weight) + 2.0 * lora.up.data @ lora.down.data
    np.testing.assert_allclose(layer(Tensor(x)).data, x @ w.T, atol=1e-5)


def test_quantize_twice_rejected():
    layer = dense_layer(8, 8)
    quantize_layer(layer, block_size=8)
    with pytest.raises(AdapterStateError):
        quantize_layer(layer)
