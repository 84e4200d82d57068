"""LoRA and DoRA adapters over frozen dense or NF4-quantized linear maps.

Weights follow the ``d x k`` convention (``h = W x``), so a batch of row
vectors ``x`` of shape ``[..., k]`` is mapped as ``x @ W.T``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, DimensionError, Tensor
from .nn import Module
from .quant import QuantizedTensor, dequantize, quantize_nf4

__all__ = [
    "UnsupportedMergeError",
    "AdapterStateError",
    "LoraAdapter",
    "DoraAdapter",
    "AdaptedLinear",
    "ParamCountReport",
    "init_adapter",
    "quantized_linear",
    "lora_forward",
    "dora_forward",
    "merge_lora",
    "merged_layer",
    "count_trainable",
]


class UnsupportedMergeError(RuntimeError):
    """Merging into a quantized base would require re-quantization."""


class AdapterStateError(RuntimeError):
    """Adapter attached twice, or an op called for the wrong adapter kind."""


class LoraAdapter(Module):
    """Rank-r pair: ``down`` (r x k) projects inputs, ``up`` (d x r) projects back."""

    def __init__(self, down: Tensor, up: Tensor, alpha: float, dropout_p: float = 0.0, seed: int = 0):
        r = down.shape[0]
        if up.shape[1] != r:
            raise DimensionError(f"down {down.shape} and up {up.shape} disagree on rank")
        if not 0.0 <= dropout_p < 1.0:
            raise ContractError(f"dropout_p must be in [0, 1), got {dropout_p}")
        self.down = down
        self.up = up
        self.alpha = float(alpha)
        self.dropout_p = float(dropout_p)
        self.rng = np.random.default_rng(seed)

    @property
    def rank(self) -> int:
        return self.down.shape[0]

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def delta(self) -> Tensor:
        """(alpha / r) * up @ down as a differentiable ``d x k`` tensor."""
        return ad.mul(ad.matmul(self.up, self.down), self.scaling)

    def branch(self, x: Tensor) -> Tensor:
        """(alpha / r) * up @ down @ dropout(x) for row-vector batches."""
        xd = ad.dropout(x, self.dropout_p, self.rng, self.training)
        return ad.mul(ad.matmul(ad.matmul(xd, self.down.T), self.up.T), self.scaling)


class DoraAdapter(Module):
    def __init__(self, lora: LoraAdapter, magnitude: Tensor):
        self.lora = lora
        self.magnitude = magnitude


def init_adapter(d: int, k: int, r: int, alpha: float, seed: int, dropout_p: float = 0.0) -> LoraAdapter:
    """down ~ N(0, 1/r) and up = 0, so the adapted layer starts as the base layer."""
    if not (isinstance(r, (int, np.integer)) and 1 <= r <= min(d, k)):
        raise ContractError(f"rank must be an integer in [1, min(d, k)] = [1, {min(d, k)}], got {r}")
    if alpha <= 0:
        raise ContractError(f"alpha must be positive, got {alpha}")
    rng = np.random.default_rng(seed)
    down = Tensor(rng.normal(0.0, 1.0 / np.sqrt(r), size=(r, k)).astype(np.float32), requires_grad=True)
    up = Tensor(np.zeros((d, r), dtype=np.float32), requires_grad=True)
    return LoraAdapter(down, up, alpha, dropout_p, seed=seed + 1)


def quantized_linear(x: Tensor, q: QuantizedTensor) -> Tensor:
    """x @ dequantize(q).T without keeping the dense weight for backward.

    The backward pass dequantizes again; only the (already resident)
    quantized tensor is referenced, so no weight-sized activation is held.
    """
    if x.shape[-1] != q.shape[1]:
        raise DimensionError(f"quantized_linear: input {x.shape} vs weight {q.shape}")
    w = dequantize(q).astype(x.data.dtype, copy=False)
    out = x.data @ w.T

    def bw(g):
        return (g @ dequantize(q).astype(g.dtype, copy=False),)

    return ad.make_op("quantized_linear", out, (x,), bw, saved=())


class AdaptedLinear(Module):
    """Linear map with a frozen (dense or NF4) base and an optional adapter."""

    def __init__(self, weight: Tensor | QuantizedTensor, bias: Tensor | None = None, adapter=None):
        self.weight = weight
        self.bias = bias
        self.adapter = adapter

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]

    @property
    def in_features(self) -> int:
        return self.weight.shape[1]

    @property
    def quantized(self) -> bool:
        return isinstance(self.weight, QuantizedTensor)

    def dense_weight(self) -> np.ndarray:
        return dequantize(self.weight) if self.quantized else self.weight.data

    def base_forward(self, x: Tensor) -> Tensor:
        if self.quantized:
            h = quantized_linear(x, self.weight)
        else:
            if x.shape[-1] != self.in_features:
                raise DimensionError(f"linear: input {x.shape} vs weight {self.weight.shape}")
            h = ad.matmul(x, self.weight.T)
        return h if self.bias is None else ad.add(h, self.bias)

    def __call__(self, x: Tensor) -> Tensor:
        if self.adapter is None:
            return self.base_forward(x)
        if isinstance(self.adapter, DoraAdapter):
            return dora_forward(self, x)
        return lora_forward(self, x)

    def attach(self, adapter) -> None:
        if self.adapter is not None:
            raise AdapterStateError("layer already carries an adapter")
        lora = adapter.lora if isinstance(adapter, DoraAdapter) else adapter
        if lora.down.shape[1] != self.in_features or lora.up.shape[0] != self.out_features:
            raise DimensionError(
                f"adapter down {lora.down.shape} / up {lora.up.shape} does not fit weight {self.weight.shape}"
            )
        if not self.quantized:
            self.weight.requires_grad = False
        if self.bias is not None:
            self.bias.requires_grad = False
        self.adapter = adapter

    def flops_per_token(self) -> int:
        """Multiply-accumulates needed to map one input vector."""
        d, k = self.out_features, self.in_features
        macs = d * k
        if self.adapter is not None:
            lora = self.adapter.lora if isinstance(self.adapter, DoraAdapter) else self.adapter
            macs += lora.rank * k + d * lora.rank
            if isinstance(self.adapter, DoraAdapter):
                macs += d
        return macs + (d if self.bias is not None else 0)


def _ensure_rows(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 1:
        return ad.reshape(x, (1, x.shape[0])), True
    return x, False


def lora_forward(layer: AdaptedLinear, x: Tensor) -> Tensor:
    """base(x) + (alpha / r) * up @ down @ dropout(x), plus bias."""
    if not isinstance(layer.adapter, LoraAdapter):
        raise AdapterStateError("lora_forward needs a LoRA adapter")
    x, squeeze = _ensure_rows(ad._as_tensor(x))
    h = ad.add(layer.base_forward(x), layer.adapter.branch(x))
    return ad.reshape(h, (h.shape[-1],)) if squeeze else h


def dora_forward(layer: AdaptedLinear, x: Tensor) -> Tensor:
    """magnitude * (base(x) + lora branch(x)) / ||W0 + delta||, plus bias.

    The norm is taken per output unit (over the ``k`` inputs) and is
    differentiated, not detached. Without dropout this equals
    ``(magnitude * V / ||V||) x`` with ``V = W0 + delta``.
    """
    if not isinstance(layer.adapter, DoraAdapter):
        raise AdapterStateError("dora_forward needs a DoRA adapter")
    x, squeeze = _ensure_rows(ad._as_tensor(x))
    lora = layer.adapter.lora
    w0 = Tensor(layer.dense_weight())
    V = ad.add(w0, lora.delta())
    norms = ad.column_l2_norms(ad.transpose(V))
    scale = ad.div(layer.adapter.magnitude, norms)
    if layer.quantized:
        base = quantized_linear(x, layer.weight)
    else:
        base = ad.matmul(x, layer.weight.T)
    h = ad.mul(ad.add(base, lora.branch(x)), scale)
    if layer.bias is not None:
        h = ad.add(h, layer.bias)
    return ad.reshape(h, (h.shape[-1],)) if squeeze else h


def make_dora(layer: AdaptedLinear, lora: LoraAdapter) -> DoraAdapter:
    """DoRA adapter whose magnitudes start at the base per-unit norms."""
    w = layer.dense_weight()
    with ad.no_grad():
        m = ad.column_l2_norms(Tensor(w.T)).data.copy()
    return DoraAdapter(lora, Tensor(m, requires_grad=True))


def merge_lora(layer: AdaptedLinear) -> Tensor:
    """W0 + (alpha / r) * up @ down for a dense base."""
    if not isinstance(layer.adapter, LoraAdapter):
        raise AdapterStateError("merge_lora needs a LoRA adapter")
    if layer.quantized:
        raise UnsupportedMergeError("cannot merge into an NF4 base without re-quantizing it")
    lora = layer.adapter
    merged = layer.weight.data + np.float32(lora.scaling) * (lora.up.data @ lora.down.data)
    return Tensor(merged.astype(np.float32))


def merged_layer(layer: AdaptedLinear) -> AdaptedLinear:
    """Plain linear layer carrying the merged weight and no adapter."""
    bias = None if layer.bias is None else Tensor(layer.bias.data.copy())
    return AdaptedLinear(merge_lora(layer), bias)


@dataclass(frozen=True)
class ParamCountReport:
    trainable: int
    frozen: int

    @property
    def total(self) -> int:
        return self.trainable + self.frozen

    @property
    def trainable_fraction(self) -> float:
        return self.trainable / self.total if self.total else 0.0

    @property
    def reduction(self) -> float:
        """1 - trainable / frozen: the saving versus updating the frozen weights."""
        return 1.0 - self.trainable / self.frozen if self.frozen else 0.0


def count_trainable(module: Module) -> ParamCountReport:
    trainable = frozen = 0
    for _, p in module.named_parameters():
        if p.requires_grad:
            trainable += p.numel
        else:
            frozen += p.numel
    for _, q in module.named_quantized():
        frozen += q.numel
    return ParamCountReport(trainable, frozen)


def quantize_layer(layer: AdaptedLinear, block_size: int = 64, double_quant: bool = True) -> None:
    """Replace a dense base weight by its NF4 encoding in place."""
    if layer.quantized:
        raise AdapterStateError("layer is already quantized")
    layer.weight = quantize_nf4(layer.weight.data, block_size=block_size, double_quant=double_quant)
