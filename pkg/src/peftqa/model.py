"""Micro BERT-style encoder with a span-extraction head and adapter hooks."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .adapters import (
    AdaptedLinear,
    AdapterStateError,
    DoraAdapter,
    count_trainable,
    init_adapter,
    make_dora,
    quantize_layer,
)
from .autodiff import Tensor
from .nn import Embedding, LayerNorm, Module, normal
from .text import EncodedFeature

__all__ = [
    "ConfigError",
    "ModelConfig",
    "PRESETS",
    "METHODS",
    "EncoderModel",
    "build_model",
    "expected_param_count",
    "Batch",
    "collate",
    "forward_qa",
    "qa_loss",
    "attach_adapters",
]

NEG_INF = -1e9
METHODS = ("FullFT", "LoRA", "QLoRA", "DoRA", "QDoRA")


class ConfigError(ValueError):
    """Invalid model geometry or method name."""


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 2
    d_model: int = 128
    heads: int = 4
    intermediate: int = 512
    vocab_size: int = 1000
    max_len: int = 384
    preset: str = "custom"
    # wider than the usual 0.02: with a frozen random encoder, near-uniform
    # attention at 0.02 leaves adapters on a long plateau
    init_std: float = 0.1
    layer_norm_eps: float = 1e-12
    position_encoding: str = "sinusoidal"

    def __post_init__(self) -> None:
        for name in ("layers", "d_model", "heads", "intermediate", "vocab_size", "max_len"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.d_model % self.heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by heads={self.heads}")
        if self.position_encoding not in ("sinusoidal", "learned"):
            raise ConfigError(f"position_encoding must be 'sinusoidal' or 'learned', got {self.position_encoding!r}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.heads

    def to_dict(self) -> dict:
        return asdict(self)


# Large doubles the depth and widens by the 768 -> 1024 style step, keeping
# the per-head width fixed like the full-size pair.
PRESETS = {
    "micro-base": ModelConfig(layers=2, d_model=128, heads=4, intermediate=512, preset="micro-base"),
    "micro-large": ModelConfig(layers=4, d_model=192, heads=6, intermediate=768, preset="micro-large"),
}


def preset_config(name: str, **overrides) -> ModelConfig:
    try:
        base = PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return replace(base, **overrides)


def sinusoidal_table(n: int, d: int, rms: float) -> np.ndarray:
    """Fixed sin/cos position codes scaled to the given per-entry RMS."""
    pos = np.arange(n)[:, None]
    freq = np.exp(-math.log(10000.0) * np.arange(0, d, 2) / d)[None, :]
    table = np.zeros((n, d))
    table[:, 0::2] = np.sin(pos * freq)
    table[:, 1::2] = np.cos(pos * freq)
    return (table * rms * math.sqrt(2.0)).astype(np.float32)


def _linear(rng: np.random.Generator, d: int, k: int, std: float) -> AdaptedLinear:
    return AdaptedLinear(normal(rng, (d, k), std), Tensor(np.zeros(d, dtype=np.float32), requires_grad=True))


class SelfAttention(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        d = cfg.d_model
        self.heads = cfg.heads
        self.query = _linear(rng, d, d, cfg.init_std)
        self.key = _linear(rng, d, d, cfg.init_std)
        self.value = _linear(rng, d, d, cfg.init_std)
        self.output = _linear(rng, d, d, cfg.init_std)

    def projections(self) -> dict[str, AdaptedLinear]:
        return {"query": self.query, "key": self.key, "value": self.value, "output": self.output}

    def _split(self, x: Tensor, b: int, t: int) -> Tensor:
        return ad.transpose(ad.reshape(x, (b, t, self.heads, -1)), (0, 2, 1, 3))

    def __call__(self, x: Tensor, key_mask: np.ndarray) -> Tensor:
        b, t, d = x.shape
        q = self._split(self.query(x), b, t)
        k = self._split(self.key(x), b, t)
        v = self._split(self.value(x), b, t)
        scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(d // self.heads))
        probs = ad.softmax_rows(scores, key_mask)
        ctx = ad.reshape(ad.transpose(ad.matmul(probs, v), (0, 2, 1, 3)), (b, t, d))
        return self.output(ctx)


class EncoderBlock(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.attention = SelfAttention(cfg, rng)
        self.attn_norm = LayerNorm(cfg.d_model, cfg.layer_norm_eps)
        self.ff_in = _linear(rng, cfg.intermediate, cfg.d_model, cfg.init_std)
        self.ff_out = _linear(rng, cfg.d_model, cfg.intermediate, cfg.init_std)
        self.ff_norm = LayerNorm(cfg.d_model, cfg.layer_norm_eps)

    def __call__(self, x: Tensor, key_mask: np.ndarray) -> Tensor:
        x = self.attn_norm(ad.add(x, self.attention(x, key_mask)))
        return self.ff_norm(ad.add(x, self.ff_out(ad.gelu(self.ff_in(x)))))


class EncoderModel(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.config = cfg
        self.seed = seed
        self.method: str | None = None
        self.adapter_config: dict = {}
        self.tokens = Embedding(cfg.vocab_size, cfg.d_model, rng, cfg.init_std)
        if cfg.position_encoding == "learned":
            self.positions = Embedding(cfg.max_len, cfg.d_model, rng, cfg.init_std)
        else:
            self.positions = None
            self.position_table = sinusoidal_table(cfg.max_len, cfg.d_model, cfg.init_std)
        self.embed_norm = LayerNorm(cfg.d_model, cfg.layer_norm_eps)
        self.blocks = [EncoderBlock(cfg, rng) for _ in range(cfg.layers)]
        self.qa_head = _linear(rng, 2, cfg.d_model, cfg.init_std)

    def attention_projections(self) -> list[tuple[str, AdaptedLinear]]:
        return [
            (f"blocks.{i}.attention.{name}", lin)
            for i, block in enumerate(self.blocks)
            for name, lin in block.attention.projections().items()
        ]

    def encode(self, input_ids: np.ndarray, attention_mask: np.ndarray) -> Tensor:
        b, t = input_ids.shape
        if t > self.config.max_len:
            raise ConfigError(f"sequence length {t} exceeds max_len {self.config.max_len}")
        if self.positions is not None:
            pe = self.positions(np.broadcast_to(np.arange(t), (b, t)))
        else:
            pe = Tensor(self.position_table[:t])
        x = self.embed_norm(ad.add(self.tokens(input_ids), pe))
        key_mask = np.where(attention_mask[:, None, None, :] > 0, 0.0, NEG_INF).astype(x.data.dtype)
        for block in self.blocks:
            x = block(x, key_mask)
        return x

    def __call__(self, input_ids: np.ndarray, attention_mask: np.ndarray) -> tuple[Tensor, Tensor]:
        """Start and end logits of shape [batch, seq]."""
        logits = self.qa_head(self.encode(input_ids, attention_mask))
        return logits[..., 0], logits[..., 1]


def build_model(cfg: ModelConfig, seed: int = 0) -> EncoderModel:
    return EncoderModel(cfg, seed)


def expected_param_count(cfg: ModelConfig) -> int:
    """Closed-form parameter count of an unadapted model."""
    d, f = cfg.d_model, cfg.intermediate
    positions = cfg.max_len * d if cfg.position_encoding == "learned" else 0
    embeddings = cfg.vocab_size * d + positions + 2 * d
    block = 4 * (d * d + d) + (f * d + f) + (d * f + d) + 4 * d
    head = 2 * d + 2
    return embeddings + cfg.layers * block + head


@dataclass
class Batch:
    input_ids: np.ndarray
    attention_mask: np.ndarray
    span_mask: np.ndarray  # positions a start/end may be assigned to in training
    start_positions: np.ndarray | None
    end_positions: np.ndarray | None
    features: list[EncodedFeature]


def collate(features: Sequence[EncodedFeature], with_labels: bool = True) -> Batch:
    """Pad to the longest feature; [CLS] stays targetable for null spans."""
    t = max(len(f) for f in features)
    b = len(features)
    ids = np.zeros((b, t), dtype=np.int64)
    mask = np.zeros((b, t), dtype=np.int64)
    span = np.zeros((b, t), dtype=bool)
    for i, f in enumerate(features):
        ids[i, : len(f)] = f.input_ids
        mask[i, : len(f)] = f.attention_mask
        span[i, 0] = True
        span[i, f.context_start:f.context_end] = True
    starts = ends = None
    if with_labels:
        if any(f.start_position is None for f in features):
            raise ValueError("training batch contains features without gold positions")
        starts = np.array([f.start_position for f in features], dtype=np.int64)
        ends = np.array([f.end_position for f in features], dtype=np.int64)
    return Batch(ids, mask, span, starts, ends, list(features))


def forward_qa(model: EncoderModel, feature: EncodedFeature) -> tuple[Tensor, Tensor]:
    """Logits for one feature; positions outside the context are -inf for decoding."""
    batch = collate([feature], with_labels=False)
    start, end = model(batch.input_ids, batch.attention_mask)
    ctx = np.array(feature.context_mask())
    s = np.where(ctx, start.data[0], -np.inf)
    e = np.where(ctx, end.data[0], -np.inf)
    return Tensor(s), Tensor(e)


def qa_loss(model: EncoderModel, batch: Batch) -> Tensor:
    """Mean of start and end cross-entropy; non-span positions are masked out."""
    start, end = model(batch.input_ids, batch.attention_mask)
    bias = np.where(batch.span_mask, 0.0, NEG_INF).astype(start.data.dtype)
    ls = ad.cross_entropy_from_logits(ad.add(start, bias), batch.start_positions)
    le = ad.cross_entropy_from_logits(ad.add(end, bias), batch.end_positions)
    return ad.mul(ad.add(ls, le), 0.5)


def attach_adapters(model: EncoderModel, method: str, r: int = 16, alpha: float = 32.0,
                    dropout: float = 0.1, seed: int | None = None, block_size: int = 64,
                    double_quant: bool = True) -> None:
    """Freeze the encoder and wrap every Q/K/V/O projection for ``method``.

    ``FullFT`` leaves everything trainable. For the PEFT methods the QA head
    stays trainable since it starts from random initialization.
    """
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}; choose from {METHODS}")
    if model.method is not None:
        raise AdapterStateError(f"model already prepared for {model.method}")
    model.method = method
    if method == "FullFT":
        return
    seed = model.seed if seed is None else seed
    model.adapter_config = {"r": r, "alpha": alpha, "dropout": dropout, "seed": seed,
                            "block_size": block_size, "double_quant": double_quant}
    model.requires_grad_(False)
    for p in model.qa_head.parameters():
        p.requires_grad = True
    for i, (_, layer) in enumerate(model.attention_projections()):
        if method in ("QLoRA", "QDoRA"):
            quantize_layer(layer, block_size=block_size, double_quant=double_quant)
        lora = init_adapter(layer.out_features, layer.in_features, r, alpha, seed=seed * 1000 + 2 * i,
                            dropout_p=dropout)
        layer.attach(make_dora(layer, lora) if method.endswith("DoRA") else lora)


def trainable_fraction(model: EncoderModel) -> float:
    return count_trainable(model).trainable_fraction


def is_dora(layer: AdaptedLinear) -> bool:
    return isinstance(layer.adapter, DoraAdapter)
