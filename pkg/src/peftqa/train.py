"""Training loop: AdamW with decoupled decay, clipping, LR schedule, memory model."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .adapters import count_trainable
from .autodiff import Tensor
from .metrics import (
    PORTUGUESE_ARTICLES,
    DecodeError,
    EvalReport,
    Prediction,
    decode_span,
    decode_windows,
    evaluate_dataset,
)
from .model import EncoderModel, collate, qa_loss
from .squad import QaExample
from .text import EncodedFeature, Vocab, tokenize_and_encode

log = logging.getLogger(__name__)

__all__ = [
    "LR_STANDARD",
    "LR_HIGH",
    "TrainConfig",
    "NonFiniteGradientError",
    "AccountingError",
    "AdamW",
    "adamw_step",
    "clip_grad_norm",
    "lr_at",
    "MemoryAccountant",
    "RunMetrics",
    "encode_examples",
    "predict",
    "evaluate_model",
    "train_run",
]

LR_STANDARD = 4.25e-5
LR_HIGH = 2e-4
CATEGORIES = ("frozen_weights", "trainable_weights", "gradients", "optimizer_states", "activations")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = LR_HIGH
    epochs: int = 2
    batch_size: int = 16
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    schedule: str = "linear"
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_len: int = 384
    doc_stride: int = 128
    max_answer_len: int = 30
    eval_batch_size: int = 64
    # divergence: loss above this multiple of the first-step loss
    collapse_ratio: float = 10.0

    def __post_init__(self) -> None:
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.schedule not in ("constant", "linear"):
            raise ValueError(f"schedule must be 'constant' or 'linear', got {self.schedule!r}")
        if not self.collapse_ratio > 1:
            raise ValueError("collapse_ratio must exceed 1")


class NonFiniteGradientError(FloatingPointError):
    """A gradient contains NaN or Inf."""


class AccountingError(RuntimeError):
    """More bytes freed than allocated in a category."""


# -- optimizer ----------------------------------------------------------------


class AdamW:
    """Adam moments for each trainable tensor; weight decay applied to the weights directly."""

    def __init__(self, params: Sequence[Tensor], beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.first = [np.zeros_like(p.data) for p in self.params]
        self.second = [np.zeros_like(p.data) for p in self.params]
        self.step_count = 0

    @property
    def state_bytes(self) -> int:
        return sum(a.nbytes for a in self.first) + sum(a.nbytes for a in self.second)

    def step(self, lr: float, weight_decay: float = 0.0, names: Sequence[str] | None = None) -> None:
        for i, p in enumerate(self.params):
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                label = names[i] if names else f"param[{i}] {p.shape}"
                raise NonFiniteGradientError(f"non-finite gradient in {label} at step {self.step_count + 1}")
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**t
        c2 = 1.0 - b2**t
        for p, m, v in zip(self.params, self.first, self.second):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps) + weight_decay * p.data
            p.data -= (lr * update).astype(p.data.dtype)


def adamw_step(params: Sequence[Tensor], state: AdamW, lr: float, weight_decay: float = 0.01) -> None:
    """p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * p) for each tensor."""
    if list(state.params) != list(params):
        raise ValueError("optimizer state was built for a different parameter list")
    state.step(lr, weight_decay)


def clip_grad_norm(params: Iterable[Tensor], max_norm: float = 1.0) -> float:
    """Rescale all gradients so their global L2 norm is at most ``max_norm``; returns the scale."""
    grads = [p.grad for p in params if p.grad is not None]
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads))
    if not math.isfinite(total) or total <= max_norm:
        return 1.0
    scale = max_norm / total
    for g in grads:
        g *= scale
    return scale


def lr_at(step: int, total_steps: int, base_lr: float, schedule: str) -> float:
    """Learning rate for 0-based ``step``; linear decays to zero with no warmup."""
    if schedule == "constant":
        return base_lr
    return base_lr * max(0.0, 1.0 - step / max(1, total_steps))


# -- memory model ---------------------------------------------------------------


class MemoryAccountant:
    """High-water marks over a stream of tagged allocate/free events."""

    def __init__(self) -> None:
        self.current = {c: 0 for c in CATEGORIES}
        self.category_peaks = {c: 0 for c in CATEGORIES}
        self.peak_total = 0
        self.at_peak = dict(self.current)
        self.events: list[tuple[str, str, int]] = []

    def allocate(self, category: str, nbytes: int) -> None:
        self._apply(category, int(nbytes), "alloc")

    def free(self, category: str, nbytes: int) -> None:
        self._apply(category, -int(nbytes), "free")

    def _apply(self, category: str, delta: int, kind: str) -> None:
        if category not in self.current:
            raise AccountingError(f"unknown memory category {category!r}")
        value = self.current[category] + delta
        if value < 0:
            raise AccountingError(f"{category} balance would go negative ({value} bytes)")
        self.current[category] = value
        self.events.append((kind, category, abs(delta)))
        self.category_peaks[category] = max(self.category_peaks[category], value)
        total = sum(self.current.values())
        if total > self.peak_total:
            self.peak_total = total
            self.at_peak = dict(self.current)

    @property
    def total(self) -> int:
        return sum(self.current.values())


def account_memory(events: Iterable[tuple[str, str, int]]) -> MemoryAccountant:
    """Replay ``(kind, category, bytes)`` events, kind being 'alloc' or 'free'."""
    acc = MemoryAccountant()
    for kind, category, nbytes in events:
        if kind == "alloc":
            acc.allocate(category, nbytes)
        elif kind == "free":
            acc.free(category, nbytes)
        else:
            raise AccountingError(f"unknown event kind {kind!r}")
    return acc


def weight_bytes(model: EncoderModel) -> tuple[int, int]:
    """(frozen, trainable) bytes of the model's stored weights."""
    frozen = trainable = 0
    for _, p in model.named_parameters():
        if p.requires_grad:
            trainable += p.nbytes
        else:
            frozen += p.nbytes
    frozen += sum(q.nbytes for _, q in model.named_quantized())
    return frozen, trainable


# -- data -------------------------------------------------------------------


def encode_examples(examples: Sequence[QaExample], vocab: Vocab, max_len: int, doc_stride: int,
                    with_answers: bool) -> list[EncodedFeature]:
    feats: list[EncodedFeature] = []
    for ex in examples:
        ans = ex.answers[0] if (with_answers and ex.answers) else None
        feats.extend(tokenize_and_encode(
            ex.context, ex.question, vocab, max_len, doc_stride, example_id=ex.id,
            answer_start=ans.answer_start if ans else None, answer_text=ans.text if ans else None,
        ))
    return feats


def predict(model: EncoderModel, features: Sequence[EncodedFeature], batch_size: int = 64,
            max_answer_len: int = 30) -> dict[str, str]:
    """Best answer text per example id, taken across its windows."""
    was_training = model.training
    model.eval()
    per_example: dict[str, list] = {}
    try:
        with ad.no_grad():
            for i in range(0, len(features), batch_size):
                chunk = features[i:i + batch_size]
                batch = collate(chunk, with_labels=False)
                start, end = model(batch.input_ids, batch.attention_mask)
                for row, feat in enumerate(chunk):
                    n = len(feat)
                    try:
                        pred = decode_span(start.data[row, :n], end.data[row, :n], feat, max_answer_len)
                    except DecodeError:
                        # only reachable when a diverged model emits NaN logits
                        pred = Prediction(feat.example_id, "", 0, 0, -math.inf, feat.window_id)
                    per_example.setdefault(feat.example_id, []).append(pred)
    finally:
        model.train(was_training)
    return {k: decode_windows(v).text for k, v in per_example.items()}


def evaluate_model(model: EncoderModel, examples: Sequence[QaExample], vocab: Vocab, cfg: TrainConfig,
                   articles: Sequence[str] = PORTUGUESE_ARTICLES) -> tuple[EvalReport, dict[str, str]]:
    feats = encode_examples(examples, vocab, cfg.max_len, cfg.doc_stride, with_answers=False)
    preds = predict(model, feats, cfg.eval_batch_size, cfg.max_answer_len)
    return evaluate_dataset(preds, examples, articles), preds


# -- run ----------------------------------------------------------------------


@dataclass
class RunMetrics:
    status: str
    duration_s: float
    peak_bytes: int
    peak_by_category: dict[str, int]
    category_peaks: dict[str, int]
    loss_curve: list[float]
    epochs: list[dict] = field(default_factory=list)
    eval: EvalReport | None = None
    trainable_params: int = 0
    frozen_params: int = 0
    steps: int = 0
    message: str = ""

    @property
    def f1(self) -> float:
        return self.eval.f1 if self.eval is not None else 0.0

    @property
    def em(self) -> float:
        return self.eval.exact_match if self.eval is not None else 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["eval"] = self.eval.to_dict() if self.eval is not None else None
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def train_run(model: EncoderModel, train_examples: Sequence[QaExample], dev_examples: Sequence[QaExample],
              vocab: Vocab, cfg: TrainConfig, on_epoch: Callable[[dict], None] | None = None,
              articles: Sequence[str] = PORTUGUESE_ARTICLES) -> RunMetrics:
    """Fine-tune ``model`` in place and evaluate on ``dev_examples``.

    Divergence (non-finite or exploding loss/gradients) ends the run with
    status ``COLLAPSED`` instead of raising; the dev evaluation still runs.
    """
    t0 = time.perf_counter()
    feats = encode_examples(train_examples, vocab, cfg.max_len, cfg.doc_stride, with_answers=True)
    named = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    names = [n for n, _ in named]
    params = [p for _, p in named]
    opt = AdamW(params, cfg.beta1, cfg.beta2, cfg.eps)
    counts = count_trainable(model)

    mem = MemoryAccountant()
    frozen_b, trainable_b = weight_bytes(model)
    mem.allocate("frozen_weights", frozen_b)
    mem.allocate("trainable_weights", trainable_b)
    mem.allocate("optimizer_states", opt.state_bytes)
    grad_bytes = sum(p.nbytes for p in params)

    rng = np.random.default_rng(cfg.seed)
    steps_per_epoch = math.ceil(len(feats) / cfg.batch_size)
    total_steps = steps_per_epoch * cfg.epochs
    losses: list[float] = []
    epoch_logs: list[dict] = []
    status, message, step = "OK", "", 0
    first_loss: float | None = None
    model.train()

    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(feats))
        epoch_losses = []
        for b0 in range(0, len(order), cfg.batch_size):
            batch = collate([feats[i] for i in order[b0:b0 + cfg.batch_size]])
            model.zero_grad()
            loss = qa_loss(model, batch)
            value = loss.item()
            if first_loss is None:
                first_loss = value
            if not math.isfinite(value) or value > cfg.collapse_ratio * first_loss:
                status, message = "COLLAPSED", f"loss {value} at step {step + 1}"
                break
            tape = ad.Tape(loss)
            act = tape.saved_bytes
            mem.allocate("activations", act)
            ad.backward(loss, tape)
            mem.allocate("gradients", grad_bytes)
            mem.free("activations", act)
            del tape, loss
            clip_grad_norm(params, cfg.clip_norm)
            try:
                opt.step(lr_at(step, total_steps, cfg.lr, cfg.schedule), cfg.weight_decay, names)
            except NonFiniteGradientError as exc:
                status, message = "COLLAPSED", str(exc)
                mem.free("gradients", grad_bytes)
                break
            mem.free("gradients", grad_bytes)
            if not all(np.all(np.isfinite(p.data)) for p in params):
                status, message = "COLLAPSED", f"non-finite weights after step {step + 1}"
                break
            losses.append(value)
            epoch_losses.append(value)
            step += 1
        if status != "OK":
            log.warning("run collapsed: %s", message)
            break
        report, _ = evaluate_model(model, dev_examples, vocab, cfg, articles) if on_epoch else (None, None)
        entry = {
            "epoch": epoch,
            "loss": float(np.mean(epoch_losses)) if epoch_losses else float("nan"),
            "elapsed_s": round(time.perf_counter() - t0, 3),
            "peak_bytes_by_category": dict(mem.category_peaks),
        }
        if report is not None:
            entry.update(f1=round(report.f1, 2), em=round(report.exact_match, 2))
        epoch_logs.append(entry)
        if on_epoch:
            on_epoch(entry)

    final, _ = evaluate_model(model, dev_examples, vocab, cfg, articles)
    return RunMetrics(
        status=status,
        duration_s=time.perf_counter() - t0,
        peak_bytes=mem.peak_total,
        peak_by_category=dict(mem.at_peak),
        category_peaks=dict(mem.category_peaks),
        loss_curve=losses,
        epochs=epoch_logs,
        eval=final,
        trainable_params=counts.trainable,
        frozen_params=counts.frozen,
        steps=step,
        message=message,
    )
