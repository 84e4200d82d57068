"""Desk-scale parameter-efficient fine-tuning for extractive QA.

LoRA, DoRA and their NF4-quantized variants run on a numpy micro encoder.
Runs are scored SQuAD-style and compared through a grid benchmark.
"""

from .adapters import count_trainable, init_adapter, merge_lora
from .autodiff import Tensor, backward
from .metrics import exact_match, token_f1
from .model import METHODS, PRESETS, attach_adapters, build_model, preset_config
from .quant import bits_per_parameter, dequantize, quantize_nf4
from .train import TrainConfig, train_run

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "backward",
    "count_trainable",
    "init_adapter",
    "merge_lora",
    "exact_match",
    "token_f1",
    "METHODS",
    "PRESETS",
    "attach_adapters",
    "build_model",
    "preset_config",
    "bits_per_parameter",
    "dequantize",
    "quantize_nf4",
    "TrainConfig",
    "train_run",
]
