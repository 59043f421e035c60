"""Desk-scale lab for quantized length-adaptive transformer inference.

Submodules: autodiff (reverse-mode tape), kernels (numba/numpy backends),
model (encoder + drop-and-restore forward), data (synthetic span task),
training (fine-tune / distill / length-adaptive), search (Pareto evolution),
quant (int8 post-training quantization), costmodel (closed-form MACs and
bytes), checkpoint (binary model files), pipeline (end-to-end runs), cli.
"""

from .checkpoint import load_checkpoint, save_checkpoint
from .costmodel import flops_count, preset, size_estimate
from .data import GenSettings, gen_dataset
from .model import (
    LengthConfig,
    ModelConfig,
    ModelParams,
    forward_adaptive,
    forward_full,
    init_params,
)
from .pipeline import RunConfig, run_pipeline
from .quant import forward_quantized_adaptive, quantize_model
from .search import SearchConfig, evolutionary_search, pick_for_budget
from .training import (
    DistillConfig,
    TrainConfig,
    distill_train,
    evaluate,
    finetune_supervised,
    train_drop_and_restore,
)

__version__ = "0.1.0"

__all__ = [
    "DistillConfig",
    "GenSettings",
    "LengthConfig",
    "ModelConfig",
    "ModelParams",
    "RunConfig",
    "SearchConfig",
    "TrainConfig",
    "__version__",
    "distill_train",
    "evaluate",
    "evolutionary_search",
    "finetune_supervised",
    "flops_count",
    "forward_adaptive",
    "forward_full",
    "forward_quantized_adaptive",
    "gen_dataset",
    "init_params",
    "load_checkpoint",
    "pick_for_budget",
    "preset",
    "quantize_model",
    "run_pipeline",
    "save_checkpoint",
    "size_estimate",
    "train_drop_and_restore",
]
