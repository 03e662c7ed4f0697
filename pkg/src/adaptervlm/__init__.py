"""adaptervlm: a toy adapter-bridged vision-language decoder.

A frozen decoder stack gains bottleneck image adapters and a selective
parameter-activation policy, trains in two stages on synthetic
image-caption pairs, and ships a rubric scoring engine for the
four-benchmark evaluation.
"""
from .adapter import AdapterWeights, adapter_forward, adapter_param_count, init_adapter
from .model import BlockWeights, ConfigError, Model, ModelConfig
from .policy import ParamPolicy, apply_policy, assert_frozen_unchanged, build_policy
from .scoring import (BenchmarkReport, ScoreSheet, ScoreSheetError,
                      benchmark_average, overall_score, render_report,
                      validate_scoresheet)
from .tensor import ShapeError, Tensor, gelu, rms_norm, silu
from .training import (AdamW, Checkpoint, CheckpointError, TrainConfig,
                       load_checkpoint, lr_at, save_checkpoint,
                       train_stage1, train_stage2)

__version__ = "0.1.0"

__all__ = [
    "AdamW", "AdapterWeights", "BenchmarkReport", "BlockWeights", "Checkpoint",
    "CheckpointError", "ConfigError", "Model", "ModelConfig", "ParamPolicy",
    "ScoreSheet", "ScoreSheetError", "ShapeError", "Tensor", "TrainConfig",
    "adapter_forward", "adapter_param_count", "apply_policy",
    "assert_frozen_unchanged", "benchmark_average", "build_policy", "gelu",
    "init_adapter", "load_checkpoint", "lr_at", "overall_score",
    "render_report", "rms_norm", "save_checkpoint", "silu", "train_stage1",
    "train_stage2", "validate_scoresheet",
]
