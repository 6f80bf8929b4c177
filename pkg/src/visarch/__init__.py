"""visarch: conv/attention hybrid vision backbones on a small NCHW autodiff engine."""

from .analysis import ComplexityReport, complexity_report, count_macs, count_params, shape_table
from .attention import SCORE_MODES, AttentionParams, RelPosBiasTable, attention_logits
from .checkpoint import (
    BadMagicError,
    ChecksumError,
    CheckpointError,
    VersionError,
    checkpoint_load,
    checkpoint_save,
    model_from_checkpoint,
)
from .data import Dataset, augment_batch, synth_dataset
from .fp16 import F16Sample, OverflowReport, compare_modes, f16_round, scores_f16
from .models import (
    Model,
    ModelConfig,
    build,
    config_from_json,
    config_to_json,
    diff_configs,
    layer_plan,
    model_forward,
    preset,
    preset_names,
)
from .tensor import (
    GraphError,
    NonFiniteError,
    ParamStore,
    ShapeError,
    Tensor,
    backward,
    finite_diff_grad,
    layer_scope,
    no_grad,
)
from .train import (
    GradcheckReport,
    TrainConfig,
    TrainResult,
    cosine_lr,
    gradcheck,
    make_optimizer,
    train,
)

__all__ = [
    "AttentionParams",
    "BadMagicError",
    "ChecksumError",
    "CheckpointError",
    "ComplexityReport",
    "Dataset",
    "F16Sample",
    "GradcheckReport",
    "GraphError",
    "Model",
    "ModelConfig",
    "NonFiniteError",
    "OverflowReport",
    "ParamStore",
    "RelPosBiasTable",
    "SCORE_MODES",
    "ShapeError",
    "Tensor",
    "TrainConfig",
    "TrainResult",
    "VersionError",
    "attention_logits",
    "augment_batch",
    "backward",
    "build",
    "checkpoint_load",
    "checkpoint_save",
    "compare_modes",
    "complexity_report",
    "config_from_json",
    "config_to_json",
    "cosine_lr",
    "count_macs",
    "count_params",
    "diff_configs",
    "f16_round",
    "finite_diff_grad",
    "gradcheck",
    "layer_plan",
    "layer_scope",
    "make_optimizer",
    "model_forward",
    "model_from_checkpoint",
    "no_grad",
    "preset",
    "preset_names",
    "scores_f16",
    "shape_table",
    "synth_dataset",
    "train",
]
