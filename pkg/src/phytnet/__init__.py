"""Small configurable CNNs (PhytNet family) on a numpy autodiff core.

Modules: ``tensor``/``ops`` (autodiff and primitives), ``nn`` (layers and the
bottleneck block), ``arch`` (models, cost counters, checkpoints), ``data``,
``train``, ``crossval``, ``metrics``, ``gradcam``, ``gp`` and ``sweep``.
"""
from .arch import (
    ModelConfig,
    build_model,
    build_resnet18_reference,
    cost_report,
    count_flops,
    count_params,
    forward,
    load_checkpoint,
    save_checkpoint,
)
from .crossval import CVReport, cross_validate, holdout
from .data import kfold_split, load_dataset, synthesize_dataset
from .errors import ConfigurationError, DataError, FoldError, NumericalError, UsageError
from .gradcam import grad_cam, overlay
from .sweep import SweepSpace, constraint_gate, run_sweep
from .tensor import Tensor, backward, no_grad
from .train import TrainConfig, train

__version__ = "0.1.0"
