"""Weakly supervised bag classification with attention pooling,
attention-driven virtual-bag augmentation, and patch-location pretext
losses, on a small self-contained autodiff engine."""

__version__ = "0.1.0"

from .augment import InstanceStore, VirtualBag, augmentation_schedule, generate_virtual_bags, harvest
from .data import Bag, DatasetSpec, Instance, generate_synthetic, read_bag, read_dataset, write_bag, write_dataset
from .errors import (ConfigError, ContractError, DimensionError, EmptyBagError,
                     FormatError, MilbagError, SliceGeometryError)
from .folds import FoldPlan, stratified_folds
from .layers import LayerParams, forward_layer, minmax_normalize
from .metrics import EvalReport, evaluate, roc_auc
from .model import (BagPrediction, MilModel, attention_pool, create_mil_model,
                    extract_features, load_mil_model, mil_loss, predict,
                    rescale_attention_by_slice, save_mil_model)
from .optim import AdamState, adam_step
from .pretext import PatchPair, SslHead, absolute_loss, build_pairs, relative_loss, total_loss
from .tensor import Tensor, backward, no_grad
from .train import TrainConfig, run_ablation, run_cv, synthetic_defaults, train_fold

__all__ = [
    "__version__",
    "AdamState", "Bag", "BagPrediction", "ConfigError", "ContractError",
    "DatasetSpec", "DimensionError", "EmptyBagError", "EvalReport", "FoldPlan",
    "FormatError", "Instance", "InstanceStore", "LayerParams", "MilModel",
    "MilbagError", "PatchPair", "SliceGeometryError", "SslHead", "Tensor",
    "TrainConfig", "VirtualBag", "absolute_loss", "adam_step",
    "attention_pool", "augmentation_schedule", "backward", "build_pairs",
    "create_mil_model", "evaluate", "extract_features", "forward_layer",
    "generate_synthetic", "generate_virtual_bags", "harvest", "load_mil_model",
    "mil_loss", "minmax_normalize", "no_grad", "predict", "read_bag",
    "read_dataset", "relative_loss", "rescale_attention_by_slice", "roc_auc",
    "run_ablation", "run_cv", "save_mil_model", "stratified_folds",
    "synthetic_defaults", "total_loss", "train_fold", "write_bag",
    "write_dataset",
]
