"""Hierarchical point-cloud semantic segmentation with per-level decoders,
coarse-to-fine guidance, cross-level consistency, and a prototype-based
auxiliary discrimination branch."""

from .losses import LossReport, loss_bis, loss_ces, loss_chc, loss_con, loss_total
from .metrics import MetricsReport, confusion_matrix, evaluate, miou
from .model import DTYPE, FeatureBundle, HierSegNet, ModelConfig
from .protobank import PrototypeBank, batch_prototypes, gini, imbalance_gate
from .scenegen import (
    ImbalanceProfile,
    Scene,
    augment,
    class_frequencies,
    generate_scene,
    load_dataset,
    load_scene,
    save_scene,
    write_dataset,
)
from .taxonomy import (
    HierarchySpec,
    MappingMatrix,
    all_mappings,
    build_mapping,
    consistency_rate,
    derive_mapping_from_labels,
    load_builtin,
    project_labels_down,
)
from .trainer import (
    FitResult,
    TrainConfig,
    ablate,
    cosine_lr,
    fit,
    load_checkpoint,
    make_bank,
    make_model,
    make_optimizer,
    restore_model,
    save_checkpoint,
    train_step,
)

__version__ = "0.1.0"
