"""Ante-hoc concept-based explainable image classifiers and their evaluation suite."""
from .data import ConceptDataset, SyntheticSpec, batches, generate_synthetic
from .model import (
    AnteHocModel,
    ComponentCounts,
    ForwardBundle,
    LossWeights,
    ModelConfig,
    build_model,
    extract_concepts,
    forward_full,
    forward_task,
    load_checkpoint,
    parameter_counts,
    predict_from_concepts,
    reconstruct,
    save_checkpoint,
)
from .training import TrainConfig, fit

__version__ = "0.1.0"
