"""Reasoning- and modality-aware structured pruning of a toy multimodal decoder."""

from .allocator import PruningConfig, PruningPlan, build_plan, dynamic_gamma
from .attribution import (ImportanceTable, global_attribution, magnitude_scores,
                          normalize_importance, pivot_attribution)
from .calibration import (CalibrationSample, Corpus, generate_synthetic_corpus, load_corpus,
                          save_corpus, train)
from .checkpoint import load_checkpoint, save_checkpoint
from .evaluation import compare_methods, kl_report, perplexity, retention_report, zero_out_ablation
from .model import (ModelConfig, ModelWeights, StructuralUnit, UnitKind, apply_prune, backward,
                    enumerate_units, forward, init_weights, loss, masked_forward)
from .pivots import PivotMask, detect_pivots, random_pivots
from .profiling import LayerProfile, compute_cmds, compute_sensitivity, normalize_profiles
from .tokenizer import detokenize, tokenize

__version__ = "0.1.0"

__all__ = [
    "CalibrationSample",
    "Corpus",
    "ImportanceTable",
    "LayerProfile",
    "ModelConfig",
    "ModelWeights",
    "PivotMask",
    "PruningConfig",
    "PruningPlan",
    "StructuralUnit",
    "UnitKind",
    "apply_prune",
    "backward",
    "build_plan",
    "compare_methods",
    "compute_cmds",
    "compute_sensitivity",
    "detect_pivots",
    "detokenize",
    "dynamic_gamma",
    "enumerate_units",
    "forward",
    "generate_synthetic_corpus",
    "global_attribution",
    "init_weights",
    "kl_report",
    "load_checkpoint",
    "load_corpus",
    "loss",
    "magnitude_scores",
    "masked_forward",
    "normalize_importance",
    "normalize_profiles",
    "perplexity",
    "pivot_attribution",
    "random_pivots",
    "retention_report",
    "save_checkpoint",
    "save_corpus",
    "tokenize",
    "train",
    "zero_out_ablation",
]
