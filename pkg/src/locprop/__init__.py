"""Class-agnostic object proposals scored by localization quality."""

from .config import ExperimentConfig, load_config
from .evaluation import EvalReport, ImageEval, ar_at_k, auc, average_precision, evaluate
from .geometry import build_anchor_grid, centerness, dice, iou, nms
from .inference import InferenceSettings, Proposal, detect, fuse_scores, generate_proposals
from .model import (
    TABLE3_CONFIGS,
    TABLE4_CONFIGS,
    HeadConfig,
    ModelConfig,
    ProposalNetwork,
    load_checkpoint,
    save_checkpoint,
)
from .targets import SAMPLER_PRESETS, SamplerConfig

__version__ = "0.1.0"

__all__ = [
    "EvalReport",
    "ExperimentConfig",
    "HeadConfig",
    "ImageEval",
    "InferenceSettings",
    "ModelConfig",
    "Proposal",
    "ProposalNetwork",
    "SAMPLER_PRESETS",
    "SamplerConfig",
    "TABLE3_CONFIGS",
    "TABLE4_CONFIGS",
    "ar_at_k",
    "auc",
    "average_precision",
    "build_anchor_grid",
    "centerness",
    "detect",
    "dice",
    "evaluate",
    "fuse_scores",
    "generate_proposals",
    "iou",
    "load_checkpoint",
    "load_config",
    "nms",
    "save_checkpoint",
]
