"""Convolutional objectness reranking for bottom-up object proposals."""

__version__ = "0.1.0"

from .errors import (CompositionError, ConfigError, DataError, DeepBoxError, DimensionError, DivergenceError,
                     GeometryError, LabelError, SamplingExhausted, StateError)
from .geometry import Box, PerturbConfig, clip_to_image, iou, iou_matrix, perturb_gt
from .netdef import NetConfig, NetParams, build_net, load_checkpoint, save_checkpoint, score_crops
from .roipool import RoIGrid, ScaleSet, forward_objectness_fast, roi_maxpool
from .sampler import SamplerConfig, compose_batch, gen_sliding_windows, label_boxes
from .trainer import TrainSchedule, lr_at, train_stage
from .rerank import rerank, score_consistency_check
from .evalkit import auc, evaluate, proposals_for_recall, recall_at_k, recall_vs_iou
from .dataio import Dataset, ProposalSet, SynthConfig, baseline_propose, gen_synthetic

__all__ = [
    "Box", "PerturbConfig", "iou", "iou_matrix", "clip_to_image", "perturb_gt",
    "NetConfig", "NetParams", "build_net", "save_checkpoint", "load_checkpoint", "score_crops",
    "ScaleSet", "RoIGrid", "roi_maxpool", "forward_objectness_fast",
    "SamplerConfig", "gen_sliding_windows", "label_boxes", "compose_batch",
    "TrainSchedule", "lr_at", "train_stage",
    "rerank", "score_consistency_check",
    "recall_at_k", "auc", "recall_vs_iou", "proposals_for_recall", "evaluate",
    "Dataset", "ProposalSet", "SynthConfig", "gen_synthetic", "baseline_propose",
    "DeepBoxError", "GeometryError", "DimensionError", "LabelError", "StateError", "ConfigError",
    "SamplingExhausted", "CompositionError", "DivergenceError", "DataError",
]
