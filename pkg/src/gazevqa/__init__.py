"""Gaze-grounded visual question answering: data, gaze RoIs, ClipCap+Adapter models, training and evaluation."""

__version__ = "0.1.0"

from .dataset import (
    BoundingBox,
    Dataset,
    DatasetStats,
    GazeVQASample,
    QuestionType,
    classify_question,
    compute_statistics,
    load_dataset,
    split_dataset,
)
from .decoder import GenerationConfig, PromptLayout, assemble_input, compute_loss, generate
from .evaluation import EvalReport, ablate, evaluate, similarity_score, vqa_accuracy
from .gaze_roi import Heatmap, binarize, crop, extract_roi, load_heatmap, save_heatmap
from .model_core import ClipCapModel, ModelConfig, Regime, build_model, count_parameters
from .training import TrainConfig, load_checkpoint, save_checkpoint, select_trainable, train

__all__ = [
    "BoundingBox", "ClipCapModel", "Dataset", "DatasetStats", "EvalReport", "GazeVQASample",
    "GenerationConfig", "Heatmap", "ModelConfig", "PromptLayout", "QuestionType", "Regime",
    "TrainConfig", "ablate", "assemble_input", "binarize", "build_model", "classify_question",
    "compute_loss", "compute_statistics", "count_parameters", "crop", "evaluate", "extract_roi",
    "generate", "load_checkpoint", "load_dataset", "load_heatmap", "save_checkpoint",
    "save_heatmap", "select_trainable", "similarity_score", "split_dataset", "train", "vqa_accuracy",
]
