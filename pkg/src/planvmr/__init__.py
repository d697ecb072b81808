"""Plan-grounded conversational video moment retrieval.

Core pieces: the plan/dialogue data model, the retrieval head with its
contrastive trainer, candidate moment extraction, evaluation metrics and
the dataset build pipeline. ``planvmr.kernels`` reports whether the
compiled kernels are in use.
"""

__version__ = "0.1.0"

from .errors import (DataError, DegenerateInputError, DivergenceError, NumericalError, PlanVMRError,
                     StageError)
from .extraction import ExtractionParams, Method, MomentCandidate, extract_adjusted, extract_firm, extract_topk, midframe_expand
from .metrics import rouge_l, recall_at_k, temporal_iou
from .plan_model import Action, Dialogue, FrameInterval, Plan, Turn, TurnType, load_corpus
from .retrieval import RetrievalConfig, RetrievalHead, rope_encode

__all__ = [
    "Action", "DataError", "DegenerateInputError", "Dialogue", "DivergenceError", "ExtractionParams",
    "FrameInterval", "Method", "MomentCandidate", "NumericalError", "Plan", "PlanVMRError",
    "RetrievalConfig", "RetrievalHead", "StageError", "Turn", "TurnType", "extract_adjusted",
    "extract_firm", "extract_topk", "fixture_path", "load_corpus", "midframe_expand", "recall_at_k",
    "rope_encode", "rouge_l", "temporal_iou",
]


def fixture_path():
    """Directory of the bundled 5-plan corpus fixture."""
    from pathlib import Path

    return Path(__file__).parent / "fixtures" / "tiny5"
