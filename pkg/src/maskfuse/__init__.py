"""Unified multimodal masked discrete diffusion at desk scale."""

__version__ = "0.1.0"

from maskfuse.vocab import JointVocab, ModalityLayout, MaskedSequence, build_vocab
from maskfuse.schedule import ScheduleKind, eval_schedule, loss_weight

__all__ = [
    "JointVocab",
    "ModalityLayout",
    "MaskedSequence",
    "build_vocab",
    "ScheduleKind",
    "eval_schedule",
    "loss_weight",
    "__version__",
]
