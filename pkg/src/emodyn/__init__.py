"""Emotion-dynamics models for conversation on a from-scratch autodiff core."""

from .corpus import Conversation, PackedSequence, Utterance, Vocab
from .encoder import Encoder, EncoderConfig
from .metrics import EvalReport, evaluate
from .models import EmotionModel, ModelConfig
from .trainer import TrainConfig, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "Conversation",
    "EmotionModel",
    "Encoder",
    "EncoderConfig",
    "EvalReport",
    "ModelConfig",
    "PackedSequence",
    "TrainConfig",
    "Utterance",
    "Vocab",
    "evaluate",
    "load_checkpoint",
    "save_checkpoint",
    "train",
]
