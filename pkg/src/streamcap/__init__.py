"""Streaming dense video captioning with a factorized, segment-local text decoder."""

from .codec import CodecConfig, Event, Vocabulary
from .inference import DecodeConfig, StreamSession, temporal_nms
from .model import FactorizedCaptioner, ModelConfig, load_checkpoint, save_checkpoint
from .synth import SynthSpec, generate
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "CodecConfig",
    "DecodeConfig",
    "Event",
    "FactorizedCaptioner",
    "ModelConfig",
    "StreamSession",
    "SynthSpec",
    "TrainConfig",
    "Vocabulary",
    "generate",
    "load_checkpoint",
    "save_checkpoint",
    "temporal_nms",
    "train",
]
