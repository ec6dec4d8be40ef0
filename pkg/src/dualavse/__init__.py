"""Dual-attention audio-visual speech enhancement at desk scale."""

from .config import CorpusConfig, ModelConfig, RunConfig, StftConfig, TrainSchedule
from .dsp import ComplexMask, ComplexSpectrogram, Waveform
from .model import DualAVSE

__version__ = "0.1.0"

__all__ = [
    "ComplexMask", "ComplexSpectrogram", "CorpusConfig", "DualAVSE", "ModelConfig",
    "RunConfig", "StftConfig", "TrainSchedule", "Waveform",
]
