"""Desk-scale dual-channel speech codec: RVQ tokens, two-stage training, ASR probing."""

from .audio import Waveform, wav_read, wav_write
from .model import CodecConfig, CodecModel
from .rvq import RVQConfig, ResidualVQ, TokenSequence, bitrate

__all__ = ["Waveform", "wav_read", "wav_write", "CodecConfig", "CodecModel", "RVQConfig",
           "ResidualVQ", "TokenSequence", "bitrate"]
__version__ = "0.1.0"
