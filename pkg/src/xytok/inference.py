"""WAV <-> token round trips with a trained (frozen) codec."""

from __future__ import annotations

import numpy as np
import torch

from .audio import Waveform
from .model import CodecModel
from .rvq import TokenSequence, bitrate


class CodecRunner:
    def __init__(self, model: CodecModel):
        self.model = model.eval()

    @property
    def sample_rate(self) -> int:
        return self.model.cfg.sample_rate

    @property
    def frame_rate(self) -> float:
        return self.model.cfg.token_rate

    @property
    def bitrate(self) -> float:
        if self.model.cfg.bypass_quantizer:
            return float("inf")
        return bitrate(self.model.cfg.rvq, self.frame_rate)

    def _check(self, wav: Waveform) -> None:
        if wav.sample_rate != self.sample_rate:
            raise ValueError(f"codec runs at {self.sample_rate} Hz, got {wav.sample_rate} Hz")

    @torch.no_grad()
    def _tokenize(self, wav: Waveform):
        self._check(wav)
        wave, _ = self.model.pad_wave(wav.tensor()[None])
        return self.model.tokenize(self.model.encode(self.model.mel(wave)))

    def encode(self, wav: Waveform) -> TokenSequence:
        if self.model.cfg.bypass_quantizer:
            raise ValueError("auto-encoder mode has no discrete tokens")
        tok = self._tokenize(wav)
        return TokenSequence(tok.codes[0].numpy(), self.frame_rate, self.model.cfg.rvq.codebook_size)

    @torch.no_grad()
    def decode(self, tokens: TokenSequence) -> Waveform:
        rvq = self.model.quantizer.rvq
        if tokens.num_layers != rvq.cfg.num_layers or tokens.codebook_size != rvq.cfg.codebook_size:
            raise ValueError("token file does not match the codec configuration")
        q = rvq.decode_codes(torch.as_tensor(tokens.codes)[None])
        x = self.model.decode_audio(q)[0]
        return Waveform(x.numpy(), self.sample_rate)

    @torch.no_grad()
    def resynthesize(self, wav: Waveform) -> Waveform:
        tok = self._tokenize(wav)
        x = self.model.acoustic_decoder(tok.features)[0].numpy()[: len(wav)]
        return Waveform(x, self.sample_rate)

    def quantized_embeddings(self, wav: Waveform) -> tuple[np.ndarray, float]:
        """Sum of selected code vectors per 12.5 Hz frame, trimmed to the signal."""
        tok = self._tokenize(wav)
        n = -(-len(wav) // self.model.cfg.samples_per_token)
        return tok.quantized[0, :n].numpy(), self.frame_rate
