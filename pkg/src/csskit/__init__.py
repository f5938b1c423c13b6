"""Simulated-conversation benchmark for continuous speech separation."""

from .signal import SAMPLE_RATE, Spectrogram, StftConfig, Waveform, istft, read_wav, si_snr, stft, write_wav

__all__ = ["SAMPLE_RATE", "Spectrogram", "StftConfig", "Waveform", "istft", "read_wav",
           "si_snr", "stft", "write_wav"]
__version__ = "0.1.0"
