"""Log-mel front-end and SpecAugment.

Framing is centered with reflective padding, so an utterance of ``N``
samples yields ``ceil(N / hop)`` frames. The window is a periodic Hann
window of ``window_ms`` placed in the middle of an ``n_fft`` buffer.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Literal

import numpy as np


def hz_to_mel(hz):
    """HTK mel scale."""
    return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=np.float64) / 700.0)


def mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


@dataclass(frozen=True)
class MelConfig:
    sample_rate_hz: int = 16000
    window_ms: float = 25.0
    hop_ms: float = 10.0
    n_fft: int = 512
    n_mels: int = 80
    f_min_hz: float = 0.0
    f_max_hz: float = 8000.0
    log_floor: float = 1e-5

    def __post_init__(self):
        if self.sample_rate_hz <= 0:
            raise ValueError("mel.sample_rate_hz must be positive")
        if self.f_max_hz > self.sample_rate_hz / 2:
            raise ValueError(
                f"mel.f_max_hz={self.f_max_hz} exceeds Nyquist ({self.sample_rate_hz / 2})"
            )
        if not 0 <= self.f_min_hz < self.f_max_hz:
            raise ValueError("mel.f_min_hz must satisfy 0 <= f_min_hz < f_max_hz")
        if self.n_mels < 1:
            raise ValueError("mel.n_mels must be >= 1")
        if self.hop_ms <= 0 or self.hop_ms > self.window_ms:
            raise ValueError("mel.hop_ms must satisfy 0 < hop_ms <= window_ms")
        if self.n_fft < self.win_length:
            raise ValueError(
                f"mel.n_fft={self.n_fft} is shorter than the window ({self.win_length} samples)"
            )
        if self.log_floor <= 0:
            raise ValueError("mel.log_floor must be positive")

    @property
    def win_length(self) -> int:
        return int(round(self.sample_rate_hz * self.window_ms / 1000.0))

    @property
    def hop_length(self) -> int:
        return int(round(self.sample_rate_hz * self.hop_ms / 1000.0))

    @property
    def min_value(self) -> np.float32:
        """Smallest representable log-mel value, ``log(log_floor)`` in float32."""
        return np.float32(math.log(self.log_floor))

    def config_hash(self) -> bytes:
        """8-byte digest identifying these extraction parameters."""
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).digest()[:8]


@dataclass
class MelSpectrogram:
    """Log-mel energies laid out as ``[n_mels, L]`` float32."""

    values: np.ndarray
    config: MelConfig = field(default_factory=MelConfig)

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float32)
        if self.values.ndim != 2:
            raise ValueError(f"expected a 2-D [n_mels, L] matrix, got shape {self.values.shape}")
        if self.values.shape[0] != self.config.n_mels:
            raise ValueError(
                f"spectrogram has {self.values.shape[0]} bands, config says {self.config.n_mels}"
            )
        if self.values.shape[1] < 1:
            raise ValueError("spectrogram must have at least one frame")

    @property
    def n_mels(self) -> int:
        return self.values.shape[0]

    @property
    def L(self) -> int:
        return self.values.shape[1]

    def with_values(self, values: np.ndarray) -> "MelSpectrogram":
        return MelSpectrogram(values, self.config)


def build_mel_filterbank(config: MelConfig) -> np.ndarray:
    """Triangular filters, peak 1, evenly spaced on the HTK mel scale.

    Returns a ``[n_mels, n_fft // 2 + 1]`` matrix. Filter ``k`` rises from
    edge ``k`` to its center at edge ``k + 1`` and falls to zero at edge
    ``k + 2``, where the ``n_mels + 2`` edges span ``[f_min, f_max]``.
    """
    if config.f_max_hz > config.sample_rate_hz / 2:
        raise ValueError("f_max_hz exceeds Nyquist")
    n_bins = config.n_fft // 2 + 1
    bin_hz = np.arange(n_bins) * config.sample_rate_hz / config.n_fft
    edges_mel = np.linspace(hz_to_mel(config.f_min_hz), hz_to_mel(config.f_max_hz), config.n_mels + 2)
    edges_hz = mel_to_hz(edges_mel)

    lower, center, upper = edges_hz[:-2, None], edges_hz[1:-1, None], edges_hz[2:, None]
    rising = (bin_hz[None, :] - lower) / (center - lower)
    falling = (upper - bin_hz[None, :]) / (upper - center)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    # round-trip error in mel_to_hz can leave a ~1e-15 sliver at an edge bin
    fb[fb < 1e-9] = 0.0
    return fb


def filter_center_hz(config: MelConfig) -> np.ndarray:
    edges = mel_to_hz(np.linspace(hz_to_mel(config.f_min_hz), hz_to_mel(config.f_max_hz), config.n_mels + 2))
    return edges[1:-1]


def _frame_signal(audio: np.ndarray, config: MelConfig) -> np.ndarray:
    hop = config.hop_length
    n_frames = -(-len(audio) // hop)
    half = config.n_fft // 2
    padded = np.pad(audio, half, mode="reflect") if len(audio) > 1 else np.pad(audio, half, mode="edge")
    starts = np.arange(n_frames) * hop
    idx = starts[:, None] + np.arange(config.n_fft)[None, :]
    return padded[idx]


def _window(config: MelConfig) -> np.ndarray:
    win = np.zeros(config.n_fft)
    n = config.win_length
    offset = (config.n_fft - n) // 2
    win[offset:offset + n] = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)
    return win


def compute_log_mel(audio, config: MelConfig | None = None, sample_rate_hz: int | None = None) -> MelSpectrogram:
    """Log-mel spectrogram of a mono PCM signal (float samples)."""
    config = config or MelConfig()
    if sample_rate_hz is not None and sample_rate_hz != config.sample_rate_hz:
        raise ValueError(f"audio is {sample_rate_hz} Hz but config expects {config.sample_rate_hz} Hz")
    audio = np.asarray(audio, dtype=np.float64).reshape(-1)
    if audio.size == 0:
        raise ValueError("audio is empty")
    if np.isnan(audio).any():
        raise ValueError("audio contains NaN samples")

    frames = _frame_signal(audio, config) * _window(config)[None, :]
    power = np.abs(np.fft.rfft(frames, n=config.n_fft, axis=1)) ** 2
    energy = build_mel_filterbank(config) @ power.T
    values = np.log(np.maximum(energy, config.log_floor))
    return MelSpectrogram(values.astype(np.float32), config)


@dataclass(frozen=True)
class SpecAugmentPolicy:
    """Masking policy. ``max_time_ratio`` additionally caps time masks to a
    fraction of the utterance length."""

    n_freq_masks: int = 2
    max_freq_width: int = 27
    n_time_masks: int = 2
    max_time_width: int = 40
    max_time_ratio: float | None = 0.05
    fill: Literal["zero", "per-utterance-mean"] = "zero"

    def __post_init__(self):
        for name in ("n_freq_masks", "max_freq_width", "n_time_masks", "max_time_width"):
            if getattr(self, name) < 0:
                raise ValueError(f"specaugment.{name} must be >= 0")
        if self.fill not in ("zero", "per-utterance-mean"):
            raise ValueError(f"specaugment.fill must be 'zero' or 'per-utterance-mean', got {self.fill!r}")

    @classmethod
    def disabled(cls) -> "SpecAugmentPolicy":
        return cls(0, 0, 0, 0, None)


def spec_augment(mel: MelSpectrogram, policy: SpecAugmentPolicy, seed: int) -> MelSpectrogram:
    values = mel.values
    n_mels, length = values.shape
    out = values.copy()
    fill = np.float32(0.0) if policy.fill == "zero" else np.float32(values.mean())
    rng = np.random.default_rng(seed)

    freq_cap = min(policy.max_freq_width, n_mels)
    for _ in range(policy.n_freq_masks):
        width = int(rng.integers(0, freq_cap + 1))
        start = int(rng.integers(0, n_mels - width + 1))
        out[start:start + width, :] = fill

    time_cap = min(policy.max_time_width, length)
    if policy.max_time_ratio is not None:
        time_cap = min(time_cap, int(policy.max_time_ratio * length))
    for _ in range(policy.n_time_masks):
        width = int(rng.integers(0, time_cap + 1))
        start = int(rng.integers(0, length - width + 1))
        out[:, start:start + width] = fill

    return mel.with_values(out)
