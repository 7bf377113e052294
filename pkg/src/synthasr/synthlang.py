"""A deterministic synthetic language standing in for a multi-speaker TTS model.

Every token owns a spectro-temporal stamp. An utterance is the concatenation
of its tokens' stamps, time-stretched by a seeded duration jitter and passed
through a speaker transform. Two renderings share that layout:

* ``render_real`` adds pitch-dependent harmonic ripple and noise, the kind of
  fine detail present in spectrograms of recorded speech;
* ``render_blurry`` Gaussian-smooths the clean layout and omits the detail,
  like the over-smoothed output of a regression-trained TTS model.

Corpora of two text domains are drawn from bigram grammars.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .mel import MelConfig, MelSpectrogram

_CONSONANTS = "bdgkmnprstvzfhlwjc"
_VOWELS = "aeiou"


def derive_seed(*parts: int) -> int:
    """Deterministic 32-bit seed from a tuple of integers."""
    return int(np.random.SeedSequence([int(p) & 0xFFFFFFFF for p in parts]).generate_state(1)[0])


def token_names(vocab_size: int) -> list[str]:
    if vocab_size > len(_CONSONANTS) * len(_VOWELS):
        raise ValueError(f"vocab_size={vocab_size} exceeds the syllable inventory")
    return [_CONSONANTS[k // len(_VOWELS)] + _VOWELS[k % len(_VOWELS)] for k in range(vocab_size)]


@dataclass(frozen=True)
class SynthConfig:
    vocab_size: int = 24
    base_frames: int = 8
    n_mels: int = 80
    language_seed: int = 1234
    duration_jitter: float = 0.25
    snr_db: float | None = 20.0
    detail_amplitude: float = 0.6
    blur_sigma_freq: float = 1.5
    blur_sigma_time: float = 1.5
    pitch_shift_range: tuple[float, float] = (-2.0, 2.0)
    energy_scale_range: tuple[float, float] = (0.5, 2.0)
    formant_tilt_range: tuple[float, float] = (-1.0, 1.0)

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ValueError("synthlang.vocab_size must be >= 2")
        if self.base_frames < 2:
            raise ValueError("synthlang.base_frames must be >= 2")
        if not 0 <= self.duration_jitter < 1:
            raise ValueError("synthlang.duration_jitter must be in [0, 1)")
        lo, hi = self.energy_scale_range
        if not 0 < lo <= hi:
            raise ValueError("synthlang.energy_scale_range must be positive and ordered")
        if self.blur_sigma_freq < 0 or self.blur_sigma_time < 0:
            raise ValueError("synthlang blur sigmas must be >= 0")


@dataclass(frozen=True)
class SpeakerEmbedding:
    """``vector = (pitch shift, energy scale, formant tilt)``."""

    vector: tuple[float, float, float]

    def __post_init__(self):
        if not all(np.isfinite(self.vector)):
            raise ValueError("speaker embedding must be finite")
        if self.vector[1] <= 0:
            raise ValueError("speaker energy scale must be positive")

    @classmethod
    def identity(cls) -> "SpeakerEmbedding":
        return cls((0.0, 1.0, 0.0))

    @property
    def pitch_shift_bins(self) -> int:
        return int(round(self.vector[0]))

    @property
    def energy_scale(self) -> float:
        return self.vector[1]

    @property
    def formant_tilt(self) -> float:
        return self.vector[2]


@dataclass
class DomainGrammar:
    """Bigram text model: first token from ``start_probs``, then ``transitions``."""

    transitions: np.ndarray
    min_len: int
    max_len: int
    start_probs: np.ndarray | None = None

    def __post_init__(self):
        self.transitions = np.asarray(self.transitions, dtype=np.float64)
        v = self.transitions.shape[0]
        if self.transitions.shape != (v, v):
            raise ValueError("transition table must be square")
        if (self.transitions < 0).any() or not np.allclose(self.transitions.sum(axis=1), 1.0, atol=1e-9, rtol=0):
            raise ValueError("transition rows must be non-negative and sum to 1")
        if self.start_probs is None:
            self.start_probs = np.full(v, 1.0 / v)
        self.start_probs = np.asarray(self.start_probs, dtype=np.float64)
        if not np.isclose(self.start_probs.sum(), 1.0, atol=1e-9):
            raise ValueError("start_probs must sum to 1")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError("grammar lengths must satisfy 1 <= min_len <= max_len")

    @property
    def vocab_size(self) -> int:
        return self.transitions.shape[0]


def make_domain_grammar(domain: str, vocab_size: int = 24, seed: int = 7) -> DomainGrammar:
    """The two desk-scale text domains.

    Domain ``A`` mostly uses the lower two thirds of the inventory; domain
    ``B`` favors the upper two thirds, so tokens frequent in B are rare in A.
    """
    if domain not in ("A", "B"):
        raise ValueError(f"unknown domain {domain!r} (expected 'A' or 'B')")
    rng = np.random.default_rng(derive_seed(seed, ord(domain)))
    v = vocab_size
    split_lo, split_hi = v // 3, (2 * v) // 3
    weights = np.ones(v)
    if domain == "A":
        weights[split_hi:] = 0.02
        lengths = (4, 9)
    else:
        weights[:split_lo] = 0.05
        lengths = (3, 8)
    # each token prefers a handful of successors
    affinity = rng.gamma(0.4, size=(v, v)) + 1e-3
    np.fill_diagonal(affinity, affinity.diagonal() * 0.2)
    table = affinity * weights[None, :]
    table /= table.sum(axis=1, keepdims=True)
    start = weights / weights.sum()
    return DomainGrammar(table, lengths[0], lengths[1], start)


def sample_text(grammar: DomainGrammar, seed: int) -> list[int]:
    rng = np.random.default_rng(seed)
    length = int(rng.integers(grammar.min_len, grammar.max_len + 1))
    v = grammar.vocab_size
    tokens = [int(rng.choice(v, p=grammar.start_probs))]
    for _ in range(length - 1):
        tokens.append(int(rng.choice(v, p=grammar.transitions[tokens[-1]])))
    return tokens


class SynthLanguage:
    """Token inventory plus the real and blurry renderers.

    The renderer is frozen: nothing here is trainable, and
    ``parameter_digest`` fingerprints the token stamps.
    """

    def __init__(self, config: SynthConfig | None = None):
        self.config = config or SynthConfig()
        self.mel_config = MelConfig(n_mels=self.config.n_mels)
        self.names = token_names(self.config.vocab_size)
        self._index = {name: k for k, name in enumerate(self.names)}
        self.patterns = self._make_patterns()

    # -- inventory ---------------------------------------------------------

    def _make_patterns(self) -> np.ndarray:
        cfg = self.config
        rng = np.random.default_rng(cfg.language_seed)
        n, f = cfg.n_mels, cfg.base_frames
        bins = np.arange(n, dtype=np.float64)[:, None]
        frames = np.arange(f, dtype=np.float64)[None, :]
        background = -7.0 + 1.5 * bins / max(n - 1, 1)
        patterns = np.empty((cfg.vocab_size, n, f))
        for k in range(cfg.vocab_size):
            p = np.repeat(background, f, axis=1)
            n_formants = int(rng.integers(2, 4))
            centers = np.sort(rng.uniform(0.08 * n, 0.92 * n, n_formants))
            for c in centers:
                glide = rng.uniform(-0.06 * n, 0.06 * n)
                width = rng.uniform(1.2, 2.5)
                height = rng.uniform(4.0, 6.0)
                track = c + glide * (frames / (f - 1) - 0.5)
                p = p + height * np.exp(-0.5 * ((bins - track) / width) ** 2)
            kind = k % 3
            if kind == 1:
                # fricative onset: broadband high band for the first half
                band = bins >= rng.uniform(0.55, 0.75) * n
                p[:, : f // 2] += 3.0 * band
            elif kind == 2:
                # plosive: short closure then a burst
                closure = max(1, f // 4)
                p[:, :closure] = background - 1.0
                p[:, closure] += 3.5
            patterns[k] = p
        return patterns.astype(np.float32)

    def parameter_digest(self) -> str:
        import hashlib

        return hashlib.sha256(self.patterns.tobytes()).hexdigest()

    def tokenize(self, text: str) -> list[int]:
        try:
            return [self._index[w] for w in text.split()]
        except KeyError as exc:
            raise ValueError(f"unknown token {exc.args[0]!r}") from None

    def detokenize(self, tokens: Sequence[int]) -> str:
        return " ".join(self.names[t] for t in tokens)

    # -- speakers ----------------------------------------------------------

    def sample_speaker(self, seed: int) -> SpeakerEmbedding:
        cfg = self.config
        rng = np.random.default_rng(seed)
        pitch = rng.uniform(*cfg.pitch_shift_range)
        energy = rng.uniform(*cfg.energy_scale_range)
        tilt = rng.uniform(*cfg.formant_tilt_range)
        return SpeakerEmbedding((float(pitch), float(energy), float(tilt)))

    # -- rendering ---------------------------------------------------------

    def _check_tokens(self, tokens: Sequence[int]) -> None:
        if len(tokens) == 0:
            raise ValueError("text must be non-empty")
        for t in tokens:
            if not 0 <= int(t) < self.config.vocab_size:
                raise ValueError(f"unknown token id {t}")

    def durations(self, tokens: Sequence[int], seed: int) -> np.ndarray:
        cfg = self.config
        rng = np.random.default_rng(seed)
        stretch = 1.0 + rng.uniform(-cfg.duration_jitter, cfg.duration_jitter, len(tokens))
        return np.maximum(1, np.rint(cfg.base_frames * stretch)).astype(int)

    def _layout(self, tokens: Sequence[int], speaker: SpeakerEmbedding, seed: int) -> np.ndarray:
        self._check_tokens(tokens)
        base = self.config.base_frames
        pieces = []
        for t, d in zip(tokens, self.durations(tokens, seed)):
            pattern = self.patterns[t].astype(np.float64)
            if d != base:
                pos = np.linspace(0.0, base - 1, d)
                lo = np.floor(pos).astype(int)
                hi = np.minimum(lo + 1, base - 1)
                frac = pos - lo
                pattern = pattern[:, lo] * (1 - frac) + pattern[:, hi] * frac
            pieces.append(pattern)
        clean = np.concatenate(pieces, axis=1)
        return self._speaker_transform(clean, speaker)

    def _speaker_transform(self, x: np.ndarray, speaker: SpeakerEmbedding) -> np.ndarray:
        k = speaker.pitch_shift_bins
        if k > 0:
            x = np.concatenate([np.repeat(x[:1], k, axis=0), x[:-k]], axis=0)
        elif k < 0:
            x = np.concatenate([x[-k:], np.repeat(x[-1:], -k, axis=0)], axis=0)
        n = x.shape[0]
        ramp = np.arange(n, dtype=np.float64)[:, None] / max(n - 1, 1) - 0.5
        return x + (np.log(speaker.energy_scale) + speaker.formant_tilt * ramp)

    def _finish(self, values: np.ndarray) -> MelSpectrogram:
        floor = float(self.mel_config.min_value)
        return MelSpectrogram(np.maximum(values, floor).astype(np.float32), self.mel_config)

    def render_real(self, tokens: Sequence[int], speaker: SpeakerEmbedding, seed: int) -> MelSpectrogram:
        cfg = self.config
        clean = self._layout(tokens, speaker, seed)
        out = clean
        rng = np.random.default_rng(derive_seed(seed, 1))
        if cfg.detail_amplitude > 0:
            # voiced harmonic ripple; period along frequency follows pitch
            period = 3.0 + 0.5 * (speaker.vector[0] - cfg.pitch_shift_range[0])
            bins = np.arange(clean.shape[0], dtype=np.float64)[:, None]
            voiced = 1.0 / (1.0 + np.exp(-2.0 * (clean - clean.mean() - 1.0)))
            phase = rng.uniform(0, 2 * np.pi)
            out = out + cfg.detail_amplitude * voiced * np.cos(2 * np.pi * bins / period + phase)
        if cfg.snr_db is not None:
            sigma = clean.std() * 10.0 ** (-cfg.snr_db / 20.0)
            out = out + rng.normal(0.0, sigma, clean.shape)
        return self._finish(out)

    def render_blurry(self, tokens: Sequence[int], speaker: SpeakerEmbedding, seed: int) -> MelSpectrogram:
        cfg = self.config
        clean = self._layout(tokens, speaker, seed)
        if cfg.blur_sigma_freq > 0 or cfg.blur_sigma_time > 0:
            clean = gaussian_filter(clean, sigma=(cfg.blur_sigma_freq, cfg.blur_sigma_time), mode="nearest")
        return self._finish(clean)

    def render_pair(self, tokens: Sequence[int], speaker: SpeakerEmbedding, seed: int) -> tuple[MelSpectrogram, MelSpectrogram]:
        """``(blurry, real)`` for the same utterance."""
        return self.render_blurry(tokens, speaker, seed), self.render_real(tokens, speaker, seed)


# -- corpora ---------------------------------------------------------------


@dataclass
class ManifestEntry:
    id: str
    text: str
    domain: str
    audio_path: str | None = None
    blurry_path: str | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.text.strip():
            raise ValueError(f"manifest entry {self.id!r} has empty text")
        if self.domain not in ("A", "B"):
            raise ValueError(f"manifest entry {self.id!r} has unknown domain {self.domain!r}")

    @property
    def has_audio(self) -> bool:
        return self.audio_path is not None

    def to_json(self) -> str:
        obj: dict = {"id": self.id, "text": self.text}
        if self.audio_path is not None:
            obj["audio_path"] = self.audio_path
        if self.blurry_path is not None:
            obj["blurry_path"] = self.blurry_path
        obj["domain"] = self.domain
        return json.dumps(obj)

    @classmethod
    def from_json(cls, line: str) -> "ManifestEntry":
        obj = json.loads(line)
        return cls(
            id=obj["id"],
            text=obj["text"],
            domain=obj["domain"],
            audio_path=obj.get("audio_path"),
            blurry_path=obj.get("blurry_path"),
        )


def read_manifest(path: str | os.PathLike) -> list[ManifestEntry]:
    with open(path, encoding="utf-8") as fh:
        return [ManifestEntry.from_json(line) for line in fh if line.strip()]


def resolve_path(manifest_path: str | os.PathLike, rel: str) -> Path:
    p = Path(rel)
    return p if p.is_absolute() else Path(manifest_path).parent / p


def load_pairs(manifest_path: str | os.PathLike, mel_config=None) -> list[tuple[MelSpectrogram, MelSpectrogram]]:
    """``(blurry, real)`` spectrogram pairs from a manifest written with ``paired=True``."""
    from .io import read_mel

    pairs = []
    for entry in read_manifest(manifest_path):
        if entry.audio_path is None or entry.blurry_path is None:
            raise ValueError(f"entry {entry.id} lacks a (blurry, real) pair; generate the corpus with paired=True")
        pairs.append((
            read_mel(resolve_path(manifest_path, entry.blurry_path), mel_config),
            read_mel(resolve_path(manifest_path, entry.audio_path), mel_config),
        ))
    return pairs


def generate_corpus(
    grammar: DomainGrammar,
    n: int,
    with_audio: bool,
    seed: int,
    out_dir: str | os.PathLike,
    *,
    domain: str = "A",
    language: SynthLanguage | None = None,
    paired: bool = False,
) -> Path:
    """Write ``n`` entries to ``out_dir/manifest.jsonl``.

    Entry ``i`` derives all of its randomness from ``(seed, i)``. With audio,
    real spectrograms go to ``mels/<id>.mel``; ``paired`` also stores the
    blurry rendering for enhancer training. Paths are relative to the
    manifest.
    """
    from .io import write_mel

    if n < 1:
        raise ValueError("corpus size n must be >= 1")
    language = language or SynthLanguage()
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        if with_audio:
            (out / "mels").mkdir(exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create corpus directory {out}: {exc}") from exc
    if not os.access(out, os.W_OK):
        raise OSError(f"corpus directory {out} is not writable")

    lines = []
    for i in range(n):
        entry_seed = derive_seed(seed, i)
        tokens = sample_text(grammar, derive_seed(entry_seed, 0))
        entry = ManifestEntry(id=f"{domain}-{i:06d}", text=language.detokenize(tokens), domain=domain)
        if with_audio:
            speaker = language.sample_speaker(derive_seed(entry_seed, 1))
            render_seed = derive_seed(entry_seed, 2)
            entry.audio_path = f"mels/{entry.id}.mel"
            write_mel(out / entry.audio_path, language.render_real(tokens, speaker, render_seed))
            if paired:
                entry.blurry_path = f"mels/{entry.id}.blurry.mel"
                write_mel(out / entry.blurry_path, language.render_blurry(tokens, speaker, render_seed))
        lines.append(entry.to_json())

    manifest = out / "manifest.jsonl"
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest
