"""Hybrid audio + text training loop.

Each batch is either pure audio (stored spectrograms of recorded speech) or
pure text (spectrograms synthesized on the fly by the frozen renderer, then
optionally passed through the frozen enhancer). Both kinds get SpecAugment
and feed the same recognizer.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Sequence

import numpy as np
import torch

from .asr import AsrModel, batch_ctc_loss, min_ctc_frames, tokens_to_classes
from .enhancer import Enhancer
from .io import load_features
from .mel import MelSpectrogram, SpecAugmentPolicy, spec_augment
from .synthlang import SynthLanguage, derive_seed, read_manifest, resolve_path

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    def __init__(self, message: str, last_checkpoint: Path | None = None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


@dataclass(frozen=True)
class TrainPlan:
    audio_manifest: str | None = None
    text_manifest: str | None = None
    audio_text_ratio: tuple[int, int] = (1, 0)
    batch_size: int = 16
    total_steps: int = 1000
    lr_max: float = 1e-4
    warmup_frac: float = 0.2
    weight_decay: float = 1e-3
    grad_clip: float = 1.0
    seed: int = 0
    use_enhancer: bool = False
    specaugment: SpecAugmentPolicy = field(default_factory=SpecAugmentPolicy)
    checkpoint_every: int = 0
    checkpoint_dir: str | None = None

    def __post_init__(self):
        ra, rt = self.audio_text_ratio
        if ra < 0 or rt < 0 or ra + rt == 0:
            raise ValueError("train.audio_text_ratio components must be >= 0 and not both 0")
        if not 0 <= self.warmup_frac <= 1:
            raise ValueError("train.warmup_frac must be in [0, 1]")
        if self.batch_size < 1:
            raise ValueError("train.batch_size must be >= 1")
        if self.total_steps < 1:
            raise ValueError("train.total_steps must be >= 1")
        if self.lr_max <= 0:
            raise ValueError("train.lr_max must be positive")


@dataclass(frozen=True)
class BatchPlanItem:
    kind: Literal["audio", "text"]
    sample_ids: tuple[int, ...]
    step: int


def parse_ratio(text: str) -> tuple[int, int]:
    try:
        a, t = (int(x) for x in text.split(":"))
    except ValueError:
        raise ValueError(f"ratio must look like A:T, got {text!r}") from None
    if a < 0 or t < 0 or a + t == 0:
        raise ValueError(f"ratio {text!r} must have non-negative parts, not both zero")
    return a, t


def make_epoch_schedule(n_audio: int, n_text: int, ratio: tuple[int, int], batch_size: int, seed: int, start_step: int = 0) -> list[BatchPlanItem]:
    """One epoch of batch-wise interleaved audio and text batches.

    Audio samples are visited without replacement (incomplete tail dropped);
    text samples are drawn with replacement. With a zero audio share the
    epoch holds as many text batches as the text corpus fills.
    """
    ra, rt = ratio
    if ra < 0 or rt < 0 or ra + rt == 0:
        raise ValueError("ratio components must be >= 0 and not both 0")
    rng = np.random.default_rng(seed)
    if ra > 0:
        if n_audio < batch_size:
            raise ValueError(f"audio manifest has {n_audio} entries, fewer than batch size {batch_size}")
        n_audio_batches = n_audio // batch_size
        n_text_batches = int(round(n_audio_batches * rt / ra))
    else:
        n_audio_batches = 0
        n_text_batches = max(1, n_text // batch_size)
    if n_text_batches > 0 and n_text < 1:
        raise ValueError("text manifest is empty but the ratio asks for text batches")

    order = rng.permutation(n_audio)[: n_audio_batches * batch_size] if n_audio_batches else np.empty(0, int)
    audio = [tuple(int(i) for i in order[k * batch_size:(k + 1) * batch_size]) for k in range(n_audio_batches)]
    text_ids = rng.integers(0, max(n_text, 1), size=(n_text_batches, batch_size))
    text = [tuple(int(i) for i in row) for row in text_ids]

    items = [("audio", ids) for ids in audio] + [("text", ids) for ids in text]
    perm = rng.permutation(len(items))
    return [BatchPlanItem(items[j][0], items[j][1], start_step + k) for k, j in enumerate(perm)]


def cosine_warmup_lr(step: int, total_steps: int, warmup_frac: float, lr_max: float) -> float:
    warmup = warmup_frac * total_steps
    if step < warmup:
        return lr_max * step / warmup
    if total_steps <= warmup:
        return lr_max
    progress = min(1.0, (step - warmup) / (total_steps - warmup))
    return lr_max * 0.5 * (1.0 + math.cos(math.pi * progress))


# -- batches -----------------------------------------------------------------


@dataclass
class MelBatch:
    values: torch.Tensor  # [B, n_mels, L_max]
    lengths: torch.Tensor  # [B]

    @property
    def mask(self) -> torch.Tensor:
        return torch.arange(self.values.shape[-1])[None, :] < self.lengths[:, None]

    def items(self) -> list[np.ndarray]:
        return [self.values[i, :, : int(n)].numpy() for i, n in enumerate(self.lengths)]


def collate(mels: Sequence[np.ndarray]) -> MelBatch:
    """Right-pad to the longest item, repeating each item's last frame."""
    max_len = max(m.shape[1] for m in mels)
    out = np.empty((len(mels), mels[0].shape[0], max_len), dtype=np.float32)
    for i, m in enumerate(mels):
        out[i, :, : m.shape[1]] = m
        out[i, :, m.shape[1]:] = m[:, -1:]
    return MelBatch(torch.from_numpy(out), torch.tensor([m.shape[1] for m in mels], dtype=torch.long))


def text_batch_to_mels(texts: Sequence[Sequence[int]], tts: SynthLanguage, enhancer: Enhancer | None, seed: int) -> MelBatch:
    """Synthesize a padded batch; utterance ``i`` draws its speaker, render
    and latent seeds from ``(seed, i)``."""
    if len(texts) == 0:
        raise ValueError("texts must be non-empty")
    blurry = []
    for i, tokens in enumerate(texts):
        speaker = tts.sample_speaker(derive_seed(seed, i, 0))
        blurry.append(tts.render_blurry(tokens, speaker, derive_seed(seed, i, 1)).values)
    batch = collate(blurry)
    if enhancer is not None:
        with torch.no_grad():
            values = enhancer.enhance_batch(batch.values, [derive_seed(seed, i, 2) for i in range(len(texts))])
        batch = MelBatch(values, batch.lengths)
    return batch


# -- corpora -----------------------------------------------------------------


@dataclass
class AudioSet:
    features: list[np.ndarray]
    targets: list[list[int]]

    @classmethod
    def from_manifest(cls, path, tts: SynthLanguage) -> "AudioSet":
        features, targets = [], []
        for entry in read_manifest(path):
            if entry.audio_path is None:
                raise ValueError(f"{path}: entry {entry.id} has no audio")
            mel = load_features(resolve_path(path, entry.audio_path), tts.mel_config)
            features.append(mel.values)
            targets.append(tts.tokenize(entry.text))
        return cls(features, targets)

    def __len__(self):
        return len(self.features)


def load_texts(path, tts: SynthLanguage) -> list[list[int]]:
    return [tts.tokenize(e.text) for e in read_manifest(path)]


# -- loop --------------------------------------------------------------------


@dataclass
class StepLog:
    step: int
    kind: str
    loss: float
    lr: float


def write_loss_log(path, rows: Sequence[StepLog]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "kind", "loss", "lr"])
        for r in rows:
            w.writerow([r.step, r.kind, repr(r.loss), repr(r.lr)])


def _augment(items: Sequence[np.ndarray], policy: SpecAugmentPolicy, seed: int, tts: SynthLanguage) -> list[np.ndarray]:
    return [spec_augment(MelSpectrogram(x, tts.mel_config), policy, derive_seed(seed, i)).values for i, x in enumerate(items)]


def run_training(
    plan: TrainPlan,
    asr: AsrModel,
    tts: SynthLanguage,
    enhancer: Enhancer | None = None,
    *,
    audio: AudioSet | None = None,
    texts: Sequence[Sequence[int]] | None = None,
    log_path=None,
) -> tuple[AsrModel, list[StepLog]]:
    """Train ``asr`` in place following ``plan``; returns it with the step log.

    ``audio``/``texts`` override the manifests named in the plan (used to
    share one loaded corpus across runs).
    """
    ra, rt = plan.audio_text_ratio
    if audio is None and ra > 0:
        if plan.audio_manifest is None:
            raise ValueError("plan needs an audio manifest for its audio share")
        audio = AudioSet.from_manifest(plan.audio_manifest, tts)
    if texts is None and rt > 0:
        if plan.text_manifest is None:
            raise ValueError("plan needs a text manifest for its text share")
        texts = load_texts(plan.text_manifest, tts)
    if plan.use_enhancer and enhancer is None:
        raise ValueError("plan.use_enhancer is set but no enhancer was given")
    active_enhancer = enhancer if plan.use_enhancer else None
    if active_enhancer is not None:
        active_enhancer.eval()
        active_enhancer.requires_grad_(False)

    n_audio = len(audio) if audio is not None else 0
    n_text = len(texts) if texts is not None else 0
    opt = torch.optim.AdamW(asr.parameters(), lr=0.0, weight_decay=plan.weight_decay)
    ckpt_dir = Path(plan.checkpoint_dir) if plan.checkpoint_dir else None
    last_ckpt: Path | None = None
    history: list[StepLog] = []
    asr.train()

    step = 0
    epoch = 0
    while step < plan.total_steps:
        schedule = make_epoch_schedule(n_audio, n_text, plan.audio_text_ratio, plan.batch_size, derive_seed(plan.seed, epoch), step)
        epoch += 1
        for item in schedule:
            if step >= plan.total_steps:
                break
            if item.kind == "audio":
                items = [audio.features[i] for i in item.sample_ids]
                targets = [audio.targets[i] for i in item.sample_ids]
            else:
                targets = [list(texts[i]) for i in item.sample_ids]
                items = text_batch_to_mels(targets, tts, active_enhancer, derive_seed(plan.seed, step, 1)).items()
            batch = collate(_augment(items, plan.specaugment, derive_seed(plan.seed, step, 2), tts))

            lr = cosine_warmup_lr(step, plan.total_steps, plan.warmup_frac, plan.lr_max)
            for group in opt.param_groups:
                group["lr"] = lr
            logits, out_lengths = asr(batch.values, batch.lengths)
            for t, n in zip(targets, out_lengths.tolist()):
                if min_ctc_frames(t) > n:
                    raise TrainingError(f"step {step}: transcript too long for {n} encoder frames", last_ckpt)
            loss = batch_ctc_loss(logits, out_lengths, [tokens_to_classes(t) for t in targets])
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss at step {step} ({item.kind} batch)", last_ckpt)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if plan.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(asr.parameters(), plan.grad_clip)
            opt.step()
            history.append(StepLog(step, item.kind, loss.item(), lr))
            step += 1

            if ckpt_dir is not None and plan.checkpoint_every > 0 and step % plan.checkpoint_every == 0:
                last_ckpt = ckpt_dir / f"asr_step{step:06d}.ckpt"
                asr.to_checkpoint({"step": step, "seed": plan.seed}).save(last_ckpt)

    asr.eval()
    if log_path is not None:
        write_loss_log(log_path, history)
    return asr, history
