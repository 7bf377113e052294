"""WER, spectral distance and the training-overhead benchmark."""

from __future__ import annotations

import platform
import statistics
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch

from .mel import MelSpectrogram


@dataclass
class WerReport:
    substitutions: int = 0
    deletions: int = 0
    insertions: int = 0
    n_ref_tokens: int = 0
    utterances: list[dict] = field(default_factory=list)

    @property
    def errors(self) -> int:
        return self.substitutions + self.deletions + self.insertions

    @property
    def wer(self) -> float:
        return self.errors / self.n_ref_tokens if self.n_ref_tokens else 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["wer"] = self.wer
        return d

    @classmethod
    def combine(cls, reports: Sequence["WerReport"]) -> "WerReport":
        """Corpus-level report: counts are summed, never rates averaged."""
        out = cls()
        for r in reports:
            out.substitutions += r.substitutions
            out.deletions += r.deletions
            out.insertions += r.insertions
            out.n_ref_tokens += r.n_ref_tokens
            out.utterances.extend(r.utterances)
        out.utterances.sort(key=lambda u: str(u.get("id", "")))
        return out


def edit_counts(ref: Sequence, hyp: Sequence) -> tuple[int, int, int]:
    """(S, D, I) of a minimum-edit alignment; ties prefer substitutions."""
    n, m = len(ref), len(hyp)
    cost = np.zeros((n + 1, m + 1), dtype=np.int64)
    cost[:, 0] = np.arange(n + 1)
    cost[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            diag = cost[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1])
            cost[i, j] = min(diag, cost[i - 1, j] + 1, cost[i, j - 1] + 1)

    s = d = ins = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and cost[i, j] == cost[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            s += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif i > 0 and cost[i, j] == cost[i - 1, j] + 1:
            d += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return int(s), d, ins


def wer(ref: Sequence, hyp: Sequence, utt_id: str | None = None) -> WerReport:
    if len(ref) == 0:
        raise ValueError("reference must be non-empty")
    s, d, i = edit_counts(ref, hyp)
    utt = {"id": utt_id, "ref_len": len(ref), "substitutions": s, "deletions": d, "insertions": i}
    return WerReport(s, d, i, len(ref), [utt])


def log_spectral_distance(a: MelSpectrogram | np.ndarray, b: MelSpectrogram | np.ndarray) -> float:
    """Root-mean-square difference of log-mel values."""
    x = a.values if isinstance(a, MelSpectrogram) else np.asarray(a)
    y = b.values if isinstance(b, MelSpectrogram) else np.asarray(b)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    diff = x.astype(np.float64) - y.astype(np.float64)
    return float(np.sqrt(np.mean(diff * diff)))


def evaluate(manifest, asr, tts) -> WerReport:
    """Greedy-decode every utterance of ``manifest`` through the speech
    front-end and aggregate WER over token ids."""
    from .asr import transcribe
    from .io import load_features
    from .synthlang import read_manifest, resolve_path

    reports = []
    for entry in read_manifest(manifest):
        if entry.audio_path is None:
            raise ValueError(f"{manifest}: entry {entry.id} has no audio")
        mel = load_features(resolve_path(manifest, entry.audio_path), tts.mel_config)
        (hyp,) = transcribe(asr, [mel])
        reports.append(wer(tts.tokenize(entry.text), hyp, entry.id))
    return WerReport.combine(reports)


def evaluate_features(asr, features: Sequence[np.ndarray], targets: Sequence[Sequence[int]], mel_config) -> WerReport:
    """In-memory variant of :func:`evaluate`."""
    from .asr import transcribe

    hyps = transcribe(asr, [MelSpectrogram(f, mel_config) for f in features])
    return WerReport.combine([wer(t, h, f"{i:06d}") for i, (t, h) in enumerate(zip(targets, hyps))])


# -- training overhead -------------------------------------------------------


@dataclass
class OverheadReport:
    mean_seconds: dict
    std_seconds: dict
    factors: dict
    n_batches: int
    warmup_batches: int
    batch_size: int
    host: dict

    def to_dict(self) -> dict:
        d = asdict(self)
        d["enhancer_overhead_over_blurry"] = self.factors["text_enhancer"] / self.factors["text_blurry"] - 1.0
        return d


PATHS = ("audio", "text_blurry", "text_enhancer")


def benchmark_overhead(tts, asr, enhancer, texts: Sequence[Sequence[int]], n_batches: int = 20, warmup_batches: int = 3, batch_size: int = 16, seed: int = 0) -> OverheadReport:
    """Wall time of one ASR training step per input path.

    All three paths train on the same utterances, so batch shapes match:
    ``audio`` uses pre-rendered real spectrograms held in memory, ``text_blurry``
    synthesizes them, ``text_enhancer`` synthesizes and enhances. Paths are
    timed round-robin so drift in machine load hits each equally.
    """
    from .asr import batch_ctc_loss, tokens_to_classes
    from .synthlang import derive_seed
    from .training import collate, text_batch_to_mels

    if n_batches < 10:
        raise ValueError("benchmark needs at least 10 timed batches")
    total = n_batches + warmup_batches
    rng = np.random.default_rng(seed)
    batches = [[list(texts[i]) for i in rng.integers(0, len(texts), batch_size)] for _ in range(total)]
    batch_seeds = [derive_seed(seed, k, 9) for k in range(total)]
    # the stored "recordings" reuse the synthesizer's seeds, so every path
    # sees exactly the same lengths
    real = []
    for k, batch in enumerate(batches):
        s = batch_seeds[k]
        real.append([
            tts.render_real(tokens, tts.sample_speaker(derive_seed(s, i, 0)), derive_seed(s, i, 1)).values
            for i, tokens in enumerate(batch)
        ])

    opt = torch.optim.AdamW(asr.parameters(), lr=1e-5, weight_decay=1e-3)
    asr.train()
    enhancer.eval()

    def train_step(values, lengths, targets):
        logits, out_len = asr(values, lengths)
        loss = batch_ctc_loss(logits, out_len, [tokens_to_classes(t) for t in targets])
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()

    def run(path, k):
        targets = batches[k]
        if path == "audio":
            b = collate(real[k])
        else:
            b = text_batch_to_mels(targets, tts, enhancer if path == "text_enhancer" else None, batch_seeds[k])
        train_step(b.values, b.lengths, targets)

    times: dict[str, list[float]] = {p: [] for p in PATHS}
    for k in range(total):
        for path in PATHS:
            t0 = time.perf_counter()
            run(path, k)
            dt = time.perf_counter() - t0
            if k >= warmup_batches:
                times[path].append(dt)
    asr.eval()

    mean = {p: statistics.fmean(v) for p, v in times.items()}
    std = {p: statistics.stdev(v) for p, v in times.items()}
    factors = {p: mean[p] / mean["audio"] for p in PATHS}
    factors["audio"] = 1.0
    host = {
        "platform": platform.platform(),
        "processor": platform.processor() or platform.machine(),
        "python": platform.python_version(),
        "torch": torch.__version__,
        "torch_threads": str(torch.get_num_threads()),
    }
    return OverheadReport(mean, std, factors, n_batches, warmup_batches, batch_size, host)
