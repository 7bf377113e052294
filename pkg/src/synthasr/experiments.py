"""Desk-scale adaptation experiments.

``run_all`` reproduces the whole pipeline on the synthetic language: enhancer
training and its spectral-distance check, domain-A pretraining, text-only
domain-B adaptation with and without the enhancer, audio/text mixing and the
per-path overhead benchmark. Everything is derived from ``DeskSettings.seed``,
so two runs in fresh directories write identical corpora, logs and
checkpoints; only the wall-clock entries of the report differ.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import statistics
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .asr import AsrConfig, AsrModel, fuse_batchnorm
from .enhancer import Enhancer, EnhancerConfig, EnhancerTrainer, GanStepReport, enhance
from .metrics import benchmark_overhead, evaluate, log_spectral_distance
from .synthlang import SynthLanguage, derive_seed, generate_corpus, load_pairs, make_domain_grammar
from .training import AudioSet, TrainPlan, load_texts, run_training

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DeskSettings:
    seed: int = 0
    # corpora
    n_pairs: int = 400
    n_pairs_heldout: int = 40
    n_audio_a: int = 800
    n_audio_b_small: int = 32
    n_text_b: int = 2000
    n_eval: int = 100
    # enhancer
    enhancer: EnhancerConfig = field(
        default_factory=lambda: EnhancerConfig(
            capacity=4, max_feature_maps=64, batch_size=16, crop_frames=32,
            lr=1e-3, d_lr=2e-4, consistency_weight=3.0, ema_decay=0.995, steps=3000,
        )
    )
    # recognizer
    asr: AsrConfig = field(default_factory=lambda: AsrConfig(d_model=64, n_blocks=2, norm_mode="BN"))
    batch_size: int = 16
    pretrain_steps: int = 600
    pretrain_lr: float = 2e-3
    adapt_steps: int = 200
    adapt_lr: float = 1e-4
    seeds: tuple[int, ...] = (0, 1, 2)
    mix_ratios: tuple[str, ...] = ("1:1", "1:2")
    # benchmark
    bench_batches: int = 20
    bench_warmup: int = 3

    @classmethod
    def quick(cls) -> "DeskSettings":
        """A few-minute variant for smoke tests; its numbers carry no meaning."""
        return cls(
            n_pairs=24, n_pairs_heldout=4, n_audio_a=48, n_audio_b_small=8, n_text_b=64, n_eval=8,
            enhancer=EnhancerConfig(
                latent_dim=16, style_depth=2, capacity=2, max_feature_maps=8, batch_size=4,
                crop_frames=32, max_frames=1024, steps=8,
            ),
            asr=AsrConfig(d_model=16, n_blocks=1, n_heads=2, norm_mode="BN"),
            batch_size=8, pretrain_steps=6, adapt_steps=4, seeds=(0,), bench_batches=10, bench_warmup=1,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _median(values):
    return float(statistics.median(values))


@contextmanager
def _timed(seconds: dict, name: str):
    start = time.perf_counter()
    yield
    seconds[name] = seconds.get(name, 0.0) + time.perf_counter() - start


def build_corpora(settings: DeskSettings, work_dir: Path, tts: SynthLanguage) -> dict[str, Path]:
    s = settings.seed
    ga, gb = make_domain_grammar("A", tts.config.vocab_size), make_domain_grammar("B", tts.config.vocab_size)
    root = work_dir / "corpora"
    specs = {
        "pairs": (ga, settings.n_pairs, True, derive_seed(s, 1), "A", True),
        "pairs_heldout": (ga, settings.n_pairs_heldout, True, derive_seed(s, 2), "A", True),
        "train_a": (ga, settings.n_audio_a, True, derive_seed(s, 3), "A", False),
        "eval_a": (ga, settings.n_eval, True, derive_seed(s, 4), "A", False),
        "eval_b": (gb, settings.n_eval, True, derive_seed(s, 5), "B", False),
        "audio_b_small": (gb, settings.n_audio_b_small, True, derive_seed(s, 6), "B", False),
        "text_b": (gb, settings.n_text_b, False, derive_seed(s, 7), "B", False),
    }
    return {
        name: generate_corpus(g, n, audio, seed, root / name, domain=dom, language=tts, paired=paired)
        for name, (g, n, audio, seed, dom, paired) in specs.items()
    }


def enhancer_experiment(settings: DeskSettings, pairs_manifest, heldout_manifest, tts: SynthLanguage, out_dir: Path):
    """Train the enhancer and compare spectral distances on held-out pairs."""
    pairs = load_pairs(pairs_manifest, tts.mel_config)
    trainer = EnhancerTrainer(pairs, settings.enhancer, settings.seed)
    log_path = out_dir / "enhancer.csv"
    with open(log_path, "w", encoding="utf-8") as fh:
        fh.write(",".join(GanStepReport.CSV_FIELDS) + "\n")
        for report in trainer.run(settings.enhancer.steps):
            fh.write(report.csv_row() + "\n")
    trainer.to_checkpoint().save(out_dir / "enhancer.ckpt")
    enhancer = trainer.averaged_enhancer().eval()

    heldout = load_pairs(heldout_manifest, tts.mel_config)
    blurry = [log_spectral_distance(b, r) for b, r in heldout]
    with torch.no_grad():
        enhanced = [log_spectral_distance(enhance(b, i, enhancer), r) for i, (b, r) in enumerate(heldout)]
    result = {
        "lsd_blurry": float(np.mean(blurry)),
        "lsd_enhanced": float(np.mean(enhanced)),
        "steps": settings.enhancer.steps,
    }
    result["ratio"] = result["lsd_enhanced"] / result["lsd_blurry"]
    return enhancer, result


def _plan(settings: DeskSettings, seed: int, **kw) -> TrainPlan:
    return TrainPlan(batch_size=settings.batch_size, seed=seed, **kw)


def adaptation_arms(settings: DeskSettings) -> dict[str, dict]:
    arms = {
        "text_blurry": {"ratio": (0, 1), "use_enhancer": False},
        "text_enhancer": {"ratio": (0, 1), "use_enhancer": True},
    }
    for r in settings.mix_ratios:
        a, t = (int(x) for x in r.split(":"))
        arms[f"mix_{a}_{t}"] = {"ratio": (a, t), "use_enhancer": True}
    return arms


def asr_experiment(settings: DeskSettings, corpora: dict[str, Path], tts: SynthLanguage, enhancer: Enhancer, out_dir: Path, seconds: dict):
    train_a = AudioSet.from_manifest(corpora["train_a"], tts)
    audio_b = AudioSet.from_manifest(corpora["audio_b_small"], tts)
    texts_b = load_texts(corpora["text_b"], tts)
    arms = adaptation_arms(settings)
    per_seed = []
    for seed in settings.seeds:
        row: dict = {"seed": seed}
        with _timed(seconds, "pretrain"):
            torch.manual_seed(derive_seed(settings.seed, seed, 20))
            base = AsrModel(settings.asr)
            plan = _plan(settings, derive_seed(settings.seed, seed, 21), total_steps=settings.pretrain_steps, lr_max=settings.pretrain_lr)
            run_training(plan, base, tts, audio=train_a, log_path=out_dir / f"pretrain_s{seed}.csv")
            base.to_checkpoint({"seed": seed}).save(out_dir / f"pretrain_s{seed}.ckpt")
        row["pretrained"] = {
            "A": evaluate(corpora["eval_a"], base, tts).wer,
            "B": evaluate(corpora["eval_b"], base, tts).wer,
        }
        fused = fuse_batchnorm(base) if base.norm_mode == "BN" else base
        for name, arm in arms.items():
            with _timed(seconds, f"adapt_{name}"):
                model = AsrModel.from_checkpoint(fused.to_checkpoint())
                plan = _plan(
                    settings, derive_seed(settings.seed, seed, 22), total_steps=settings.adapt_steps, lr_max=settings.adapt_lr,
                    audio_text_ratio=arm["ratio"], use_enhancer=arm["use_enhancer"],
                )
                run_training(
                    plan, model, tts, enhancer if arm["use_enhancer"] else None,
                    audio=audio_b if arm["ratio"][0] else None, texts=texts_b,
                    log_path=out_dir / f"{name}_s{seed}.csv",
                )
                model.to_checkpoint({"seed": seed, "arm": name}).save(out_dir / f"{name}_s{seed}.ckpt")
            row[name] = {
                "A": evaluate(corpora["eval_a"], model, tts).wer,
                "B": evaluate(corpora["eval_b"], model, tts).wer,
            }
        log.info("seed %d: %s", seed, row)
        per_seed.append(row)

    summary = {"pretrained": {d: _median([r["pretrained"][d] for r in per_seed]) for d in "AB"}}
    for name in arms:
        summary[name] = {d: _median([r[name][d] for r in per_seed]) for d in "AB"}
    drops = []
    for r in per_seed:
        before = r["pretrained"]["B"]
        drops.append((before - r["text_enhancer"]["B"]) / before if before > 0 else 0.0)
    summary["relative_b_drop_text_enhancer"] = _median(drops)
    return {"per_seed": per_seed, "median": summary}


def benchmark_experiment(settings: DeskSettings, tts: SynthLanguage, enhancer: Enhancer, texts):
    torch.manual_seed(settings.seed)
    asr = AsrModel(settings.asr)
    report = benchmark_overhead(
        tts, asr, enhancer, texts, settings.bench_batches, settings.bench_warmup, settings.batch_size, settings.seed
    )
    return report.to_dict()


def run_all(settings: DeskSettings, work_dir) -> dict:
    """Run every experiment under ``work_dir``; returns the report and writes
    it to ``work_dir/report.json``."""
    work_dir = Path(work_dir)
    work_dir.mkdir(parents=True, exist_ok=True)
    out_dir = work_dir / "runs"
    out_dir.mkdir(exist_ok=True)
    tts = SynthLanguage()
    seconds: dict[str, float] = {}

    with _timed(seconds, "corpora"):
        corpora = build_corpora(settings, work_dir, tts)
    with _timed(seconds, "enhancer"):
        enhancer, enh_result = enhancer_experiment(settings, corpora["pairs"], corpora["pairs_heldout"], tts, out_dir)
    asr_result = asr_experiment(settings, corpora, tts, enhancer, out_dir, seconds)
    with _timed(seconds, "benchmark"):
        bench = benchmark_experiment(settings, tts, enhancer, load_texts(corpora["train_a"], tts))

    report = {
        "settings": settings.to_dict(),
        "enhancer": enh_result,
        "asr": asr_result,
        "benchmark": bench,
        "seconds": seconds,
    }
    (work_dir / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True, default=list) + "\n", encoding="utf-8")
    return report
