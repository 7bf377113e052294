"""``synthasr`` command line.

Exit codes: 0 success, 2 invalid configuration or arguments, 3 runtime
failure (e.g. a non-finite loss).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from .config import ConfigError, RunConfig, load_config
from .io import Checkpoint, FormatError, read_mel, write_mel

log = logging.getLogger("synthasr")


class RuntimeFailure(RuntimeError):
    pass


def _require_file(path, field: str) -> Path:
    if path is None:
        raise ConfigError(f"{field}: required")
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"{field}: {p} does not exist")
    return p


def _load_checkpoint(path, field: str) -> Checkpoint:
    p = _require_file(path, field)
    try:
        return Checkpoint.load(p)
    except FormatError as exc:
        raise ConfigError(f"{field}: {exc}") from None


def _language(cfg: RunConfig):
    from .synthlang import SynthLanguage

    return SynthLanguage(cfg.synthlang)


def _emit_json(obj, out: str | None) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True)
    print(text)
    if out:
        Path(out).write_text(text + "\n", encoding="utf-8")


# -- commands ----------------------------------------------------------------


def cmd_gen_corpus(args, cfg: RunConfig) -> int:
    from .synthlang import generate_corpus, make_domain_grammar

    if args.domain not in ("A", "B"):
        raise ConfigError(f"domain: unknown domain {args.domain!r} (expected A or B)")
    if args.n < 1:
        raise ConfigError("n: must be >= 1")
    seed = cfg.seed if args.seed is None else args.seed
    grammar = make_domain_grammar(args.domain, cfg.synthlang.vocab_size, cfg.grammar_seed)
    manifest = generate_corpus(
        grammar, args.n, not args.text_only, seed, args.out_dir,
        domain=args.domain, language=_language(cfg), paired=args.paired,
    )
    print(manifest)
    return 0


def _load_pairs(manifest, tts):
    from .synthlang import load_pairs

    try:
        return load_pairs(manifest, tts.mel_config)
    except ValueError as exc:
        raise ConfigError(f"pairs_manifest: {exc}") from None


def cmd_train_enhancer(args, cfg: RunConfig) -> int:
    from .enhancer import EnhancerError, EnhancerTrainer, GanStepReport

    manifest = _require_file(args.pairs_manifest, "pairs_manifest")
    tts = _language(cfg)
    pairs = _load_pairs(manifest, tts)
    if args.resume:
        trainer = EnhancerTrainer.from_checkpoint(_load_checkpoint(args.resume, "resume"), pairs)
    else:
        trainer = EnhancerTrainer(pairs, cfg.enhancer, cfg.seed if args.seed is None else args.seed)
    steps = cfg.enhancer.steps if args.steps is None else args.steps
    out = Path(args.out)
    log_path = out.with_suffix(".csv")
    mode = "a" if args.resume and log_path.exists() else "w"
    out.parent.mkdir(parents=True, exist_ok=True)
    try:
        with open(log_path, mode, encoding="utf-8") as fh:
            if mode == "w":
                fh.write(",".join(GanStepReport.CSV_FIELDS) + "\n")
            for report in trainer.run(steps):
                fh.write(report.csv_row() + "\n")
    except EnhancerError as exc:
        raise RuntimeFailure(str(exc)) from exc
    trainer.to_checkpoint().save(out)
    print(out)
    return 0


def _train_plan(cfg: RunConfig, args, **overrides):
    plan = cfg.train
    for key in ("audio_manifest", "text_manifest"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = str(value)
    if getattr(args, "ratio", None):
        from .training import parse_ratio

        try:
            overrides["audio_text_ratio"] = parse_ratio(args.ratio)
        except ValueError as exc:
            raise ConfigError(f"ratio: {exc}") from None
    if getattr(args, "steps", None) is not None:
        overrides["total_steps"] = args.steps
    if getattr(args, "lr", None) is not None:
        overrides["lr_max"] = args.lr
    try:
        return dataclasses.replace(plan, **overrides)
    except ValueError as exc:
        raise ConfigError(f"train: {exc}") from None


def _run(plan, asr, tts, enhancer, log_path):
    from .training import TrainingError, run_training

    try:
        return run_training(plan, asr, tts, enhancer, log_path=log_path)
    except TrainingError as exc:
        detail = f" (last checkpoint: {exc.last_checkpoint})" if exc.last_checkpoint else ""
        raise RuntimeFailure(f"{exc}{detail}") from exc


def cmd_train_asr(args, cfg: RunConfig) -> int:
    from .asr import AsrModel

    asr_cfg = cfg.asr
    if args.norm_mode:
        if args.norm_mode not in ("LN", "BN"):
            raise ConfigError(f"norm_mode: must be LN or BN, got {args.norm_mode!r}")
        asr_cfg = dataclasses.replace(asr_cfg, norm_mode=args.norm_mode)
    plan = _train_plan(cfg, args, audio_text_ratio=(1, 0), use_enhancer=False)
    _require_file(plan.audio_manifest, "audio_manifest")
    torch.manual_seed(plan.seed)
    asr = AsrModel(asr_cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    asr, _ = _run(plan, asr, _language(cfg), None, out.with_suffix(".csv"))
    asr.to_checkpoint({"seed": plan.seed, "steps": plan.total_steps}).save(out)
    print(out)
    return 0


def cmd_adapt_text(args, cfg: RunConfig) -> int:
    from .asr import AsrModel, fuse_batchnorm
    from .enhancer import Enhancer

    base = AsrModel.from_checkpoint(_load_checkpoint(args.base, "base"))
    if args.fuse_bn:
        if base.config.norm_mode != "BN":
            raise ConfigError(f"fuse_bn: base checkpoint has norm_mode {base.config.norm_mode}, expected BN")
        base = fuse_batchnorm(base)
    _require_file(args.text_manifest, "text_manifest")
    if args.audio_manifest is not None:
        _require_file(args.audio_manifest, "audio_manifest")
    ratio_default = (1, 1) if args.audio_manifest else (0, 1)
    plan = _train_plan(cfg, args, audio_text_ratio=ratio_default, use_enhancer=bool(args.use_enhancer))
    if plan.audio_text_ratio[0] > 0 and plan.audio_manifest is None:
        raise ConfigError("audio_manifest: required when the ratio has an audio share")
    enhancer = None
    if args.use_enhancer:
        enhancer = Enhancer.from_checkpoint(_load_checkpoint(args.enhancer, "enhancer"))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    asr, history = _run(plan, base, _language(cfg), enhancer, out.with_suffix(".csv"))
    kinds = {"audio": sum(h.kind == "audio" for h in history), "text": sum(h.kind == "text" for h in history)}
    meta = {"seed": plan.seed, "ratio": "{}:{}".format(*plan.audio_text_ratio), "use_enhancer": plan.use_enhancer, "batches": kinds}
    asr.to_checkpoint(meta).save(out)
    print(json.dumps({"checkpoint": str(out), "norm_mode": asr.config.norm_mode, **meta}, sort_keys=True))
    return 0


def cmd_evaluate(args, cfg: RunConfig) -> int:
    from .asr import AsrModel
    from .metrics import evaluate

    asr = AsrModel.from_checkpoint(_load_checkpoint(args.ckpt, "ckpt"))
    manifest = _require_file(args.manifest, "manifest")
    try:
        report = evaluate(manifest, asr, _language(cfg))
    except ValueError as exc:
        raise ConfigError(f"manifest: {exc}") from None
    _emit_json(report.to_dict(), args.out)
    return 0


def cmd_enhance(args, cfg: RunConfig) -> int:
    from .enhancer import Enhancer, EnhancerError, enhance

    enhancer = Enhancer.from_checkpoint(_load_checkpoint(args.ckpt, "ckpt"))
    src = _require_file(args.input, "input")
    try:
        mel = read_mel(src, cfg.mel)
    except FormatError as exc:
        raise ConfigError(f"input: {exc}") from None
    try:
        out = enhance(mel, args.latent_seed, enhancer)
    except EnhancerError as exc:
        raise ConfigError(f"input: {exc}") from None
    write_mel(args.output, out)
    print(args.output)
    return 0


def cmd_fuse_bn(args, cfg: RunConfig) -> int:
    from .asr import AsrModel, fuse_batchnorm

    ckpt = _load_checkpoint(args.ckpt, "ckpt")
    model = AsrModel.from_checkpoint(ckpt)
    if model.config.norm_mode != "BN":
        raise ConfigError(f"ckpt: norm_mode is {model.config.norm_mode}, expected BN")
    fused = fuse_batchnorm(model)
    fused.to_checkpoint({**ckpt.meta, "fused_from": str(args.ckpt)}).save(args.out)
    print(args.out)
    return 0


def cmd_benchmark(args, cfg: RunConfig) -> int:
    from .asr import AsrModel
    from .enhancer import Enhancer
    from .metrics import benchmark_overhead
    from .synthlang import make_domain_grammar, sample_text, derive_seed

    tts = _language(cfg)
    torch.manual_seed(cfg.seed)
    asr = AsrModel.from_checkpoint(_load_checkpoint(args.asr, "asr")) if args.asr else AsrModel(cfg.asr)
    enhancer = Enhancer.from_checkpoint(_load_checkpoint(args.enhancer, "enhancer")) if args.enhancer else Enhancer(cfg.enhancer, cfg.seed)
    grammar = make_domain_grammar("A", cfg.synthlang.vocab_size, cfg.grammar_seed)
    texts = [sample_text(grammar, derive_seed(cfg.seed, i)) for i in range(256)]
    b = cfg.benchmark
    report = benchmark_overhead(tts, asr, enhancer, texts, b.n_batches, b.warmup_batches, b.batch_size, cfg.seed)
    _emit_json(report.to_dict(), args.out)
    return 0


def cmd_experiment(args, cfg: RunConfig) -> int:
    from .experiments import DeskSettings, run_all

    settings = DeskSettings.quick() if args.quick else DeskSettings()
    report = run_all(settings, Path(args.work_dir))
    _emit_json(report, args.out)
    return 0


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="synthasr", description="Text-only ASR adaptation with a synthetic spectrogram front-end.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", help="run config (YAML)")
        sp.set_defaults(func=func)
        return sp

    sp = add("gen-corpus", cmd_gen_corpus, "generate a synthetic-language corpus")
    sp.add_argument("--domain", required=True)
    sp.add_argument("--n", type=int, required=True)
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--text-only", action="store_true", help="write transcripts without spectrograms")
    sp.add_argument("--paired", action="store_true", help="also store blurry renderings (enhancer training)")
    sp.add_argument("--seed", type=int)

    sp = add("train-enhancer", cmd_train_enhancer, "train the spectrogram enhancer")
    sp.add_argument("--pairs-manifest", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--resume", help="enhancer checkpoint to continue from")

    sp = add("train-asr", cmd_train_asr, "train the recognizer on audio")
    sp.add_argument("--audio-manifest")
    sp.add_argument("--out", required=True)
    sp.add_argument("--norm-mode")
    sp.add_argument("--steps", type=int)
    sp.add_argument("--lr", type=float)

    sp = add("adapt-text", cmd_adapt_text, "finetune on text (optionally mixed with audio)")
    sp.add_argument("--base", required=True)
    sp.add_argument("--text-manifest", required=True)
    sp.add_argument("--audio-manifest")
    sp.add_argument("--ratio", help="audio:text batch ratio, e.g. 1:2")
    sp.add_argument("--fuse-bn", action="store_true")
    sp.add_argument("--use-enhancer", action="store_true")
    sp.add_argument("--enhancer", help="enhancer checkpoint (with --use-enhancer)")
    sp.add_argument("--out", required=True)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--lr", type=float)

    sp = add("evaluate", cmd_evaluate, "greedy WER on a manifest")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out")

    sp = add("enhance", cmd_enhance, "enhance a spectrogram file")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--out", dest="output", required=True)
    sp.add_argument("--latent-seed", type=int, default=0)

    sp = add("fuse-bn", cmd_fuse_bn, "fold BatchNorm into trainable affines")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--out", required=True)

    sp = add("benchmark", cmd_benchmark, "training overhead per input path")
    sp.add_argument("--asr")
    sp.add_argument("--enhancer")
    sp.add_argument("--out")

    sp = add("experiment", cmd_experiment, "desk-scale adaptation experiments")
    sp.add_argument("--work-dir", required=True)
    sp.add_argument("--quick", action="store_true")
    sp.add_argument("--out")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(max(1, torch.get_num_threads()))
    try:
        cfg = load_config(args.config)
        return args.func(args, cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except RuntimeFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
