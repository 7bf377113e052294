"""Run configuration: one YAML file per run, one section per component."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from .asr import AsrConfig
from .enhancer import EnhancerConfig
from .mel import MelConfig, SpecAugmentPolicy
from .synthlang import SynthConfig
from .training import TrainPlan, parse_ratio


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


def _build(cls, section: str, data: Any, converters: dict | None = None):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{section}: expected a mapping, got {type(data).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{section}.{unknown[0]}: unknown field")
    kwargs = dict(data)
    for name, conv in (converters or {}).items():
        if name in kwargs:
            try:
                kwargs[name] = conv(kwargs[name])
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{section}.{name}: {exc}") from None
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        msg = str(exc)
        raise ConfigError(msg if msg.startswith(section) else f"{section}: {msg}") from None


def _ratio(value) -> tuple[int, int]:
    if isinstance(value, str):
        return parse_ratio(value)
    a, t = value
    return parse_ratio(f"{int(a)}:{int(t)}")


@dataclass
class BenchmarkSettings:
    n_batches: int = 20
    warmup_batches: int = 3
    batch_size: int = 16

    def __post_init__(self):
        if self.n_batches < 10:
            raise ValueError("benchmark.n_batches must be >= 10")
        if self.warmup_batches < 0:
            raise ValueError("benchmark.warmup_batches must be >= 0")


@dataclass
class RunConfig:
    seed: int = 0
    mel: MelConfig = field(default_factory=MelConfig)
    synthlang: SynthConfig = field(default_factory=SynthConfig)
    grammar_seed: int = 7
    enhancer: EnhancerConfig = field(default_factory=EnhancerConfig)
    asr: AsrConfig = field(default_factory=AsrConfig)
    train: TrainPlan = field(default_factory=TrainPlan)
    eval: dict = field(default_factory=dict)
    benchmark: BenchmarkSettings = field(default_factory=BenchmarkSettings)

    @classmethod
    def from_dict(cls, data: dict | None) -> "RunConfig":
        data = dict(data or {})
        known = {"seed", "mel", "synthlang", "grammar_seed", "enhancer", "asr", "train", "eval", "benchmark"}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"{unknown[0]}: unknown section")
        seed = data.get("seed", 0)
        if not isinstance(seed, int):
            raise ConfigError("seed: must be an integer")
        grammar_seed = data.get("grammar_seed", 7)
        if not isinstance(grammar_seed, int):
            raise ConfigError("grammar_seed: must be an integer")

        mel = _build(MelConfig, "mel", data.get("mel"))
        synth = _build(
            SynthConfig,
            "synthlang",
            data.get("synthlang"),
            {k: tuple for k in ("pitch_shift_range", "energy_scale_range", "formant_tilt_range")},
        )
        if synth.n_mels != mel.n_mels:
            raise ConfigError("synthlang.n_mels: must equal mel.n_mels")
        enhancer = _build(EnhancerConfig, "enhancer", data.get("enhancer"))
        asr_data = dict(data.get("asr") or {})
        asr_data.setdefault("vocab_size", synth.vocab_size + 1)
        asr_data.setdefault("n_mels", mel.n_mels)
        asr = _build(AsrConfig, "asr", asr_data)
        if asr.vocab_size != synth.vocab_size + 1:
            raise ConfigError("asr.vocab_size: must equal synthlang.vocab_size + 1 (blank)")

        train_data = dict(data.get("train") or {})
        spec = train_data.pop("specaugment", None)
        policy = _build(SpecAugmentPolicy, "train.specaugment", spec)
        train_data.setdefault("seed", seed)
        train = _build(TrainPlan, "train", train_data, {"audio_text_ratio": _ratio})
        train = dataclasses.replace(train, specaugment=policy)

        eval_section = data.get("eval") or {}
        if not isinstance(eval_section, dict):
            raise ConfigError("eval: expected a mapping")
        bench = _build(BenchmarkSettings, "benchmark", data.get("benchmark"))
        return cls(seed, mel, synth, grammar_seed, enhancer, asr, train, eval_section, bench)

    def to_dict(self) -> dict:
        train = dataclasses.asdict(self.train)
        train["audio_text_ratio"] = "{}:{}".format(*self.train.audio_text_ratio)
        synth = dataclasses.asdict(self.synthlang)
        for k in ("pitch_shift_range", "energy_scale_range", "formant_tilt_range"):
            synth[k] = list(synth[k])
        return {
            "seed": self.seed,
            "grammar_seed": self.grammar_seed,
            "mel": dataclasses.asdict(self.mel),
            "synthlang": synth,
            "enhancer": dataclasses.asdict(self.enhancer),
            "asr": dataclasses.asdict(self.asr),
            "train": train,
            "eval": dict(self.eval),
            "benchmark": dataclasses.asdict(self.benchmark),
        }


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config: file {p} does not exist")
    try:
        data = yaml.safe_load(p.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"config: cannot parse {p}: {exc}") from None
    return RunConfig.from_dict(data)


def dump_config(config: RunConfig) -> str:
    return yaml.safe_dump(config.to_dict(), sort_keys=False)
