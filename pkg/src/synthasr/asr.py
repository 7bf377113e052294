"""Miniature convolution-augmented CTC recognizer.

Class 0 is the CTC blank; token ``k`` of the synthetic language is class
``k + 1``. Every sub-layer masks padded frames, so an utterance's logits do
not depend on what else is in its batch (except through BatchNorm batch
statistics in train mode).
"""

from __future__ import annotations

import copy
import itertools
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, fields, replace
from typing import Literal, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .io import Checkpoint
from .mel import MelSpectrogram

NormMode = Literal["LN", "BN", "FusedBN"]
BLANK = 0


@dataclass(frozen=True)
class AsrConfig:
    n_mels: int = 80
    d_model: int = 64
    n_blocks: int = 2
    subsampling: int = 2
    vocab_size: int = 25
    norm_mode: NormMode = "LN"
    n_heads: int = 4
    conv_kernel: int = 7
    ff_mult: int = 4
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ValueError("asr.vocab_size must be >= 2")
        if self.subsampling < 1:
            raise ValueError("asr.subsampling must be >= 1")
        if self.norm_mode not in ("LN", "BN", "FusedBN"):
            raise ValueError(f"asr.norm_mode must be LN, BN or FusedBN, got {self.norm_mode!r}")
        if self.d_model % self.n_heads != 0:
            raise ValueError("asr.d_model must be divisible by asr.n_heads")
        if self.conv_kernel % 2 != 1:
            raise ValueError("asr.conv_kernel must be odd")
        if self.bn_eps <= 0:
            raise ValueError("asr.bn_eps must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "AsrConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown asr field(s): {', '.join(sorted(unknown))}")
        return cls(**d)


def fold_bn_affine(gamma, beta, mean, var, eps):
    """Per-channel ``(w, b)`` with ``w * x + b == BN_eval(x)``."""
    w = gamma / np.sqrt(var + eps) if isinstance(gamma, np.ndarray) else gamma / torch.sqrt(var + eps)
    return w, beta - mean * w


# -- normalization layers over [B, C, T] -------------------------------------


class MaskedBatchNorm(nn.Module):
    """BatchNorm over channels whose batch statistics skip padded frames."""

    def __init__(self, channels: int, eps: float, momentum: float):
        super().__init__()
        self.eps = eps
        self.momentum = momentum
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.register_buffer("running_mean", torch.zeros(channels))
        self.register_buffer("running_var", torch.ones(channels))

    def forward(self, x, mask):
        if self.training:
            m = mask[:, None, :].to(x.dtype)
            count = m.sum().clamp_min(1.0)
            mean = (x * m).sum(dim=(0, 2)) / count
            var = (((x - mean[None, :, None]) * m) ** 2).sum(dim=(0, 2)) / count
            with torch.no_grad():
                unbiased = var * count / (count - 1).clamp_min(1.0)
                self.running_mean.mul_(1 - self.momentum).add_(self.momentum * mean)
                self.running_var.mul_(1 - self.momentum).add_(self.momentum * unbiased)
        else:
            mean, var = self.running_mean, self.running_var
        scale = self.weight / torch.sqrt(var + self.eps)
        return (x - mean[None, :, None]) * scale[None, :, None] + self.bias[None, :, None]


class ChannelLayerNorm(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.ln = nn.LayerNorm(channels)

    def forward(self, x, mask):
        return self.ln(x.transpose(1, 2)).transpose(1, 2)


class ChannelAffine(nn.Module):
    """Trainable per-channel projection replacing a folded BatchNorm."""

    def __init__(self, channels: int):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, x, mask):
        return x * self.weight[None, :, None] + self.bias[None, :, None]


def _make_norm(config: AsrConfig):
    if config.norm_mode == "BN":
        return MaskedBatchNorm(config.d_model, config.bn_eps, config.bn_momentum)
    if config.norm_mode == "LN":
        return ChannelLayerNorm(config.d_model)
    return ChannelAffine(config.d_model)


# -- encoder -----------------------------------------------------------------


class FeedForward(nn.Module):
    def __init__(self, d: int, mult: int):
        super().__init__()
        self.net = nn.Sequential(nn.LayerNorm(d), nn.Linear(d, d * mult), nn.SiLU(), nn.Linear(d * mult, d))

    def forward(self, x):
        return self.net(x)


class ConvModule(nn.Module):
    def __init__(self, config: AsrConfig):
        super().__init__()
        d = config.d_model
        self.ln = nn.LayerNorm(d)
        self.pointwise1 = nn.Conv1d(d, 2 * d, 1)
        self.depthwise = nn.Conv1d(d, d, config.conv_kernel, padding=config.conv_kernel // 2, groups=d)
        self.norm = _make_norm(config)
        self.pointwise2 = nn.Conv1d(d, d, 1)

    def forward(self, x, mask):
        m = mask[:, None, :].to(x.dtype)
        y = F.glu(self.pointwise1(self.ln(x).transpose(1, 2)), dim=1) * m
        y = self.norm(self.depthwise(y), mask)
        y = self.pointwise2(F.silu(y)) * m
        return y.transpose(1, 2)


class ConformerBlock(nn.Module):
    def __init__(self, config: AsrConfig):
        super().__init__()
        d = config.d_model
        self.ff1 = FeedForward(d, config.ff_mult)
        self.attn_ln = nn.LayerNorm(d)
        self.attn = nn.MultiheadAttention(d, config.n_heads, batch_first=True)
        self.conv = ConvModule(config)
        self.ff2 = FeedForward(d, config.ff_mult)
        self.out_ln = nn.LayerNorm(d)

    def forward(self, x, mask):
        x = x + 0.5 * self.ff1(x)
        h = self.attn_ln(x)
        a, _ = self.attn(h, h, h, key_padding_mask=~mask, need_weights=False)
        x = x + a
        x = x + self.conv(x, mask)
        x = x + 0.5 * self.ff2(x)
        return self.out_ln(x) * mask[..., None].to(x.dtype)


def _sinusoids(length: int, d: int) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float32)[:, None]
    div = torch.exp(torch.arange(0, d, 2, dtype=torch.float32) * (-math.log(10000.0) / d))
    pe = torch.zeros(length, d)
    pe[:, 0::2] = torch.sin(pos * div)
    pe[:, 1::2] = torch.cos(pos * div)
    return pe


def length_mask(lengths: torch.Tensor, max_len: int) -> torch.Tensor:
    return torch.arange(max_len)[None, :] < lengths[:, None]


class AsrModel(nn.Module):
    def __init__(self, config: AsrConfig | None = None):
        super().__init__()
        self.config = config = config or AsrConfig()
        s = config.subsampling
        self.subsample = nn.Conv1d(config.n_mels, config.d_model, kernel_size=2 * s - 1 if s > 1 else 1, stride=s, padding=s - 1)
        self.blocks = nn.ModuleList(ConformerBlock(config) for _ in range(config.n_blocks))
        self.head = nn.Linear(config.d_model, config.vocab_size)

    @property
    def norm_mode(self) -> str:
        return self.config.norm_mode

    def output_lengths(self, lengths: torch.Tensor) -> torch.Tensor:
        s = self.config.subsampling
        return torch.div(lengths + s - 1, s, rounding_mode="floor")

    def forward(self, mels: torch.Tensor, lengths: torch.Tensor | None = None):
        """``mels``: ``[B, n_mels, L]``. Returns ``(logits [B, T', V], T' lengths)``."""
        if mels.ndim != 3 or mels.shape[1] != self.config.n_mels:
            raise ValueError(f"expected [B, {self.config.n_mels}, L] features, got {tuple(mels.shape)}")
        b, _, length = mels.shape
        if lengths is None:
            lengths = torch.full((b,), length, dtype=torch.long)
        in_mask = length_mask(lengths, length)[:, None, :].to(mels.dtype)
        count = lengths.to(mels.dtype)[:, None, None]
        mean = (mels * in_mask).sum(-1, keepdim=True) / count
        var = (((mels - mean) * in_mask) ** 2).sum(-1, keepdim=True) / count
        x = (mels - mean) / torch.sqrt(var + 1e-5) * in_mask

        x = self.subsample(x).transpose(1, 2)
        out_lengths = self.output_lengths(lengths)
        mask = length_mask(out_lengths, x.shape[1])
        x = (x + _sinusoids(x.shape[1], x.shape[2])) * mask[..., None].to(x.dtype)
        for block in self.blocks:
            x = block(x, mask)
        return self.head(x), out_lengths

    def parameter_digest(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for name, tensor in self.state_dict().items():
            h.update(name.encode())
            h.update(tensor.detach().cpu().numpy().tobytes())
        return h.hexdigest()

    def to_checkpoint(self, meta: dict | None = None) -> Checkpoint:
        tensors = OrderedDict((k, v.detach().cpu().numpy()) for k, v in self.state_dict().items())
        return Checkpoint("asr", asdict(self.config), tensors, dict(meta or {}))

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "AsrModel":
        if ckpt.component != "asr":
            raise ValueError(f"checkpoint holds a {ckpt.component!r} model, not an ASR model")
        model = cls(AsrConfig.from_dict(ckpt.config))
        model.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in ckpt.tensors.items()})
        return model


def encode(mel: MelSpectrogram, params: AsrModel, mode: Literal["train", "eval"] = "eval") -> torch.Tensor:
    """Logits ``[T', vocab]`` for a single utterance."""
    if mel.n_mels != params.config.n_mels:
        raise ValueError(f"model expects {params.config.n_mels} bands, got {mel.n_mels}")
    params.train(mode == "train")
    with torch.set_grad_enabled(mode == "train"):
        logits, _ = params(torch.from_numpy(mel.values)[None])
    return logits[0]


def fuse_batchnorm(model: AsrModel) -> AsrModel:
    """Copy of a BN model with every BatchNorm folded into a trainable affine."""
    if model.config.norm_mode != "BN":
        raise ValueError(f"fuse_batchnorm needs a BN model, got norm_mode={model.config.norm_mode}")
    fused = AsrModel(replace(model.config, norm_mode="FusedBN"))
    state = model.state_dict()
    new_state = OrderedDict()
    for key, value in fused.state_dict().items():
        if key.endswith("norm.weight") or key.endswith("norm.bias"):
            prefix = key.rsplit(".", 1)[0]
            w, b = fold_bn_affine(
                state[f"{prefix}.weight"].double(),
                state[f"{prefix}.bias"].double(),
                state[f"{prefix}.running_mean"].double(),
                state[f"{prefix}.running_var"].double(),
                model.config.bn_eps,
            )
            new_state[key] = (w if key.endswith("weight") else b).float()
        else:
            new_state[key] = state[key].clone()
    fused.load_state_dict(new_state)
    fused.train(model.training)
    return fused


# -- CTC ---------------------------------------------------------------------


def min_ctc_frames(target: Sequence[int]) -> int:
    """Frames needed to emit ``target``: one per label plus a blank between repeats."""
    return len(target) + sum(1 for a, b in zip(target, target[1:]) if a == b)


def ctc_loss(logits: torch.Tensor, target: Sequence[int], blank: int = BLANK) -> torch.Tensor:
    """Negative log-likelihood of ``target`` (class ids) under ``[T', V]`` logits."""
    t_len = logits.shape[0]
    if min_ctc_frames(target) > t_len:
        raise ValueError(f"target of length {len(target)} cannot be aligned to {t_len} frames")
    log_probs = F.log_softmax(logits.double() if logits.dtype == torch.float64 else logits, dim=-1)
    targets = torch.tensor(list(target), dtype=torch.long)
    return F.ctc_loss(
        log_probs[:, None, :],
        targets[None, :] if len(target) else torch.zeros((1, 0), dtype=torch.long),
        torch.tensor([t_len]),
        torch.tensor([len(target)]),
        blank=blank,
        reduction="sum",
    )


def batch_ctc_loss(logits: torch.Tensor, out_lengths: torch.Tensor, targets: Sequence[Sequence[int]], blank: int = BLANK) -> torch.Tensor:
    """Mean per-utterance CTC loss over a padded batch."""
    log_probs = F.log_softmax(logits, dim=-1).transpose(0, 1)
    flat = torch.tensor(list(itertools.chain.from_iterable(targets)), dtype=torch.long)
    target_lengths = torch.tensor([len(t) for t in targets], dtype=torch.long)
    loss = F.ctc_loss(log_probs, flat, out_lengths, target_lengths, blank=blank, reduction="none")
    return loss.mean()


def greedy_ctc_decode(logits, blank: int = BLANK) -> list[int]:
    """Per-frame argmax, merge repeats, drop blanks."""
    ids = np.asarray(logits.detach() if torch.is_tensor(logits) else logits).argmax(axis=-1)
    out = []
    prev = None
    for i in ids.tolist():
        if i != prev and i != blank:
            out.append(i)
        prev = i
    return out


def tokens_to_classes(tokens: Sequence[int]) -> list[int]:
    return [t + 1 for t in tokens]


def classes_to_tokens(classes: Sequence[int]) -> list[int]:
    return [c - 1 for c in classes]


def transcribe(model: AsrModel, mels: Sequence[MelSpectrogram]) -> list[list[int]]:
    """Greedy token sequences for each utterance, eval mode."""
    model.eval()
    out = []
    with torch.no_grad():
        for mel in mels:
            logits = encode(mel, model, "eval")
            out.append(classes_to_tokens(greedy_ctc_decode(logits)))
    return out


def clone_model(model: AsrModel) -> AsrModel:
    return copy.deepcopy(model)
