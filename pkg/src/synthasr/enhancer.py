"""Spectrogram Enhancer: a StyleGAN2-style conditional GAN on 80-band mels.

The generator starts from a fixed random ``5 x L/16`` image and grows it
through ``n_blocks`` 2x-upsampling blocks of modulated convolutions to
``80 x L``. Each block's input receives the blurry spectrogram average-pooled
to that block's resolution, broadcast over channels; the accumulated output
projections form a residual that is added once to the full-resolution blurry
input. Zeroing the output projections therefore makes the enhancer an exact
identity.

The discriminator mirrors the generator with strided residual blocks and
averages over time before the final projection, so it scores spectrograms
of any length with one logit.

Spectrograms are mapped affinely to ``[-1, 1]`` with corpus min/max before
entering either network; the residual is mapped back to log-mel units.
"""

from __future__ import annotations

import copy
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, fields
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .io import Checkpoint
from .mel import MelSpectrogram
from .synthlang import derive_seed


class EnhancerError(RuntimeError):
    pass


@dataclass(frozen=True)
class EnhancerConfig:
    latent_dim: int = 192
    style_depth: int = 4
    capacity: int = 16
    max_feature_maps: int = 192
    n_blocks: int = 4
    gp_every: int = 4
    gp_weight: float = 10.0
    consistency_weight: float = 0.1
    adam_beta1: float = 0.5
    adam_beta2: float = 0.9
    lr: float = 2e-4
    d_lr: float | None = None  # discriminator rate; defaults to ``lr``
    batch_size: int = 16
    ema_decay: float = 0.995  # generator weight averaging; 0 disables
    n_mels: int = 80
    base_freq: int = 5
    crop_frames: int = 64
    max_frames: int = 4096
    steps: int = 1000

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if value is None and f.name == "d_lr":
                continue
            if f.name in ("consistency_weight", "gp_weight", "ema_decay"):
                if value < 0:
                    raise ValueError(f"enhancer.{f.name} must be >= 0")
            elif value <= 0:
                raise ValueError(f"enhancer.{f.name} must be positive")
        if self.base_freq * 2 ** self.n_blocks != self.n_mels:
            raise ValueError(
                f"enhancer.n_blocks={self.n_blocks} does not satisfy n_mels = base_freq * 2**n_blocks "
                f"({self.n_mels} vs {self.base_freq} * 2**{self.n_blocks})"
            )
        if self.ema_decay >= 1:
            raise ValueError("enhancer.ema_decay must be < 1")
        if not 0 <= self.adam_beta1 < 1 or not 0 <= self.adam_beta2 < 1:
            raise ValueError("enhancer adam betas must be in [0, 1)")
        if self.crop_frames % self.scale != 0:
            raise ValueError(f"enhancer.crop_frames must be a multiple of {self.scale}")

    @property
    def scale(self) -> int:
        return 2 ** self.n_blocks

    @classmethod
    def from_dict(cls, d: dict) -> "EnhancerConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown enhancer field(s): {', '.join(sorted(unknown))}")
        return cls(**d)


# -- building blocks ---------------------------------------------------------


def leaky_relu(x: torch.Tensor) -> torch.Tensor:
    return F.leaky_relu(x, 0.2)


class EqualLinear(nn.Module):
    """Linear layer with a learning-rate multiplier folded into the weights."""

    def __init__(self, in_dim: int, out_dim: int, lr_mul: float = 0.1):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(out_dim, in_dim))
        self.bias = nn.Parameter(torch.zeros(out_dim))
        self.lr_mul = lr_mul

    def forward(self, x):
        return F.linear(x, self.weight * self.lr_mul, self.bias * self.lr_mul)


class StyleVectorizer(nn.Module):
    def __init__(self, latent_dim: int, depth: int, lr_mul: float = 0.1):
        super().__init__()
        layers = []
        for _ in range(depth):
            layers.extend([EqualLinear(latent_dim, latent_dim, lr_mul), nn.LeakyReLU(0.2)])
        self.net = nn.Sequential(*layers)

    def forward(self, z):
        return self.net(F.normalize(z, dim=1))


class Conv2DMod(nn.Module):
    """Convolution whose input channels are scaled per sample by a style."""

    def __init__(self, in_chan: int, out_chan: int, kernel: int, demod: bool = True, eps: float = 1e-8):
        super().__init__()
        self.out_chan = out_chan
        self.kernel = kernel
        self.demod = demod
        self.eps = eps
        self.weight = nn.Parameter(torch.empty(out_chan, in_chan, kernel, kernel))
        nn.init.kaiming_normal_(self.weight, a=0, mode="fan_in", nonlinearity="leaky_relu")

    def forward(self, x, style):
        b, c, h, w = x.shape
        weights = self.weight[None] * (style[:, None, :, None, None] + 1)
        if self.demod:
            weights = weights * torch.rsqrt((weights ** 2).sum(dim=(2, 3, 4), keepdim=True) + self.eps)
        weights = weights.reshape(b * self.out_chan, c, self.kernel, self.kernel)
        out = F.conv2d(x.reshape(1, b * c, h, w), weights, padding=self.kernel // 2, groups=b)
        return out.reshape(b, self.out_chan, h, w)


class OutputProjection(nn.Module):
    """1x1 modulated projection to the single spectrogram channel."""

    def __init__(self, latent_dim: int, in_chan: int):
        super().__init__()
        self.to_style = nn.Linear(latent_dim, in_chan)
        self.conv = Conv2DMod(in_chan, 1, 1, demod=False)
        # start close to the identity enhancer
        with torch.no_grad():
            self.conv.weight.mul_(0.1)

    def forward(self, x, w):
        return self.conv(x, self.to_style(w))


class GeneratorBlock(nn.Module):
    def __init__(self, latent_dim: int, in_chan: int, out_chan: int):
        super().__init__()
        self.to_style1 = nn.Linear(latent_dim, in_chan)
        self.to_noise1 = nn.Linear(1, out_chan)
        self.conv1 = Conv2DMod(in_chan, out_chan, 3)
        self.to_style2 = nn.Linear(latent_dim, out_chan)
        self.to_noise2 = nn.Linear(1, out_chan)
        self.conv2 = Conv2DMod(out_chan, out_chan, 3)
        self.to_out = OutputProjection(latent_dim, out_chan)

    def forward(self, x, prev_out, w, noise):
        x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        # per-pixel noise, cropped from the full-resolution map
        n = noise[:, : x.shape[2], : x.shape[3], :]
        x = leaky_relu(self.conv1(x, self.to_style1(w)) + self.to_noise1(n).permute(0, 3, 1, 2))
        x = leaky_relu(self.conv2(x, self.to_style2(w)) + self.to_noise2(n).permute(0, 3, 1, 2))
        out = self.to_out(x, w)
        if prev_out is not None:
            out = out + F.interpolate(prev_out, scale_factor=2, mode="bilinear", align_corners=False)
        return x, out


def _generator_channels(config: EnhancerConfig) -> list[int]:
    chans = [min(config.capacity * 2 ** (i + 1), config.max_feature_maps) for i in range(config.n_blocks)][::-1]
    return [chans[0], *chans]


def _discriminator_channels(config: EnhancerConfig) -> list[int]:
    return [1] + [min(config.capacity * 2 ** (i + 1), config.max_feature_maps) for i in range(config.n_blocks)]


class Generator(nn.Module):
    def __init__(self, config: EnhancerConfig):
        super().__init__()
        self.config = config
        chans = _generator_channels(config)
        self.style = StyleVectorizer(config.latent_dim, config.style_depth)
        self.initial_conv = nn.Conv2d(1, chans[0], 3, padding=1)
        self.blocks = nn.ModuleList(
            GeneratorBlock(config.latent_dim, cin, cout) for cin, cout in zip(chans[:-1], chans[1:])
        )

    def forward(self, cond, base, z, noise):
        """``cond``: normalized blurry ``[B, 1, n_mels, T]`` with ``T`` a multiple
        of ``2**n_blocks``; ``base``: ``[1, 1, base_freq, T / 2**n_blocks]``;
        ``noise``: ``[B, n_mels, T, 1]`` uniform. Returns the residual in
        normalized units."""
        w = self.style(z)
        x = self.initial_conv(base).expand(cond.shape[0], -1, -1, -1)
        out = None
        for i, block in enumerate(self.blocks):
            factor = 2 ** (len(self.blocks) - i)
            x = x + F.avg_pool2d(cond, factor)
            x, out = block(x, out, w, noise)
        return out


class DiscriminatorBlock(nn.Module):
    def __init__(self, in_chan: int, out_chan: int):
        super().__init__()
        self.res = nn.Conv2d(in_chan, out_chan, 1, stride=2)
        self.net = nn.Sequential(
            nn.Conv2d(in_chan, out_chan, 3, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(out_chan, out_chan, 3, padding=1),
            nn.LeakyReLU(0.2),
        )
        self.down = nn.Conv2d(out_chan, out_chan, 3, padding=1, stride=2)

    def forward(self, x):
        return (self.down(self.net(x)) + self.res(x)) / math.sqrt(2)


class Discriminator(nn.Module):
    def __init__(self, config: EnhancerConfig):
        super().__init__()
        chans = _discriminator_channels(config)
        self.blocks = nn.Sequential(*(DiscriminatorBlock(cin, cout) for cin, cout in zip(chans[:-1], chans[1:])))
        self.final_conv = nn.Conv2d(chans[-1], chans[-1], 3, padding=1)
        self.to_logit = nn.Linear(chans[-1] * config.base_freq, 1)

    def forward(self, x):
        x = self.blocks(x)
        x = leaky_relu(self.final_conv(x))
        x = x.mean(dim=3)
        return self.to_logit(x.flatten(1)).squeeze(1)


# -- the enhancer ------------------------------------------------------------


class Enhancer(nn.Module):
    """Generator, discriminator, fixed noise base and value normalization."""

    def __init__(self, config: EnhancerConfig | None = None, seed: int = 0, value_range: tuple[float, float] = (-11.6, 4.0)):
        super().__init__()
        self.config = config = config or EnhancerConfig()
        lo, hi = value_range
        if not hi > lo:
            raise ValueError("enhancer value range must satisfy hi > lo")
        self.seed = int(seed)
        self.value_range = (float(lo), float(hi))
        gen = torch.Generator().manual_seed(self.seed)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(self.seed)
            self.generator = Generator(config)
            self.discriminator = Discriminator(config)
        noise = torch.randn(1, 1, config.base_freq, config.max_frames // config.scale, generator=gen)
        self.register_buffer("noise_base", noise, persistent=False)

    # normalization

    def normalize(self, x: torch.Tensor) -> torch.Tensor:
        lo, hi = self.value_range
        return (x - lo) * (2.0 / (hi - lo)) - 1.0

    @property
    def residual_scale(self) -> float:
        lo, hi = self.value_range
        return (hi - lo) / 2.0

    def base_image(self, frames: int) -> torch.Tensor:
        cols = frames // self.config.scale
        if cols > self.noise_base.shape[-1]:
            raise EnhancerError(f"input of {frames} frames exceeds enhancer max_frames={self.config.max_frames}")
        return self.noise_base[..., :cols]

    def latents(self, seeds: Sequence[int]) -> torch.Tensor:
        rows = [torch.randn(self.config.latent_dim, generator=torch.Generator().manual_seed(int(s))) for s in seeds]
        return torch.stack(rows)

    def pixel_noise(self, seeds: Sequence[int], frames: int) -> torch.Tensor:
        rows = [
            torch.rand(self.config.n_mels, frames, 1, generator=torch.Generator().manual_seed(derive_seed(int(s), 1)))
            for s in seeds
        ]
        return torch.stack(rows)

    def residual(self, cond_norm: torch.Tensor, seeds: Sequence[int]) -> torch.Tensor:
        """Generator output in normalized units for a padded ``[B, 1, n_mels, T]``
        input; sample ``i`` draws its latent and pixel noise from ``seeds[i]``."""
        frames = cond_norm.shape[-1]
        return self.generator(cond_norm, self.base_image(frames), self.latents(seeds), self.pixel_noise(seeds, frames))

    def generate_normalized(self, cond_norm: torch.Tensor, seeds: Sequence[int]) -> torch.Tensor:
        return cond_norm + self.residual(cond_norm, seeds)

    def enhance_batch(self, blurry: torch.Tensor, latent_seeds: Sequence[int]) -> torch.Tensor:
        """Enhance ``[B, n_mels, L]`` log-mels; returns the same shape."""
        if blurry.ndim != 3 or blurry.shape[1] != self.config.n_mels:
            raise EnhancerError(f"expected [B, {self.config.n_mels}, L] input, got {tuple(blurry.shape)}")
        length = blurry.shape[-1]
        if length < 1:
            raise EnhancerError("input must have at least one frame")
        scale = self.config.scale
        padded_len = -(-length // scale) * scale
        x = blurry
        if padded_len != length:
            x = torch.cat([x, x[..., -1:].expand(-1, -1, padded_len - length)], dim=-1)
        cond = self.normalize(x.float()).unsqueeze(1)
        residual = self.residual(cond, latent_seeds)
        residual = residual.squeeze(1)[..., :length] * self.residual_scale
        return blurry + residual.to(blurry.dtype)

    def score(self, mels: torch.Tensor) -> torch.Tensor:
        """Discriminator logits for ``[B, n_mels, L]`` log-mels."""
        if mels.ndim != 3 or mels.shape[1] != self.config.n_mels:
            raise EnhancerError(f"expected [B, {self.config.n_mels}, L] input, got {tuple(mels.shape)}")
        if mels.shape[-1] < self.config.scale:
            raise EnhancerError(f"discriminator needs at least {self.config.scale} frames")
        return self.discriminator(self.normalize(mels.float()).unsqueeze(1))

    def zero_output_projections(self) -> None:
        with torch.no_grad():
            for block in self.generator.blocks:
                for p in block.to_out.parameters():
                    p.zero_()

    def parameter_digest(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for name, tensor in self.state_dict().items():
            h.update(name.encode())
            h.update(tensor.detach().cpu().numpy().tobytes())
        return h.hexdigest()

    # persistence

    def to_checkpoint(self, meta: dict | None = None, extra_tensors: dict | None = None) -> Checkpoint:
        tensors = OrderedDict((k, v.detach().cpu().numpy()) for k, v in self.state_dict().items())
        if extra_tensors:
            tensors.update(extra_tensors)
        info = {"model_seed": self.seed, "noise_seed": self.seed, "value_range": list(self.value_range)}
        info.update(meta or {})
        return Checkpoint("enhancer", asdict(self.config), tensors, info)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "Enhancer":
        if ckpt.component != "enhancer":
            raise EnhancerError(f"checkpoint holds a {ckpt.component!r} model, not an enhancer")
        model = cls(EnhancerConfig.from_dict(ckpt.config), ckpt.meta["model_seed"], tuple(ckpt.meta["value_range"]))
        state = {k: torch.from_numpy(np.array(v)) for k, v in ckpt.tensors.items() if not k.startswith(("optim.", "train."))}
        model.load_state_dict(state)
        return model


def enhance(blurry: MelSpectrogram, latent_seed: int, params: Enhancer) -> MelSpectrogram:
    if blurry.n_mels != params.config.n_mels:
        raise EnhancerError(f"enhancer expects {params.config.n_mels} bands, got {blurry.n_mels}")
    with torch.no_grad():
        out = params.enhance_batch(torch.from_numpy(blurry.values)[None], [latent_seed])
    return blurry.with_values(out[0].numpy())


def discriminate(mel: MelSpectrogram, params: Enhancer) -> float:
    if mel.n_mels != params.config.n_mels:
        raise EnhancerError(f"discriminator expects {params.config.n_mels} bands, got {mel.n_mels}")
    with torch.no_grad():
        return float(params.score(torch.from_numpy(mel.values)[None])[0])


# -- losses ------------------------------------------------------------------


def _scores(x) -> torch.Tensor:
    return x if torch.is_tensor(x) else torch.tensor(x, dtype=torch.float64)


def hinge_d_loss(real_scores, fake_scores):
    real_scores, fake_scores = _scores(real_scores), _scores(fake_scores)
    return F.relu(1 - real_scores).mean() + F.relu(1 + fake_scores).mean()


def hinge_g_loss(fake_scores):
    return -_scores(fake_scores).mean()


def gradient_penalty(discriminator: Callable[[torch.Tensor], torch.Tensor], real_batch: torch.Tensor, weight: float = 10.0, create_graph: bool = True):
    """R1 penalty: ``weight / 2 * E ||grad_x D(x)||^2`` at real samples."""
    x = real_batch.detach().requires_grad_(True)
    scores = discriminator(x)
    if not scores.requires_grad:
        return torch.zeros((), dtype=x.dtype)
    (grad,) = torch.autograd.grad(scores.sum(), x, create_graph=create_graph, allow_unused=True)
    if grad is None:
        return torch.zeros((), dtype=x.dtype)
    return 0.5 * weight * grad.pow(2).flatten(1).sum(dim=1).mean()


def consistency_loss(fake, real, factor: int = 4):
    """L1 between the two inputs after average-pooling the frequency axis by
    ``factor``. Accepts ``[..., n_mels, L]`` tensors or MelSpectrograms."""
    if isinstance(fake, MelSpectrogram):
        fake = torch.from_numpy(fake.values.astype(np.float64))
    if isinstance(real, MelSpectrogram):
        real = torch.from_numpy(real.values.astype(np.float64))
    if fake.shape != real.shape:
        raise ValueError(f"shape mismatch: {tuple(fake.shape)} vs {tuple(real.shape)}")
    if fake.shape[-2] % factor != 0:
        raise ValueError(f"band count {fake.shape[-2]} is not divisible by {factor}")

    def pool(x):
        return x.reshape(*x.shape[:-2], x.shape[-2] // factor, factor, x.shape[-1]).mean(dim=-2)

    return (pool(fake) - pool(real)).abs().mean()


# -- training ----------------------------------------------------------------


@dataclass
class GanStepReport:
    step: int
    d_loss: float
    g_loss: float
    g_adv: float
    consistency: float
    gp: float | None = None

    CSV_FIELDS = ("step", "d_loss", "g_loss", "g_adv", "consistency", "gp")

    def csv_row(self) -> str:
        gp = "" if self.gp is None else repr(self.gp)
        return f"{self.step},{self.d_loss!r},{self.g_loss!r},{self.g_adv!r},{self.consistency!r},{gp}"


def pair_value_range(pairs: Sequence[tuple[MelSpectrogram, MelSpectrogram]]) -> tuple[float, float]:
    lo = min(min(float(b.values.min()), float(r.values.min())) for b, r in pairs)
    hi = max(max(float(b.values.max()), float(r.values.max())) for b, r in pairs)
    return lo, hi


def _adam_state_tensors(prefix: str, opt: torch.optim.Optimizer, params: list[nn.Parameter]) -> dict:
    out = {}
    for i, p in enumerate(params):
        state = opt.state.get(p)
        if not state:
            continue
        out[f"{prefix}.{i}.step"] = np.array([float(state["step"])], dtype=np.float64)
        out[f"{prefix}.{i}.exp_avg"] = state["exp_avg"].detach().numpy().copy()
        out[f"{prefix}.{i}.exp_avg_sq"] = state["exp_avg_sq"].detach().numpy().copy()
    return out


def _load_adam_state(prefix: str, opt: torch.optim.Optimizer, params: list[nn.Parameter], tensors: dict) -> None:
    for i, p in enumerate(params):
        key = f"{prefix}.{i}.step"
        if key not in tensors:
            continue
        opt.state[p] = {
            "step": torch.tensor(float(tensors[key][0])),
            "exp_avg": torch.from_numpy(np.array(tensors[f"{prefix}.{i}.exp_avg"])),
            "exp_avg_sq": torch.from_numpy(np.array(tensors[f"{prefix}.{i}.exp_avg_sq"])),
        }


class EnhancerTrainer:
    """Alternating hinge-loss GAN training on (blurry, real) pairs.

    Batch sampling and latents for step ``s`` derive from ``(seed, s)``, so a
    run resumed from a checkpoint continues exactly where it stopped.
    """

    def __init__(self, pairs: Sequence[tuple[MelSpectrogram, MelSpectrogram]], config: EnhancerConfig, seed: int, enhancer: Enhancer | None = None):
        self.pairs = list(pairs)
        if not self.pairs:
            raise EnhancerError("need at least one (blurry, real) pair")
        self.config = config
        self.seed = int(seed)
        self.enhancer = enhancer or Enhancer(config, seed=self.seed, value_range=pair_value_range(self.pairs))
        self.step = 0
        betas = (config.adam_beta1, config.adam_beta2)
        self._g_params = list(self.enhancer.generator.parameters())
        self._d_params = list(self.enhancer.discriminator.parameters())
        self.opt_g = torch.optim.Adam(self._g_params, lr=config.lr, betas=betas)
        self.opt_d = torch.optim.Adam(self._d_params, lr=config.d_lr or config.lr, betas=betas)
        self.ema = None
        if config.ema_decay > 0:
            self.ema = copy.deepcopy(self.enhancer.generator).requires_grad_(False)

    def _batch(self, step: int) -> tuple[torch.Tensor, torch.Tensor]:
        cfg = self.config
        rng = np.random.default_rng(derive_seed(self.seed, step, 1))
        idx = rng.integers(0, len(self.pairs), cfg.batch_size)
        crop = cfg.crop_frames
        blurry = np.empty((cfg.batch_size, cfg.n_mels, crop), dtype=np.float32)
        real = np.empty_like(blurry)
        for row, i in enumerate(idx):
            b, r = self.pairs[i]
            if b.L >= crop:
                start = int(rng.integers(0, b.L - crop + 1))
                blurry[row] = b.values[:, start:start + crop]
                real[row] = r.values[:, start:start + crop]
            else:
                blurry[row] = np.pad(b.values, ((0, 0), (0, crop - b.L)), mode="edge")
                real[row] = np.pad(r.values, ((0, 0), (0, crop - r.L)), mode="edge")
        norm = self.enhancer.normalize
        return norm(torch.from_numpy(blurry)).unsqueeze(1), norm(torch.from_numpy(real)).unsqueeze(1)

    def train_step(self) -> GanStepReport:
        cfg = self.config
        enh = self.enhancer
        step = self.step + 1
        blurry, real = self._batch(step)
        n = blurry.shape[0]
        seeds = [derive_seed(self.seed, step, 2, i) for i in range(n)]

        # discriminator
        with torch.no_grad():
            fake = enh.generate_normalized(blurry, seeds)
        d_loss = hinge_d_loss(enh.discriminator(real), enh.discriminator(fake))
        total_d = d_loss
        gp = None
        if step % cfg.gp_every == 0:
            gp = gradient_penalty(enh.discriminator, real, cfg.gp_weight)
            total_d = total_d + gp
        self.opt_d.zero_grad(set_to_none=True)
        total_d.backward()
        self.opt_d.step()

        # generator
        seeds = [derive_seed(self.seed, step, 3, i) for i in range(n)]
        fake = enh.generate_normalized(blurry, seeds)
        g_adv = hinge_g_loss(enh.discriminator(fake))
        # consistency is measured in log-mel units, not the normalized range
        cons = consistency_loss(fake.squeeze(1), real.squeeze(1)) * enh.residual_scale
        g_loss = g_adv + cfg.consistency_weight * cons
        self.opt_g.zero_grad(set_to_none=True)
        g_loss.backward()
        self.opt_g.step()
        if self.ema is not None:
            with torch.no_grad():
                for avg, p in zip(self.ema.parameters(), self._g_params):
                    avg.lerp_(p, 1.0 - cfg.ema_decay)
        # the D update above must not see G-step gradients
        self.opt_d.zero_grad(set_to_none=True)

        report = GanStepReport(
            step=step,
            d_loss=d_loss.item(),
            g_loss=g_loss.item(),
            g_adv=g_adv.item(),
            consistency=cons.item(),
            gp=None if gp is None else gp.item(),
        )
        values = [report.d_loss, report.g_loss, report.consistency] + ([report.gp] if gp is not None else [])
        if not all(math.isfinite(v) for v in values):
            raise EnhancerError(f"non-finite loss at step {step}: {report}")
        self.step = step
        return report

    def run(self, n_steps: int) -> Iterator[GanStepReport]:
        for _ in range(n_steps):
            yield self.train_step()

    def averaged_enhancer(self) -> Enhancer:
        """The enhancer with the weight-averaged generator, used for inference."""
        if self.ema is None:
            return self.enhancer
        out = copy.deepcopy(self.enhancer)
        out.generator.load_state_dict(self.ema.state_dict())
        return out.eval()

    def to_checkpoint(self) -> Checkpoint:
        # the averaged weights are the checkpoint's model; the raw generator
        # and optimizer moments ride along so training can resume
        extra = {}
        if self.ema is not None:
            for k, v in self.enhancer.generator.state_dict().items():
                extra[f"train.generator.{k}"] = v.detach().numpy().copy()
        extra.update(_adam_state_tensors("optim.g", self.opt_g, self._g_params))
        extra.update(_adam_state_tensors("optim.d", self.opt_d, self._d_params))
        return self.averaged_enhancer().to_checkpoint({"step": self.step, "train_seed": self.seed}, extra)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, pairs) -> "EnhancerTrainer":
        enhancer = Enhancer.from_checkpoint(ckpt)
        trainer = cls(pairs, enhancer.config, ckpt.meta.get("train_seed", enhancer.seed), enhancer)
        trainer.step = int(ckpt.meta.get("step", 0))
        raw = {k[len("train.generator."):]: torch.from_numpy(np.array(v)) for k, v in ckpt.tensors.items() if k.startswith("train.generator.")}
        if raw:
            enhancer.generator.load_state_dict(raw)
        _load_adam_state("optim.g", trainer.opt_g, trainer._g_params, ckpt.tensors)
        _load_adam_state("optim.d", trainer.opt_d, trainer._d_params, ckpt.tensors)
        return trainer


def train_enhancer(
    pairs: Iterable[tuple[MelSpectrogram, MelSpectrogram]],
    config: EnhancerConfig,
    seed: int,
    steps: int | None = None,
) -> tuple[Enhancer, list[GanStepReport]]:
    trainer = EnhancerTrainer(list(pairs), config, seed)
    reports = list(trainer.run(config.steps if steps is None else steps))
    return trainer.averaged_enhancer(), reports
