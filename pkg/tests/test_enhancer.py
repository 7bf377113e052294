import numpy as np
import pytest
import torch

from synthasr.enhancer import (
    Enhancer,
    EnhancerConfig,
    EnhancerError,
    EnhancerTrainer,
    GanStepReport,
    consistency_loss,
    discriminate,
    enhance,
    gradient_penalty,
    hinge_d_loss,
    hinge_g_loss,
    train_enhancer,
)
from synthasr.io import Checkpoint
from synthasr.mel import MelConfig, MelSpectrogram
from synthasr.synthlang import SynthLanguage, derive_seed, make_domain_grammar, sample_text

SMALL = EnhancerConfig(latent_dim=16, style_depth=2, capacity=2, max_feature_maps=8, batch_size=4, crop_frames=32, max_frames=512)


def mel(values):
    return MelSpectrogram(np.asarray(values, dtype=np.float32))


@pytest.fixture(scope="module")
def small_enhancer():
    return Enhancer(SMALL, seed=3)


@pytest.fixture(scope="module")
def pairs():
    lang = SynthLanguage()
    g = make_domain_grammar("A")
    out = []
    for i in range(12):
        t = sample_text(g, derive_seed(0, i))
        out.append(lang.render_pair(t, lang.sample_speaker(i), i))
    return out


# -- hinge losses -------------------------------------------------------------


@pytest.mark.parametrize("real, fake, expected", [([2.0], [-2.0], 0.0), ([0.0], [0.0], 2.0), ([1.0], [-1.0], 0.0), ([0.5, 3.0], [0.2, -4.0], 0.25 + 0.6)])
def test_hinge_d_loss_values(real, fake, expected):
    assert float(hinge_d_loss(real, fake)) == pytest.approx(expected)


@pytest.mark.parametrize("fake, expected", [([3.0], -3.0), ([0.0, 0.0], 0.0), ([1.0, -1.0], 0.0)])
def test_hinge_g_loss_values(fake, expected):
    assert float(hinge_g_loss(fake)) == pytest.approx(expected)


def test_hinge_d_loss_nonnegative_random():
    rng = np.random.default_rng(0)
    for _ in range(200):
        r = rng.normal(scale=5, size=rng.integers(1, 9))
        f = rng.normal(scale=5, size=rng.integers(1, 9))
        assert float(hinge_d_loss(r, f)) >= 0


def test_hinge_gradients_match_finite_differences():
    real = torch.tensor([0.3, -0.7, 1.4], dtype=torch.float64, requires_grad=True)
    fake = torch.tensor([-0.2, 0.8], dtype=torch.float64, requires_grad=True)
    torch.autograd.gradcheck(lambda r, f: hinge_d_loss(r, f), (real, fake), eps=1e-6, atol=1e-4)
    torch.autograd.gradcheck(lambda f: hinge_g_loss(f), (fake,), eps=1e-6, atol=1e-4)


# -- gradient penalty ----------------------------------------------------------


def test_gp_sum_discriminator():
    x = torch.randn(3, 1, 80, 32, dtype=torch.float64)
    gp = gradient_penalty(lambda t: t.flatten(1).sum(1), x, weight=2.0)
    assert float(gp) == pytest.approx(80 * 32)


def test_gp_constant_discriminator_is_zero():
    x = torch.randn(2, 1, 80, 32)
    gp = gradient_penalty(lambda t: torch.zeros(t.shape[0]), x, weight=10.0)
    assert float(gp) == 0.0


def test_gp_matches_central_differences():
    torch.manual_seed(0)
    net = torch.nn.Sequential(
        torch.nn.Conv2d(1, 3, 3, padding=1, dtype=torch.float64),
        torch.nn.Tanh(),
        torch.nn.Flatten(),
        torch.nn.Linear(3 * 4 * 16, 1, dtype=torch.float64),
    )
    disc = lambda t: net(t).squeeze(1)
    x = torch.randn(2, 1, 4, 16, dtype=torch.float64)
    auto = gradient_penalty(disc, x, weight=10.0).item()

    h = 1e-5
    sq = []
    for b in range(2):
        total = 0.0
        flat = x[b].clone().reshape(-1)
        for k in range(flat.numel()):
            plus, minus = flat.clone(), flat.clone()
            plus[k] += h
            minus[k] -= h
            with torch.no_grad():
                d = (disc(plus.reshape(1, 1, 4, 16)) - disc(minus.reshape(1, 1, 4, 16))).item() / (2 * h)
            total += d * d
        sq.append(total)
    expected = 0.5 * 10.0 * np.mean(sq)
    assert auto == pytest.approx(expected, rel=1e-3)


# -- consistency loss ------------------------------------------------------------


def test_consistency_identity_and_offset():
    rng = np.random.default_rng(1)
    real = rng.normal(size=(80, 40))
    assert float(consistency_loss(mel(real), mel(real))) == 0.0
    assert float(consistency_loss(mel(real + 0.75), mel(real))) == pytest.approx(0.75, rel=1e-6)


def test_consistency_ignores_within_group_alternation():
    rng = np.random.default_rng(2)
    real = rng.normal(size=(80, 16))
    alt = np.tile(np.array([1.0, -1.0, 2.0, -2.0])[:, None], (20, 16)) * rng.uniform(0.1, 1, size=(1, 16))
    assert float(consistency_loss(mel(real + alt), mel(real))) == pytest.approx(0.0, abs=1e-6)


def test_consistency_symmetric_and_shape_check():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(80, 20)), rng.normal(size=(80, 20))
    assert float(consistency_loss(mel(a), mel(b))) == pytest.approx(float(consistency_loss(mel(b), mel(a))))
    with pytest.raises(ValueError):
        consistency_loss(mel(a), mel(b[:, :10]))


def test_consistency_gradient():
    a = torch.randn(80, 12, dtype=torch.float64, requires_grad=True)
    b = torch.randn(80, 12, dtype=torch.float64)
    torch.autograd.gradcheck(lambda x: consistency_loss(x, b), (a,), eps=1e-6, atol=1e-4)


# -- generator / discriminator -------------------------------------------------


@pytest.mark.parametrize("length", [16, 64, 70, 257])
def test_enhance_preserves_shape(small_enhancer, length):
    x = mel(np.random.default_rng(length).normal(-4, 2, size=(80, length)))
    out = enhance(x, 5, small_enhancer)
    assert out.values.shape == (80, length)
    assert np.isfinite(out.values).all()


def test_noise_base_size(small_enhancer):
    assert small_enhancer.base_image(64).shape == (1, 1, 5, 4)
    a = Enhancer(SMALL, seed=3).noise_base
    torch.testing.assert_close(a, small_enhancer.noise_base, rtol=0, atol=0)


def test_enhance_deterministic(small_enhancer):
    x = mel(np.random.default_rng(0).normal(-4, 2, size=(80, 48)))
    np.testing.assert_array_equal(enhance(x, 9, small_enhancer).values, enhance(x, 9, small_enhancer).values)
    assert not np.array_equal(enhance(x, 9, small_enhancer).values, enhance(x, 10, small_enhancer).values)


@pytest.mark.parametrize("length", [16, 64, 70, 257])
def test_zero_output_projection_is_identity(length):
    e = Enhancer(SMALL, seed=1)
    e.zero_output_projections()
    x = mel(np.random.default_rng(length).normal(-4, 2, size=(80, length)))
    np.testing.assert_array_equal(enhance(x, 0, e).values, x.values)


def test_wrong_band_count(small_enhancer):
    narrow = MelSpectrogram(np.zeros((40, 32), dtype=np.float32), MelConfig(n_mels=40))
    with pytest.raises(EnhancerError):
        enhance(narrow, 0, small_enhancer)
    with pytest.raises(EnhancerError):
        discriminate(narrow, small_enhancer)


def test_discriminator_one_scalar_any_length(small_enhancer):
    for length in (32, 256):
        s = discriminate(mel(np.random.default_rng(0).normal(size=(80, length))), small_enhancer)
        assert isinstance(s, float)
    x = mel(np.random.default_rng(1).normal(size=(80, 48)))
    assert discriminate(x, small_enhancer) == discriminate(x, small_enhancer)
    assert np.isfinite(discriminate(mel(x.values * 100), small_enhancer))


def test_config_validation():
    with pytest.raises(ValueError):
        EnhancerConfig(n_blocks=3)
    with pytest.raises(ValueError):
        EnhancerConfig(crop_frames=40)
    with pytest.raises(ValueError):
        EnhancerConfig.from_dict({"bogus": 1})


# -- training --------------------------------------------------------------------


def test_gp_only_every_fourth_step(pairs):
    cfg = EnhancerConfig(**{**SMALL.__dict__, "gp_every": 4})
    _, reports = train_enhancer(pairs, cfg, seed=0, steps=8)
    assert [r.step for r in reports if r.gp is not None] == [4, 8]
    for r in reports:
        assert r.g_loss == pytest.approx(r.g_adv + 0.1 * r.consistency, rel=1e-5, abs=1e-6)
        assert r.d_loss >= 0 and r.consistency >= 0
        assert r.gp is None or r.gp >= 0


def test_training_deterministic(pairs):
    a, ra = train_enhancer(pairs, SMALL, seed=4, steps=3)
    b, rb = train_enhancer(pairs, SMALL, seed=4, steps=3)
    assert [r.csv_row() for r in ra] == [r.csv_row() for r in rb]
    assert a.parameter_digest() == b.parameter_digest()


def test_resume_matches_uninterrupted(pairs):
    full = EnhancerTrainer(pairs, SMALL, seed=2)
    list(full.run(4))
    part = EnhancerTrainer(pairs, SMALL, seed=2)
    list(part.run(2))
    blob = part.to_checkpoint().to_bytes()
    resumed = EnhancerTrainer.from_checkpoint(Checkpoint.from_bytes(blob), pairs)
    list(resumed.run(2))
    assert resumed.step == 4
    assert resumed.enhancer.parameter_digest() == full.enhancer.parameter_digest()
    assert resumed.averaged_enhancer().parameter_digest() == full.averaged_enhancer().parameter_digest()


def test_weight_averaging(pairs):
    trainer = EnhancerTrainer(pairs, SMALL, seed=1)
    start = {k: v.clone() for k, v in trainer.enhancer.generator.state_dict().items()}
    trainer.train_step()
    d = SMALL.ema_decay
    raw = trainer.enhancer.generator.state_dict()
    avg = trainer.averaged_enhancer().generator.state_dict()
    for k in start:
        torch.testing.assert_close(avg[k], d * start[k] + (1 - d) * raw[k])
    # the checkpoint's model is the averaged one
    loaded = Enhancer.from_checkpoint(trainer.to_checkpoint())
    assert loaded.parameter_digest() == trainer.averaged_enhancer().parameter_digest()
    plain = EnhancerTrainer(pairs, EnhancerConfig(**{**SMALL.__dict__, "ema_decay": 0.0}), seed=1)
    plain.train_step()
    assert plain.averaged_enhancer() is plain.enhancer


def test_checkpoint_roundtrip(small_enhancer):
    ckpt = small_enhancer.to_checkpoint()
    blob = ckpt.to_bytes()
    again = Enhancer.from_checkpoint(Checkpoint.from_bytes(blob))
    assert again.parameter_digest() == small_enhancer.parameter_digest()
    assert again.to_checkpoint().to_bytes() == blob
    x = mel(np.random.default_rng(0).normal(-4, 2, size=(80, 40)))
    np.testing.assert_array_equal(enhance(x, 1, again).values, enhance(x, 1, small_enhancer).values)


def test_non_finite_loss_raises(pairs):
    trainer = EnhancerTrainer(pairs, SMALL, seed=0)
    with torch.no_grad():
        for p in trainer.enhancer.discriminator.parameters():
            p.fill_(float("nan"))
    with pytest.raises(EnhancerError, match="non-finite"):
        trainer.train_step()


def test_report_csv_row():
    r = GanStepReport(step=3, d_loss=1.5, g_loss=0.25, g_adv=0.2, consistency=0.5, gp=None)
    assert r.csv_row().split(",")[0] == "3"
    assert r.csv_row().endswith(",")
