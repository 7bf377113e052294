"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line
that is printed in the terminal summary.

Criteria 5 to 9 share a single full-size desk run (several minutes on one
CPU core), executed once per session.
"""

import functools
import itertools
import json
import math

import numpy as np
import pytest
import torch

from synthasr.asr import AsrConfig, AsrModel, ctc_loss, fuse_batchnorm, min_ctc_frames
from synthasr.cli import main
from synthasr.enhancer import Enhancer, EnhancerConfig, consistency_loss, enhance, gradient_penalty, hinge_d_loss, hinge_g_loss
from synthasr.experiments import DeskSettings, run_all
from synthasr.io import Checkpoint
from synthasr.mel import MelSpectrogram
from synthasr.metrics import wer

SMALL_ENH = EnhancerConfig(latent_dim=16, style_depth=2, capacity=2, max_feature_maps=8, batch_size=4, crop_frames=32, max_frames=512)


# -- 1: loss oracles ----------------------------------------------------------


def _central_grad(f, x, eps=1e-6):
    g = torch.zeros_like(x)
    flat, gflat = x.view(-1), g.view(-1)
    for i in range(flat.numel()):
        old = flat[i].item()
        flat[i] = old + eps
        hi = f(x).item()
        flat[i] = old - eps
        lo = f(x).item()
        flat[i] = old
        gflat[i] = (hi - lo) / (2 * eps)
    return g


def _rel_err(a, b):
    return (a - b).abs().max().item() / max(b.abs().max().item(), 1e-12)


def test_criterion_1_loss_oracles(criterion):
    notes = []
    # closed forms
    checks = [
        float(hinge_d_loss([2.0], [-2.0])) == 0.0,
        float(hinge_d_loss([0.0], [0.0])) == 2.0,
        math.isclose(float(hinge_d_loss([0.5, 3.0], [0.2, -4.0])), 0.85),
        float(hinge_g_loss([3.0])) == -3.0,
    ]
    x = torch.randn(3, 1, 80, 32, dtype=torch.float64)
    checks.append(math.isclose(float(gradient_penalty(lambda t: t.flatten(1).sum(1), x, weight=2.0)), 80 * 32))
    checks.append(float(gradient_penalty(lambda t: torch.zeros(t.shape[0], dtype=t.dtype), x)) == 0.0)
    a = torch.zeros(80, 8, dtype=torch.float64)
    checks.append(math.isclose(float(consistency_loss(a + 1.5, a)), 1.5))
    # ripple inside each pooled group of 4 bands vanishes after pooling
    ripple = torch.tensor([1.0, -1.0, 1.0, -1.0] * 20, dtype=torch.float64)[:, None].expand(80, 8)
    checks.append(float(consistency_loss(a + ripple, a)) == 0.0)
    notes.append(f"closed forms {sum(checks)}/{len(checks)}")

    # finite-difference gradients
    rng = np.random.default_rng(0)
    worst = 0.0
    real = torch.tensor(rng.normal(size=5))
    fake = torch.tensor(rng.normal(size=4))
    for f, arg in (
        (lambda r: hinge_d_loss(r, fake), real.clone()),
        (lambda fk: hinge_d_loss(real, fk), fake.clone()),
        (hinge_g_loss, fake.clone()),
    ):
        arg_g = arg.clone().requires_grad_(True)
        (ana,) = torch.autograd.grad(f(arg_g), arg_g)
        worst = max(worst, _rel_err(ana, _central_grad(f, arg)))
    target = torch.tensor(rng.normal(size=(8, 6)))
    f = lambda t: consistency_loss(t, target, factor=4)
    arg = torch.tensor(rng.normal(size=(8, 6)))
    arg_g = arg.clone().requires_grad_(True)
    (ana,) = torch.autograd.grad(f(arg_g), arg_g)
    worst = max(worst, _rel_err(ana, _central_grad(f, arg)))
    # penalty of a small smooth network: gradient of the penalty wrt the net's weights
    torch.manual_seed(0)
    net = torch.nn.Sequential(torch.nn.Flatten(), torch.nn.Linear(4 * 16, 8), torch.nn.Tanh(), torch.nn.Linear(8, 1)).double()
    xr = torch.randn(3, 1, 4, 16, dtype=torch.float64)
    w = net[1].weight
    gp = lambda: gradient_penalty(lambda t: net(t).squeeze(1), xr, weight=10.0)
    (ana,) = torch.autograd.grad(gp(), w)
    num = torch.zeros_like(w)
    with torch.no_grad():
        for idx in itertools.product(range(w.shape[0]), range(0, w.shape[1], 7)):
            old = w[idx].item()
            w[idx] = old + 1e-6
            with torch.enable_grad():
                hi = gp().item()
            w[idx] = old - 1e-6
            with torch.enable_grad():
                lo = gp().item()
            w[idx] = old
            num[idx] = (hi - lo) / 2e-6
    cols = list(range(0, w.shape[1], 7))
    worst = max(worst, _rel_err(ana[:, cols], num[:, cols]))
    notes.append(f"worst relative gradient error {worst:.1e}")
    ok = all(checks) and worst <= 1e-3
    criterion(1, ok, "; ".join(notes))
    assert ok


# -- 2: enhancer identity and shape ---------------------------------------------


def test_criterion_2_identity_and_shape(criterion):
    plain = Enhancer(SMALL_ENH, seed=0)
    ident = Enhancer(SMALL_ENH, seed=0)
    ident.zero_output_projections()
    rng = np.random.default_rng(0)
    shapes_ok, ident_ok = True, True
    for length in (16, 64, 70, 257):
        mel = MelSpectrogram(rng.normal(-5, 2, (80, length)).astype(np.float32))
        shapes_ok &= enhance(mel, 1, plain).values.shape == (80, length)
        ident_ok &= np.array_equal(enhance(mel, 1, ident).values, mel.values)
    ok = shapes_ok and ident_ok
    criterion(2, ok, f"shapes 80xL for L in (16, 64, 70, 257): {shapes_ok}; zero-projection identity bit-exact: {ident_ok}")
    assert ok


# -- 3: BN fusion ---------------------------------------------------------------------


def test_criterion_3_bn_fusion(criterion):
    torch.manual_seed(0)
    model = AsrModel(AsrConfig(d_model=32, n_blocks=2, n_heads=4, norm_mode="BN"))
    rng = np.random.default_rng(0)

    def batch():
        lengths = rng.integers(10, 61, size=4)
        lengths[0] = 60
        return torch.from_numpy(rng.normal(-4, 2, (4, 80, 60)).astype(np.float32)), torch.from_numpy(lengths)

    model.train()
    with torch.no_grad():
        for _ in range(10):
            model(*batch())
    model.eval()
    fused = fuse_batchnorm(model).eval()
    worst = 0.0
    with torch.no_grad():
        for _ in range(100):
            x, lengths = batch()
            a, la = model(x, lengths)
            b, _ = fused(x, lengths)
            mask = torch.arange(a.shape[1])[None, :] < la[:, None]
            worst = max(worst, (a - b).abs()[mask].max().item())
        x, lengths = batch()
        e, _ = fused(x, lengths)
        fused.train()
        t, _ = fused(x, lengths)
    mode_gap = (e - t).abs().max().item()
    ok = worst <= 1e-5 and mode_gap <= 1e-5
    criterion(3, ok, f"max |fused - eval BN| over 100 batches {worst:.1e}; train/eval gap of fused model {mode_gap:.1e}")
    assert ok


# -- 4: CTC and WER oracles ------------------------------------------------------------


def _brute_ctc(lp, target):
    total = -math.inf
    for path in itertools.product(range(lp.shape[1]), repeat=lp.shape[0]):
        collapsed = [p for i, p in enumerate(path) if p != 0 and (i == 0 or p != path[i - 1])]
        if collapsed == list(target):
            total = np.logaddexp(total, sum(lp[i, p] for i, p in enumerate(path)))
    return -total


def _brute_edits(ref, hyp):
    @functools.lru_cache(maxsize=None)
    def go(i, j):
        if i == len(ref):
            return len(hyp) - j
        if j == len(hyp):
            return len(ref) - i
        return min(go(i + 1, j + 1) + (ref[i] != hyp[j]), go(i + 1, j) + 1, go(i, j + 1) + 1)

    return go(0, 0)


def test_criterion_4_ctc_and_wer(criterion):
    rng = np.random.default_rng(1)
    ctc_cases = ctc_bad = 0
    for v in (2, 3):
        for t_len in range(1, 6):
            for n in range(0, 3):
                for target in itertools.product(range(1, v), repeat=n):
                    if min_ctc_frames(target) > t_len:
                        continue
                    logits = torch.from_numpy(rng.normal(scale=2, size=(t_len, v)))
                    lp = torch.log_softmax(logits, -1).numpy()
                    ctc_cases += 1
                    ctc_bad += not math.isclose(float(ctc_loss(logits, target)), _brute_ctc(lp, target), rel_tol=1e-9, abs_tol=1e-9)
    wer_bad = 0
    for _ in range(1000):
        ref = tuple(rng.integers(0, 4, size=rng.integers(1, 7)))
        hyp = tuple(rng.integers(0, 4, size=rng.integers(0, 7)))
        wer_bad += wer(ref, hyp).errors != _brute_edits(ref, hyp)
    ok = ctc_bad == 0 and wer_bad == 0
    criterion(4, ok, f"CTC vs enumeration: {ctc_cases - ctc_bad}/{ctc_cases}; WER vs brute force: {1000 - wer_bad}/1000")
    assert ok


# -- 5 to 9: the desk run ----------------------------------------------------------------


@pytest.fixture(scope="session")
def desk(tmp_path_factory):
    return run_all(DeskSettings(), tmp_path_factory.mktemp("desk"))


def test_criterion_5_enhancer_lsd(desk, criterion):
    e = desk["enhancer"]
    minutes = desk["seconds"]["enhancer"] / 60
    ok = e["ratio"] <= 0.8 and minutes <= 15
    criterion(5, ok, f"LSD enhanced {e['lsd_enhanced']:.3f} vs blurry {e['lsd_blurry']:.3f} (ratio {e['ratio']:.3f}, limit 0.8) in {minutes:.1f} min")
    assert ok


def test_criterion_6_text_only_adaptation(desk, criterion):
    rows = desk["asr"]["per_seed"]
    med = desk["asr"]["median"]
    a_ok = all(r["pretrained"]["A"] < 0.10 for r in rows)
    drop = med["relative_b_drop_text_enhancer"]
    minutes = sum(v for k, v in desk["seconds"].items() if k == "pretrain" or k.startswith("adapt_")) / 60
    ok = a_ok and drop >= 0.30 and minutes <= 30
    criterion(
        6, ok,
        f"held-out A WER {[round(r['pretrained']['A'], 3) for r in rows]} (< 0.10); "
        f"B WER {med['pretrained']['B']:.3f} -> {med['text_enhancer']['B']:.3f}, median relative drop {drop:.1%} (>= 30%); {minutes:.1f} min",
    )
    assert ok


def test_criterion_7_enhancer_ordering(desk, criterion):
    med = desk["asr"]["median"]
    ok = med["text_enhancer"]["B"] <= med["text_blurry"]["B"]
    criterion(7, ok, f"median B WER with enhancer {med['text_enhancer']['B']:.3f} vs blurry only {med['text_blurry']['B']:.3f}")
    assert ok


def test_criterion_8_mixing(desk, criterion):
    med = desk["asr"]["median"]
    ok = med["mix_1_1"]["B"] <= med["text_enhancer"]["B"]
    criterion(8, ok, f"median B WER 1:1 {med['mix_1_1']['B']:.3f} vs text only {med['text_enhancer']['B']:.3f}; 1:2 arm {med['mix_1_2']['B']:.3f}")
    assert ok


def test_criterion_9_overhead(desk, criterion):
    b = desk["benchmark"]
    f = b["factors"]
    ok = f["audio"] == 1.0 <= f["text_blurry"] <= f["text_enhancer"] and "enhancer_overhead_over_blurry" in b
    criterion(9, ok, f"factors audio {f['audio']:.2f}, blurry {f['text_blurry']:.2f}, enhancer {f['text_enhancer']:.2f}; enhancer overhead over blurry {b['enhancer_overhead_over_blurry']:.2f}")
    assert ok


# -- 10: determinism -----------------------------------------------------------------------


CLI_CONFIG = {
    "seed": 5,
    "enhancer": {"latent_dim": 16, "style_depth": 2, "capacity": 2, "max_feature_maps": 8, "batch_size": 4, "crop_frames": 32, "max_frames": 512},
    "asr": {"d_model": 16, "n_blocks": 1, "n_heads": 2, "norm_mode": "BN"},
    "train": {"batch_size": 8, "total_steps": 4, "lr_max": 1e-3},
    "benchmark": {"n_batches": 10, "warmup_batches": 1, "batch_size": 2},
}


def _pipeline(root):
    import yaml

    root.mkdir()
    cfg = root / "run.yaml"
    cfg.write_text(yaml.safe_dump(CLI_CONFIG))
    c = ["--config", str(cfg)]
    steps = [
        ["gen-corpus", *c, "--domain", "A", "--n", "16", "--out-dir", root / "pairs", "--paired"],
        ["gen-corpus", *c, "--domain", "A", "--n", "24", "--out-dir", root / "a"],
        ["gen-corpus", *c, "--domain", "B", "--n", "12", "--out-dir", root / "b"],
        ["gen-corpus", *c, "--domain", "B", "--n", "40", "--out-dir", root / "bt", "--text-only"],
        ["train-enhancer", *c, "--pairs-manifest", root / "pairs" / "manifest.jsonl", "--out", root / "enh.ckpt", "--steps", "4"],
        ["train-asr", *c, "--audio-manifest", root / "a" / "manifest.jsonl", "--out", root / "asr.ckpt"],
        ["fuse-bn", *c, "--ckpt", root / "asr.ckpt", "--out", root / "fused.ckpt"],
        ["adapt-text", *c, "--base", root / "asr.ckpt", "--text-manifest", root / "bt" / "manifest.jsonl", "--fuse-bn",
         "--use-enhancer", "--enhancer", root / "enh.ckpt", "--out", root / "adapted.ckpt"],
        ["adapt-text", *c, "--base", root / "asr.ckpt", "--text-manifest", root / "bt" / "manifest.jsonl",
         "--audio-manifest", root / "b" / "manifest.jsonl", "--ratio", "1:2", "--out", root / "mixed.ckpt"],
        ["evaluate", *c, "--ckpt", root / "adapted.ckpt", "--manifest", root / "b" / "manifest.jsonl", "--out", root / "wer.json"],
        ["enhance", *c, "--ckpt", root / "enh.ckpt", "--in", root / "pairs" / "mels" / "A-000000.blurry.mel", "--out", root / "enhanced.mel", "--latent-seed", "3"],
    ]
    for argv in steps:
        assert main([str(a) for a in argv]) == 0, argv
    return root


def _params(path):
    return {k: v.tobytes() for k, v in Checkpoint.load(path).tensors.items()}


def test_criterion_10_determinism(tmp_path, criterion):
    one, two = _pipeline(tmp_path / "one"), _pipeline(tmp_path / "two")
    data = [p.relative_to(one) for p in sorted(one.rglob("*")) if p.suffix in (".jsonl", ".csv", ".json", ".mel")]
    ckpts = [p.relative_to(one) for p in sorted(one.rglob("*.ckpt"))]
    differing = [str(p) for p in data if (one / p).read_bytes() != (two / p).read_bytes()]
    differing += [str(p) for p in ckpts if _params(one / p) != _params(two / p)]
    ok = not differing and len(ckpts) == 5
    criterion(10, ok, f"{len(data)} manifests/logs/spectrograms byte-identical and {len(ckpts)} checkpoints parameter-identical across reruns"
              + (f"; differing: {differing}" if differing else ""))
    assert ok
    json.loads((one / "wer.json").read_text())
