import json

from synthasr.experiments import DeskSettings, adaptation_arms, run_all


def test_arms_cover_ablation_and_mixes():
    arms = adaptation_arms(DeskSettings())
    assert arms["text_blurry"] == {"ratio": (0, 1), "use_enhancer": False}
    assert arms["text_enhancer"]["use_enhancer"]
    assert arms["mix_1_1"]["ratio"] == (1, 1) and arms["mix_1_2"]["ratio"] == (1, 2)


def test_quick_run_is_reproducible(tmp_path):
    settings = DeskSettings.quick()
    first = run_all(settings, tmp_path / "one")
    second = run_all(settings, tmp_path / "two")
    first.pop("seconds"), second.pop("seconds")
    # benchmark timings vary; everything else is seeded
    first.pop("benchmark"), second.pop("benchmark")
    assert json.dumps(first, sort_keys=True) == json.dumps(second, sort_keys=True)
    for path in sorted((tmp_path / "one").rglob("*")):
        if path.suffix in (".jsonl", ".csv", ".ckpt", ".mel"):
            assert path.read_bytes() == (tmp_path / "two" / path.relative_to(tmp_path / "one")).read_bytes(), path
    report = json.loads((tmp_path / "one" / "report.json").read_text())
    assert set(report["asr"]["median"]) >= {"pretrained", "text_blurry", "text_enhancer", "mix_1_1", "mix_1_2"}
    assert report["benchmark"]["factors"]["audio"] == 1.0
