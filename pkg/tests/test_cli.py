import json

import pytest

from conftest import feature_corpus
from speechmlc.cli import OUTPUT_ROOT_ENV, build_parser, main
from speechmlc.corpus import parse_manifest
from speechmlc.features import load_feature_file
from speechmlc.labels import LABELS


@pytest.fixture(autouse=True)
def _no_output_root(monkeypatch):
    monkeypatch.delenv(OUTPUT_ROOT_ENV, raising=False)


def test_synth_writes_32_files(tmp_path, capsys):
    assert main(["synth", "--per-combo", "2", "--duration", "0.3", "--out", str(tmp_path / "d")]) == 0
    assert len(list((tmp_path / "d" / "wav").glob("*.wav"))) == 32
    assert "32 utterances" in capsys.readouterr().out


def test_synth_missing_out(tmp_path, capsys):
    assert main(["synth", "--per-combo", "1"]) != 0
    assert "--out" in capsys.readouterr().err


def test_synth_output_root_env(tmp_path, monkeypatch):
    monkeypatch.setenv(OUTPUT_ROOT_ENV, str(tmp_path))
    assert main(["synth", "--per-combo", "1", "--duration", "0.2"]) == 0
    assert (tmp_path / "synth" / "manifest.tsv").exists()


def test_synth_repeatable(tmp_path):
    for name in ("a", "b"):
        assert main(["--seed", "4", "synth", "--per-combo", "1", "--duration", "0.2",
                     "--out", str(tmp_path / name)]) == 0
    assert (tmp_path / "a" / "manifest.tsv").read_text() == (tmp_path / "b" / "manifest.tsv").read_text()


def _wav_corpus(tmp_path):
    assert main(["synth", "--per-combo", "1", "--eval-per-combo", "1", "--duration", "0.6",
                 "--out", str(tmp_path / "wavs")]) == 0
    return tmp_path / "wavs" / "manifest.tsv"


def test_featurize_one_file(tmp_path):
    _wav_corpus(tmp_path)
    wav = sorted((tmp_path / "wavs" / "wav").glob("*.wav"))[0]
    assert main(["featurize", str(wav), "--out", str(tmp_path / "f")]) == 0
    (out,) = list((tmp_path / "f").iterdir())
    feats = load_feature_file(out)
    assert feats.dim == 80 and feats.feature_kind == "mel80"
    assert feats.n_frames == (9600 - 400) // 160 + 1


def test_featurize_bad_wav(tmp_path, capsys):
    (tmp_path / "bad.wav").write_bytes(b"not a wav file at all")
    _wav_corpus(tmp_path)
    good = sorted((tmp_path / "wavs" / "wav").glob("*.wav"))[0]
    code = main(["featurize", str(good), str(tmp_path / "bad.wav"), "--out", str(tmp_path / "f")])
    captured = capsys.readouterr()
    assert code != 0
    assert "bad.wav" in captured.err
    assert "partial output" in captured.out
    assert len(list((tmp_path / "f").iterdir())) == 1


def test_featurize_manifest(tmp_path):
    manifest = _wav_corpus(tmp_path)
    assert main(["featurize", "--manifest", str(manifest), "--out", str(tmp_path / "f")]) == 0
    entries = parse_manifest(tmp_path / "f" / "manifest.tsv")
    assert len(entries) == 32
    assert all(load_feature_file(tmp_path / "f" / e.source).dim == 80 for e in entries[:3])


def test_augment_nothing_to_do(tmp_path, capsys):
    manifest, _ = feature_corpus(tmp_path / "c", n_train=8)
    code = main(["augment", "--manifest", str(manifest), "--targets", "Rough=0", "--out", str(tmp_path / "a")])
    assert code == 0
    assert "nothing to do" in capsys.readouterr().out
    assert len(parse_manifest(tmp_path / "a" / "manifest.tsv")) == 8


def test_augment_fills_deficit(tmp_path, capsys):
    manifest, entries = feature_corpus(tmp_path / "c", n_train=12)
    rough = sum(e.label.labels[6] for e in entries)
    code = main(["augment", "--manifest", str(manifest), "--targets", f"Rough={rough + 3}", "--k", "2",
                 "--out", str(tmp_path / "a")])
    out = capsys.readouterr().out
    assert code == 0
    assert "3 conversions" in out and " h of 14 h budget" in out
    merged = parse_manifest(tmp_path / "a" / "manifest.tsv")
    assert sum(e.augmented for e in merged) == 3
    for e in merged:
        assert (tmp_path / "a" / e.source).exists()


def test_help_lists_defaults(capsys):
    parser, _ = build_parser()
    for cmd, expected in {
        "train": ["(default: 0.0001)", "(default: 64)", "(default: 4)", "(default: 8)", "(default: 128)",
                  "(default: 5.0)"],
        "augment": ["(default: 14.0)", "(default: 4)", "(default: 60.0)"],
        "eval": ["(default: 0.5)", "(default: 5)"],
    }.items():
        with pytest.raises(SystemExit):
            main([cmd, "--help"])
        text = " ".join(capsys.readouterr().out.split())
        for item in expected:
            assert item in text, (cmd, item)


def test_train_one_epoch(tmp_path, capsys):
    manifest, _ = feature_corpus(tmp_path / "c", n_train=6, frames=20)
    code = main(["train", "--manifest", str(manifest), "--epochs", "1", "--dim", "8", "--heads", "2",
                 "--layers", "1", "--crop-seconds", "0.1", "--out", str(tmp_path / "run")])
    assert code == 0
    assert (tmp_path / "run" / "final.ckpt").exists()
    assert "epoch   0" in capsys.readouterr().out


def test_train_conflicting_dims(tmp_path, capsys):
    manifest, _ = feature_corpus(tmp_path / "c", n_train=3)
    code = main(["train", "--manifest", str(manifest), "--input-dim", "80", "--out", str(tmp_path / "run")])
    assert code != 0
    assert "input-dim" in capsys.readouterr().err
    assert not (tmp_path / "run").exists()


def test_config_file_precedence(tmp_path):
    manifest, _ = feature_corpus(tmp_path / "c", n_train=4, frames=20)
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"seed": 5, "train": {"epochs": 2, "dim": 8, "heads": 2, "layers": 1,
                                                    "crop_seconds": 0.1}}))
    assert main(["--config", str(cfg), "train", "--manifest", str(manifest), "--epochs", "1",
                 "--out", str(tmp_path / "run")]) == 0
    summary = json.loads((tmp_path / "run" / "run_summary.json").read_text())
    assert len(summary["epochs"]) == 1
    assert summary["train_config"]["seed"] == 5
    assert summary["model_config"]["d_model"] == 8


def _trained(tmp_path):
    manifest, _ = feature_corpus(tmp_path / "c", n_train=6, n_eval=6, frames=20)
    assert main(["train", "--manifest", str(manifest), "--epochs", "1", "--dim", "8", "--heads", "2",
                 "--layers", "1", "--crop-seconds", "0.1", "--out", str(tmp_path / "run")]) == 0
    return manifest, tmp_path / "run" / "final.ckpt"


def test_eval_report_blocks(tmp_path, capsys):
    manifest, ckpt = _trained(tmp_path)
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(ckpt), "--manifest", str(manifest)]) == 0
    report = json.loads(capsys.readouterr().out)
    assert [b["label"] for b in report["per_label"]] == list(LABELS)
    assert report["config"]["vote_split"] == 5


def test_eval_agreement_split(tmp_path):
    manifest, ckpt = _trained(tmp_path)
    out = tmp_path / "r.json"
    assert main(["eval", "--checkpoint", str(ckpt), "--manifest", str(manifest), "--agreement-split", "9",
                 "--out", str(out)]) == 0
    report = json.loads(out.read_text())
    assert report["config"]["vote_split"] == 9
    assert not any(s["present"] for s in report["strata"]["high"])


def test_eval_detect_only(tmp_path, capsys):
    manifest, ckpt = _trained(tmp_path)
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(ckpt), "--manifest", str(manifest), "--detect-only",
                 "Dark,Bright"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert set(report["detection_probability"]) == {"Dark", "Bright"}
    assert report["per_label"] == [] and report["macro_f1"] is None


def test_eval_missing_checkpoint(tmp_path, capsys):
    manifest, _ = feature_corpus(tmp_path / "c", n_train=0, n_eval=2)
    assert main(["eval", "--checkpoint", str(tmp_path / "none.ckpt"), "--manifest", str(manifest)]) != 0
    assert "error" in capsys.readouterr().err
