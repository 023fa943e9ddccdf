import json
from pathlib import Path

import numpy as np
import pytest

from percevox import cli, dsp, evaluation, training
from percevox.errors import ConfigError

TOY_CFG = """\
# tiny budgets: the point is exercising the wiring, not model quality
model.latent_dim = 8
model.codebook_size = 8
model.hidden_channels = 8
model.speaker_dim = 4
train.max_epochs = 2
train.batch_size = 4
train.clip_seconds = 0.3
train.early_stop_patience = 2
weights.enable_phoneme_epoch = 1
weights.enable_formant_epoch = 1
formant.corpus_items = 16
formant.epochs = 3
quality.items = 16
quality.epochs = 3
corpus.speakers = 3
corpus.utterances = 1
"""


# --- config parsing ------------------------------------------------------------------


def test_empty_config_is_all_defaults():
    cfg = cli.parse_config(text="", env={})
    assert cfg == cli.parse_config(text=None, env={})
    assert cfg.get("train", "lr_min") == 5e-4
    assert cfg.get("train", "lr_max") == 2e-3
    assert cfg.get("spectrogram", "hop_length") == 320
    assert cfg.get("spectrogram", "window_length") == 1024
    assert cfg.get("spectrogram", "mel_bands") == 80
    assert cfg.get("train", "val_fraction") == 0.1
    assert cfg.get("train", "clip_seconds") == 2.0
    assert cfg.get("weights", "lambda_com") == 3.0
    assert cfg.get("weights", "lambda_formant") == 1e6
    assert cfg.get("weights", "enable_formant_epoch") == 45


def test_scientific_notation_parses():
    cfg = cli.parse_config(text="train.lr_max = 2e-3\n", env={})
    assert cfg.get("train", "lr_max") == 0.002


def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match="train.bogus"):
        cli.parse_config(text="train.bogus = 1\n", env={})
    with pytest.raises(ConfigError, match="nosection.x"):
        cli.parse_config(text="nosection.x = 1\n", env={})


def test_later_duplicate_overrides():
    cfg = cli.parse_config(text="train.seed = 1\ntrain.seed = 7\n", env={})
    assert cfg.get("train", "seed") == 7


def test_type_mismatch_rejected():
    with pytest.raises(ConfigError, match="expects int"):
        cli.parse_config(text="train.max_epochs = 1.5\n", env={})
    with pytest.raises(ConfigError, match="expects float"):
        cli.parse_config(text="train.lr_max = fast\n", env={})


def test_malformed_line_rejected():
    with pytest.raises(ConfigError, match="section.key"):
        cli.parse_config(text="just some words\n", env={})
    with pytest.raises(ConfigError, match="section.key"):
        cli.parse_config(text="train.a.b = 1\n", env={})


def test_comments_and_blanks_skipped():
    cfg = cli.parse_config(text="\n# comment\n  \ntrain.seed = 3\n", env={})
    assert cfg.get("train", "seed") == 3


def test_env_overrides_file():
    cfg = cli.parse_config(text="train.seed = 3\n",
                           env={"PERCEVOX_TRAIN_SEED": "9"})
    assert cfg.get("train", "seed") == 9


def test_env_unknown_key_rejected():
    with pytest.raises(ConfigError, match="PERCEVOX_TRAIN_TYPO"):
        cli.parse_config(text="", env={"PERCEVOX_TRAIN_TYPO": "1"})


def test_parse_dump_parse_identity():
    text = "train.lr_max = 1e-3\nmodel.latent_dim = 32\nweights.lambda_com = 2.5\n"
    first = cli.parse_config(text=text, env={})
    again = cli.parse_config(text=cli.dump_config(first), env={})
    assert first == again
    assert cli.dump_config(first) == cli.dump_config(again)


def test_unreadable_file_rejected(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        cli.parse_config(path=tmp_path / "missing.cfg", env={})


def test_help_lists_every_config_key(capsys):
    with pytest.raises(SystemExit) as exit_info:
        cli.main(["--help"])
    assert exit_info.value.code == 0
    text = capsys.readouterr().out
    for section, keys in cli._SCHEMA.items():
        for key in keys:
            assert f"{section}.{key}" in text, f"--help is missing {section}.{key}"
    for command in ("synth-corpus", "train-formant", "pretrain-quality", "train",
                    "convert", "eval", "ablate", "grad-check"):
        assert command in text


# --- pipeline subcommands ----------------------------------------------------------


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Run the full command chain once at tiny budgets; share the artifacts."""
    root = tmp_path_factory.mktemp("cli_pipeline")
    cfg = root / "toy.cfg"
    cfg.write_text(TOY_CFG)
    c = str(cfg)

    steps = [
        ["synth-corpus", "--config", c, "--out", str(root / "corpus"),
         "--n", "3", "--seed", "0"],
        ["train-formant", "--config", c,
         "--corpus", str(root / "corpus" / "formant_corpus.pvcx"),
         "--out", str(root / "formant")],
        ["pretrain-quality", "--config", c, "--out", str(root / "quality")],
        ["train", "--config", c, "--data", str(root / "corpus"),
         "--out", str(root / "run"),
         "--formant", str(root / "formant" / "formant_regressor.pvcx"),
         "--quality", str(root / "quality" / "quality_proxy.pvcx")],
    ]
    for argv in steps:
        assert cli.main(argv) == 0, f"command failed: {argv[0]}"
    return root, c


def test_synth_corpus_artifacts(pipeline):
    root, _ = pipeline
    produced = json.loads((root / "corpus" / "produced.json").read_text())
    assert produced["command"] == "synth-corpus"
    assert "manifest.tsv" in produced["files"]
    assert "formant_corpus.pvcx" in produced["files"]
    for rel in produced["files"]:
        assert (root / "corpus" / rel).exists(), rel
    rows = evaluation.read_manifest(root / "corpus" / "manifest.tsv")
    assert len(rows) == 3


def test_trained_artifacts_load(pipeline):
    root, _ = pipeline
    from percevox import formant, perceploss
    reg = formant.FormantRegressor.load(root / "formant" / "formant_regressor.pvcx")
    assert reg.held_out_mse is not None
    proxy = perceploss.QualityProxyExtractor.load(root / "quality" / "quality_proxy.pvcx")
    assert proxy.held_out_mse is not None
    model, state, train_cfg, weights = training.load_checkpoint(
        root / "run" / "model.ckpt.pvcx")
    assert state.epoch == 2
    assert sorted(model.speakers.speaker_ids) == ["spk00", "spk01", "spk02"]


def test_train_produced_manifest(pipeline):
    root, _ = pipeline
    produced = json.loads((root / "run" / "produced.json").read_text())
    assert "model.ckpt.pvcx" in produced["files"]
    assert "history.json" in produced["files"]
    history = json.loads((root / "run" / "history.json").read_text())
    assert len(history) == 2
    assert "recon" in history[0]["losses"]


def test_convert_duration_within_one_hop(pipeline, capsys):
    root, c = pipeline
    src = evaluation.read_manifest(root / "corpus" / "manifest.tsv")[0]
    out_wav = root / "converted.wav"
    code = cli.main(["convert", "--config", c,
                     "--model", str(root / "run" / "model.ckpt.pvcx"),
                     "--in", src.audio_path, "--target", "spk01",
                     "--out", str(out_wav)])
    assert code == 0
    info = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    original = dsp.load_wav(src.audio_path)
    converted = dsp.load_wav(out_wav)
    hop = 320
    assert abs(len(converted.samples) - len(original.samples)) < hop
    assert info["trimmed_samples"] == len(original.samples) - len(converted.samples)
    assert 0 <= info["trimmed_samples"] < hop


def test_convert_unknown_speaker_is_data_error(pipeline, capsys):
    root, c = pipeline
    src = evaluation.read_manifest(root / "corpus" / "manifest.tsv")[0]
    code = cli.main(["convert", "--config", c,
                     "--model", str(root / "run" / "model.ckpt.pvcx"),
                     "--in", src.audio_path, "--target", "who",
                     "--out", str(root / "x.wav")])
    assert code == 3


def test_eval_report_well_formed(pipeline, capsys):
    root, c = pipeline
    report_path = root / "report" / "eval.json"
    code = cli.main(["eval", "--config", c,
                     "--manifest", str(root / "corpus" / "manifest.tsv"),
                     "--model", str(root / "run" / "model.ckpt.pvcx"),
                     "--report", str(report_path)])
    assert code == 0
    report = json.loads(report_path.read_text())
    assert report["n_conversions"] == 3
    for axis in ("gender_pairing", "accent_pairing"):
        assert sum(v["count"] for v in report["categories"][axis].values()) == 3
    assert 0.0 <= report["eer"]["value"] <= 1.0
    # the synthesized conversion manifest is itself readable and complete
    conv_rows = evaluation.read_manifest(root / "report" / "converted" / "manifest.tsv")
    assert all(r.is_conversion for r in conv_rows)
    assert all(Path(r.converted_path).exists() for r in conv_rows)


def test_eval_jobs_flag_does_not_change_report(pipeline, tmp_path):
    root, c = pipeline
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    manifest = root / "report" / "converted" / "manifest.tsv"  # conversions exist now
    assert cli.main(["eval", "--config", c, "--manifest", str(manifest),
                     "--report", str(a)]) == 0
    assert cli.main(["eval", "--config", c, "--manifest", str(manifest),
                     "--report", str(b), "--jobs", "3"]) == 0
    assert json.loads(a.read_text()) == json.loads(b.read_text())


def test_eval_without_conversions_or_model_is_config_error(pipeline):
    root, c = pipeline
    code = cli.main(["eval", "--config", c,
                     "--manifest", str(root / "corpus" / "manifest.tsv"),
                     "--report", str(root / "r.json")])
    assert code == 2


def test_grad_check_command(capsys):
    assert cli.main(["grad-check"]) == 0
    out = capsys.readouterr().out
    assert "failures=0" in out


def test_exit_codes(tmp_path, capsys):
    bad_cfg = tmp_path / "bad.cfg"
    bad_cfg.write_text("train.bogus = 1\n")
    assert cli.main(["train", "--config", str(bad_cfg),
                     "--data", str(tmp_path), "--out", str(tmp_path / "o")]) == 2
    assert cli.main(["train", "--data", str(tmp_path / "missing"),
                     "--out", str(tmp_path / "o")]) == 3
    err = capsys.readouterr().err
    assert "kind=config exit=2" in err
    assert "kind=data exit=3" in err


def test_error_lines_are_single_line(tmp_path, capsys):
    bad_cfg = tmp_path / "bad.cfg"
    bad_cfg.write_text("train.bogus = 1\n")
    cli.main(["train", "--config", str(bad_cfg),
              "--data", str(tmp_path), "--out", str(tmp_path / "o")])
    err = capsys.readouterr().err.strip()
    assert "\n" not in err
    assert err.startswith("error: ")
