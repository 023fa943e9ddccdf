"""Command-line front end: strict flat configuration plus the pipeline
subcommands (corpus synthesis, proxy pretraining, training, conversion,
evaluation, ablation, gradient audit).

Configuration is a line-oriented ``section.key = value`` file. Every key has
a documented default (see ``--help``); unknown keys and malformed values are
rejected loudly. Later duplicates override earlier ones, and environment
variables of the form ``PERCEVOX_<SECTION>_<KEY>`` override the file.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
failure (non-finite values), 5 adapter/subprocess failure.
"""

import argparse
import json
import os
import shlex
import sys
from pathlib import Path

import numpy as np

from . import adapters, dsp, evaluation, formant, gradsuite, perceploss
from . import speechcorpus, training, vqvae
from .container import ContainerError
from .diffcore import NonFiniteError
from .errors import AdapterError, ConfigError, DataError

# Single source of truth for every tunable: section -> key -> default.
# The value's Python type is the key's type contract.
_SCHEMA = {
    "spectrogram": {
        "window_length": 1024,
        "hop_length": 320,
        "fft_size": 1024,
        "mel_bands": 80,
        "fmin": 0.0,
        "fmax": 8000.0,
    },
    "model": {
        "latent_dim": 64,
        "codebook_size": 128,
        "hidden_channels": 96,
        "speaker_dim": 32,
        "level_stride": 2,
    },
    "train": {
        "max_epochs": 100,
        "batch_size": 8,
        "lr_min": 5e-4,
        "lr_max": 2e-3,
        "cycle_length_steps": 0,
        "early_stop_patience": 10,
        "seed": 0,
        "val_fraction": 0.1,
        "precision": "float64",
        "clip_seconds": 2.0,
    },
    "weights": {
        "lambda_recon": 1.0,
        "lambda_code": 1.0,
        "lambda_com": 3.0,
        "lambda_quality": 0.1,
        "lambda_phoneme": 0.1,
        "lambda_formant": 1e6,
        "enable_quality_epoch": 0,
        "enable_phoneme_epoch": 45,
        "enable_formant_epoch": 45,
    },
    "formant": {
        "corpus_items": 500,
        "corpus_seed": 0,
        "epochs": 60,
        "lr": 2e-3,
        "batch_size": 256,
        "holdout_fraction": 0.1,
        "seed": 0,
    },
    "quality": {
        "items": 200,
        "epochs": 30,
        "lr": 3e-3,
        "batch_size": 16,
        "channels": 16,
        "holdout_fraction": 0.1,
        "seed": 0,
    },
    "phoneme": {
        "channels": 24,
        "seed": 0,
    },
    "corpus": {
        "speakers": 4,
        "utterances": 3,
        "seed": 0,
        "vowel_min": 3,
        "vowel_max": 5,
        "vowel_duration": 0.22,
    },
    "eval": {
        "jobs": 1,
        "genuine_side": "source",
        "griffin_lim_iterations": 60,
    },
}

_ENV_PREFIX = "PERCEVOX_"


class RunConfig:
    """Validated flat configuration: every documented key, fully resolved."""

    def __init__(self, values):
        self._values = values

    def get(self, section, key):
        return self._values[section][key]

    def items(self):
        for section in _SCHEMA:
            for key in _SCHEMA[section]:
                yield section, key, self._values[section][key]

    def __eq__(self, other):
        return isinstance(other, RunConfig) and self._values == other._values

    # module-config builders ------------------------------------------------

    def spectrogram_config(self, mel_bands=None):
        s = self._values["spectrogram"]
        return dsp.SpectrogramConfig(
            window_length=s["window_length"], hop_length=s["hop_length"],
            fft_size=s["fft_size"], mel_bands=mel_bands or s["mel_bands"],
            fmin=s["fmin"], fmax=s["fmax"])

    def vqvae_config(self):
        m = self._values["model"]
        return vqvae.VqvaeConfig(
            mel_bands=self._values["spectrogram"]["mel_bands"],
            latent_dim=m["latent_dim"], codebook_size=m["codebook_size"],
            hidden_channels=m["hidden_channels"], speaker_dim=m["speaker_dim"],
            level_stride=m["level_stride"])

    def train_config(self):
        t = self._values["train"]
        return training.TrainConfig(
            max_epochs=t["max_epochs"], batch_size=t["batch_size"],
            lr_min=t["lr_min"], lr_max=t["lr_max"],
            cycle_length_steps=t["cycle_length_steps"],
            early_stop_patience=t["early_stop_patience"], seed=t["seed"],
            val_fraction=t["val_fraction"], precision=t["precision"])

    def loss_weights(self):
        w = self._values["weights"]
        return training.LossWeights(**w)


def _coerce(section, key, raw, where):
    default = _SCHEMA[section][key]
    raw = raw.strip()
    try:
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError:
        kind = type(default).__name__
        raise ConfigError(
            f"{where}: {section}.{key} expects {kind}, got {raw!r}") from None


def parse_config(path=None, text=None, env=None):
    """Resolve defaults -> file lines (later wins) -> environment overrides."""
    values = {section: dict(keys) for section, keys in _SCHEMA.items()}

    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    for lineno, line in enumerate(text.splitlines() if text else [], start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        where = f"{path or '<config>'}:{lineno}"
        if "=" not in line:
            raise ConfigError(f"{where}: expected 'section.key = value', got {line!r}")
        name, _, raw = line.partition("=")
        name = name.strip()
        if name.count(".") != 1:
            raise ConfigError(f"{where}: expected 'section.key = value', got {line!r}")
        section, key = name.split(".")
        if section not in _SCHEMA or key not in _SCHEMA[section]:
            raise ConfigError(f"{where}: unknown config key {name!r}")
        values[section][key] = _coerce(section, key, raw, where)

    env = os.environ if env is None else env
    for var, raw in sorted(env.items()):
        if not var.startswith(_ENV_PREFIX):
            continue
        rest = var[len(_ENV_PREFIX):]
        section, _, key = rest.partition("_")
        section, key = section.lower(), key.lower()
        if section not in _SCHEMA or key not in _SCHEMA[section]:
            raise ConfigError(f"environment variable {var} matches no config key")
        values[section][key] = _coerce(section, key, raw, f"${var}")
    return RunConfig(values)


def dump_config(config):
    """Canonical text form; parse(dump(parse(x))) == parse(x)."""
    lines = []
    for section, key, value in config.items():
        rendered = repr(value) if isinstance(value, float) else str(value)
        lines.append(f"{section}.{key} = {rendered}")
    return "\n".join(lines) + "\n"


def config_reference():
    lines = ["configuration keys (defaults):"]
    for section, key, value in RunConfig({s: dict(k) for s, k in _SCHEMA.items()}).items():
        rendered = repr(value) if isinstance(value, float) else str(value)
        lines.append(f"  {section}.{key} = {rendered}")
    lines.append("")
    lines.append("environment overrides: PERCEVOX_<SECTION>_<KEY>=value")
    return "\n".join(lines)


# --- shared helpers ----------------------------------------------------------------


def _config_from_args(args):
    return parse_config(path=getattr(args, "config", None))


def _write_produced(out_dir, command, paths):
    base = Path(out_dir).resolve()
    listing = {
        "command": command,
        "files": sorted(str(Path(p).resolve().relative_to(base)) for p in paths),
    }
    produced = Path(out_dir) / "produced.json"
    produced.write_text(json.dumps(listing, indent=2) + "\n")
    return produced


def _say(payload):
    print(json.dumps(payload, sort_keys=True))


def _load_training_clips(data_dir, config):
    manifest = Path(data_dir) / "manifest.tsv"
    rows = evaluation.read_manifest(manifest)
    spec_cfg = config.spectrogram_config()
    clip_seconds = config.get("train", "clip_seconds")
    clips = []
    for row in rows:
        mel = dsp.log_mel(dsp.load_wav(row.audio_path), spec_cfg)
        windows = dsp.clip_frames(mel, clip_seconds)
        if not windows:
            windows = [mel]  # shorter than one clip window: use the utterance whole
        clips.extend((w, row.speaker_id) for w in windows)
    speakers = sorted({row.speaker_id for row in rows})
    return clips, speakers, rows


def _formant_regressor(args, config, out_dir, produced):
    """Load --formant if given, else train one from the configured corpus."""
    if getattr(args, "formant", None):
        return formant.FormantRegressor.load(args.formant)
    f = {k: config.get("formant", k) for k in _SCHEMA["formant"]}
    corpus = formant.build_synth_corpus(f["corpus_items"], seed=f["corpus_seed"])
    reg = formant.train_formant_regressor(
        corpus, epochs=f["epochs"], seed=f["seed"], lr=f["lr"],
        batch_size=f["batch_size"], holdout_fraction=f["holdout_fraction"])
    path = Path(out_dir) / "formant_regressor.pvcx"
    reg.save(path)
    produced.append(path)
    return reg


def _quality_proxy(args, config, out_dir, produced):
    if getattr(args, "quality", None):
        return perceploss.QualityProxyExtractor.load(args.quality)
    q = {k: config.get("quality", k) for k in _SCHEMA["quality"]}
    proxy = perceploss.pretrain_quality_proxy(
        seed=q["seed"], n_items=q["items"], epochs=q["epochs"], lr=q["lr"],
        batch_size=q["batch_size"], channels=q["channels"],
        holdout_fraction=q["holdout_fraction"])
    path = Path(out_dir) / "quality_proxy.pvcx"
    proxy.save(path)
    produced.append(path)
    return proxy


def _phoneme_extractor(config):
    extractor = perceploss.PhonemeProxyExtractor(
        mel_bands=config.get("spectrogram", "mel_bands"),
        channels=config.get("phoneme", "channels"),
        seed=config.get("phoneme", "seed"))
    extractor.freeze()
    return extractor


def _make_adapters(args):
    if getattr(args, "transcriber_cmd", None):
        transcriber = adapters.SubprocessTranscriber(shlex.split(args.transcriber_cmd))
    else:
        transcriber = speechcorpus.BuiltinVowelTranscriber()
    if getattr(args, "embedder_cmd", None):
        embedder = adapters.SubprocessEmbedder(shlex.split(args.embedder_cmd))
    else:
        embedder = speechcorpus.ReferenceEmbedder()
    return transcriber, embedder


# --- subcommands --------------------------------------------------------------------


def _cmd_synth_corpus(args):
    config = _config_from_args(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    n = args.n if args.n is not None else config.get("corpus", "speakers")
    seed = args.seed if args.seed is not None else config.get("corpus", "seed")
    manifest_path, rows, _ = speechcorpus.build_speech_corpus(
        out, n_speakers=n,
        utterances_per_speaker=config.get("corpus", "utterances"),
        seed=seed,
        vowels_per_utterance=(config.get("corpus", "vowel_min"),
                              config.get("corpus", "vowel_max")),
        vowel_duration=config.get("corpus", "vowel_duration"))
    fcorpus = formant.build_synth_corpus(
        config.get("formant", "corpus_items"),
        seed=config.get("formant", "corpus_seed"))
    fcorpus_path = out / "formant_corpus.pvcx"
    formant.save_corpus(fcorpus_path, fcorpus, seed=config.get("formant", "corpus_seed"))
    produced = [manifest_path, fcorpus_path] + [Path(r.audio_path) for r in rows]
    _write_produced(out, "synth-corpus", produced)
    _say({"command": "synth-corpus", "speakers": n, "utterances": len(rows),
          "formant_items": len(fcorpus), "out": str(out)})
    return 0


def _cmd_train_formant(args):
    config = _config_from_args(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    corpus, _ = formant.load_corpus(args.corpus)
    f = {k: config.get("formant", k) for k in _SCHEMA["formant"]}
    reg = formant.train_formant_regressor(
        corpus, epochs=f["epochs"], seed=f["seed"], lr=f["lr"],
        batch_size=f["batch_size"], holdout_fraction=f["holdout_fraction"])
    path = out / "formant_regressor.pvcx"
    reg.save(path)
    _write_produced(out, "train-formant", [path])
    _say({"command": "train-formant", "held_out_mse": reg.held_out_mse,
          "out": str(path)})
    return 0


def _cmd_pretrain_quality(args):
    config = _config_from_args(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    produced = []
    proxy = _quality_proxy(args, config, out, produced)
    _write_produced(out, "pretrain-quality", produced)
    _say({"command": "pretrain-quality", "held_out_mse": proxy.held_out_mse,
          "out": str(produced[0])})
    return 0


def _cmd_train(args):
    config = _config_from_args(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    clips, speakers, _ = _load_training_clips(args.data, config)
    produced = []

    if args.resume:
        model, state, train_cfg, weights = training.load_checkpoint(args.resume)
    else:
        state = None
        train_cfg = config.train_config()
        weights = config.loss_weights()
        model = vqvae.HierarchicalVqvae(config.vqvae_config(), speaker_ids=speakers,
                                        seed=train_cfg.seed)

    # the quality proxy always drives validation selection and early stopping
    quality = _quality_proxy(args, config, out, produced)
    phoneme = None
    if weights.lambda_phoneme > 0 and weights.enable_phoneme_epoch < train_cfg.max_epochs:
        phoneme = _phoneme_extractor(config)
    regressor = None
    if weights.lambda_formant > 0 and weights.enable_formant_epoch < train_cfg.max_epochs:
        regressor = _formant_regressor(args, config, out, produced)

    ckpt_path = out / "model.ckpt.pvcx"
    extractors = training.ExtractorSet(quality=quality, phoneme=phoneme)
    model, history, state = training.fit(
        model, clips, train_cfg, weights, extractors=extractors,
        regressor=regressor, resume_state=state, checkpoint_path=ckpt_path)
    training.save_checkpoint(model, state, ckpt_path, train_cfg, weights)
    produced.append(ckpt_path)

    history_path = out / "history.json"
    history_path.write_text(json.dumps(history, indent=2) + "\n")
    produced.append(history_path)
    _write_produced(out, "train", produced)
    _say({"command": "train", "epochs_run": len(history),
          "clips": len(clips), "speakers": len(speakers),
          "best_val_quality": state.best_val_quality, "out": str(ckpt_path)})
    return 0


def _cmd_convert(args):
    config = _config_from_args(args)
    model, _, _, _ = training.load_checkpoint(args.model)
    audio = dsp.load_wav(args.infile)
    # mel band count is a property of the trained model, not the config
    spec_cfg = config.spectrogram_config(mel_bands=model.config.mel_bands)
    mel = dsp.log_mel(audio, spec_cfg)
    converted = model.convert_speaker(mel, args.target)
    fb = dsp.build_mel_filterbank(spec_cfg)
    linear_power = dsp.mel_to_linear(converted, fb)
    out_audio, _ = dsp.griffin_lim(
        np.sqrt(linear_power), spec_cfg,
        iterations=config.get("eval", "griffin_lim_iterations"))
    out_path = Path(args.out)
    if out_path.parent != Path("."):
        out_path.parent.mkdir(parents=True, exist_ok=True)
    dsp.save_wav(out_path, out_audio)
    n_in, n_out = len(audio.samples), len(out_audio.samples)
    _say({"command": "convert", "target": args.target,
          "frames": int(mel.frames.shape[0]),
          "input_samples": n_in, "output_samples": n_out,
          "trimmed_samples": n_in - n_out, "out": str(out_path)})
    return 0


def _round_robin_targets(rows):
    speakers = sorted({r.speaker_id for r in rows})
    if len(speakers) < 2:
        raise DataError("conversion needs at least two speakers in the manifest")
    targets = []
    for k, row in enumerate(rows):
        others = [s for s in speakers if s != row.speaker_id]
        targets.append(others[k % len(others)])
    return targets


def _synthesize_conversions(rows, model, config, out_dir):
    spec_cfg = config.spectrogram_config(mel_bands=model.config.mel_bands)
    fb = dsp.build_mel_filterbank(spec_cfg)
    out_dir.mkdir(parents=True, exist_ok=True)
    targets = _round_robin_targets(rows)
    for row, target in zip(rows, targets):
        audio = dsp.load_wav(row.audio_path)
        mel = dsp.log_mel(audio, spec_cfg)
        converted = model.convert_speaker(mel, target)
        out_audio, _ = dsp.griffin_lim(
            np.sqrt(dsp.mel_to_linear(converted, fb)), spec_cfg,
            iterations=config.get("eval", "griffin_lim_iterations"))
        stem = Path(row.audio_path).stem
        wav_path = out_dir / f"{stem}__to__{target}.wav"
        dsp.save_wav(wav_path, out_audio)
        row.source_path = row.audio_path
        row.target_speaker_id = target
        row.converted_path = str(wav_path.resolve())
    evaluation.write_manifest(out_dir / "manifest.tsv", rows)
    return rows


def _cmd_eval(args):
    config = _config_from_args(args)
    rows = evaluation.read_manifest(args.manifest)
    report_path = Path(args.report)
    if report_path.parent != Path("."):
        report_path.parent.mkdir(parents=True, exist_ok=True)

    if not any(r.is_conversion for r in rows):
        if not args.model:
            raise ConfigError(
                "manifest has no conversion rows; pass --model to synthesize them")
        model, _, _, _ = training.load_checkpoint(args.model)
        rows = _synthesize_conversions(
            rows, model, config, report_path.parent / "converted")

    transcriber, embedder = _make_adapters(args)
    jobs = args.jobs if args.jobs is not None else config.get("eval", "jobs")
    report = evaluation.evaluate_manifest(
        rows, transcriber, embedder,
        genuine_side=config.get("eval", "genuine_side"), jobs=jobs)
    evaluation.save_report(report_path, report)
    print(evaluation.format_report(report))
    return 0


def _cmd_ablate(args):
    config = _config_from_args(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    produced = []

    if args.data:
        clips, _, _ = _load_training_clips(args.data, config)
    else:
        corpus_dir = out / "corpus"
        speechcorpus.build_speech_corpus(
            corpus_dir, n_speakers=config.get("corpus", "speakers"),
            utterances_per_speaker=config.get("corpus", "utterances"),
            seed=config.get("corpus", "seed"),
            vowels_per_utterance=(config.get("corpus", "vowel_min"),
                                  config.get("corpus", "vowel_max")),
            vowel_duration=config.get("corpus", "vowel_duration"))
        clips, _, _ = _load_training_clips(corpus_dir, config)

    quality = _quality_proxy(args, config, out, produced)
    regressor = _formant_regressor(args, config, out, produced)
    extractors = training.ExtractorSet(quality=quality,
                                       phoneme=_phoneme_extractor(config))
    rows = evaluation.ablation_run(
        clips, config.train_config(), extractors, regressor,
        variants=evaluation.ablation_variants(config.loss_weights()))
    table = evaluation.format_ablation_table(rows)
    json_path = out / "ablation.json"
    json_path.write_text(json.dumps(rows, indent=2) + "\n")
    text_path = out / "ablation.txt"
    text_path.write_text(table + "\n")
    produced += [json_path, text_path]
    _write_produced(out, "ablate", produced)
    print(table)
    return 0


def _cmd_grad_check(args):
    results = gradsuite.run_gradient_suite(seed=args.seed)
    print(gradsuite.format_suite(results))
    if all(r.ok for r in results):
        return 0
    raise NonFiniteError(
        f"{sum(not r.ok for r in results)} gradient checks exceeded "
        f"{gradsuite.TOLERANCE:g}")


# --- parser / entry ------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="percevox",
        description=__doc__.splitlines()[0],
        epilog=config_reference(),
        formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="path to a section.key=value config file")
        p.set_defaults(func=func)
        return p

    p = add("synth-corpus", _cmd_synth_corpus,
            "build the synthetic speech corpus plus the labeled formant corpus")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n", type=int, help="number of speakers (default: corpus.speakers)")
    p.add_argument("--seed", type=int, help="corpus seed (default: corpus.seed)")

    p = add("train-formant", _cmd_train_formant, "train the formant-track regressor")
    p.add_argument("--corpus", required=True, help="labeled formant corpus container")
    p.add_argument("--out", required=True, help="output directory")

    p = add("pretrain-quality", _cmd_pretrain_quality,
            "pretrain the quality proxy on synthetic degradations")
    p.add_argument("--out", required=True, help="output directory")

    p = add("train", _cmd_train, "fit the voice-conversion model")
    p.add_argument("--data", required=True, help="corpus directory with manifest.tsv")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--formant", help="trained formant regressor (else trained in-process)")
    p.add_argument("--quality", help="pretrained quality proxy (else pretrained in-process)")
    p.add_argument("--resume", help="checkpoint to resume from")

    p = add("convert", _cmd_convert, "convert one utterance to a target speaker")
    p.add_argument("--model", required=True, help="trained model checkpoint")
    p.add_argument("--in", dest="infile", required=True, help="input WAV")
    p.add_argument("--target", required=True, help="target speaker id")
    p.add_argument("--out", required=True, help="output WAV")

    p = add("eval", _cmd_eval, "evaluate conversions: CER, EER, speaker similarity")
    p.add_argument("--manifest", required=True, help="utterance or conversion manifest")
    p.add_argument("--model", help="checkpoint (required when the manifest has no conversions)")
    p.add_argument("--report", required=True, help="output JSON report path")
    p.add_argument("--jobs", type=int, help="parallel scoring workers (default: eval.jobs)")
    p.add_argument("--transcriber-cmd", help="external transcriber adapter command")
    p.add_argument("--embedder-cmd", help="external speaker-embedder adapter command")

    p = add("ablate", _cmd_ablate, "train and compare the 8 loss-ablation variants")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--data", help="corpus directory (else synthesized under --out)")
    p.add_argument("--formant", help="trained formant regressor (else trained in-process)")
    p.add_argument("--quality", help="pretrained quality proxy (else pretrained in-process)")

    p = add("grad-check", _cmd_grad_check,
            "finite-difference every operation and loss; exit 0 iff all pass")
    p.add_argument("--seed", type=int, default=0)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        return _fail(2, "config", exc)
    except (DataError, ContainerError) as exc:
        return _fail(3, "data", exc)
    except NonFiniteError as exc:
        return _fail(4, "numeric", exc)
    except AdapterError as exc:
        return _fail(5, "adapter", exc)


def _fail(code, kind, exc):
    message = " ".join(str(exc).split())
    print(f"error: kind={kind} exit={code} message={message}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
