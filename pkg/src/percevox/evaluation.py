"""Objective evaluation: character error rate behind a pluggable
transcriber, equal error rate over genuine/impostor similarity scores with
a pluggable speaker embedder, manifest-driven batch evaluation with
category breakdowns, and the loss-ablation runner.

The reference speaker embedding is a deliberately small stand-in for an
external verifier: 13 mel-cepstral coefficients per frame, mean and
standard deviation pooled and L2-normalized.  Real transcription or
verification backends plug in through the subprocess adapters in
``adapters``.
"""

import json
import string
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.fft

from . import dsp, formant
from .errors import DataError

# --- edit distance and character error rate -----------------------------------


def levenshtein(a, b):
    """Minimal number of insertions, deletions, and substitutions."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        cur = [i]
        for j, cb in enumerate(b, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[len(b)]


def normalize_text(text):
    """Lowercase, strip punctuation, collapse runs of whitespace."""
    text = text.lower()
    text = text.translate(str.maketrans("", "", string.punctuation))
    return " ".join(text.split())


def cer(reference, hypothesis):
    """Edit distance over reference length, both normalized first.

    Can exceed 1 when the hypothesis is much longer than the reference.
    """
    ref = normalize_text(reference)
    hyp = normalize_text(hypothesis)
    if not ref:
        raise DataError("reference transcript is empty after normalization")
    return levenshtein(ref, hyp) / len(ref)


# --- speaker embedding and similarity -------------------------------------------

_EMBED_BANDS = 26
_EMBED_CEPSTRA = 13
_MIN_EMBED_SECONDS = 0.5


def reference_speaker_embedding(audio):
    """Mean+std pooled mel-cepstra, L2-normalized to a 26-dim vector."""
    if audio.duration < _MIN_EMBED_SECONDS:
        raise DataError(
            f"need at least {_MIN_EMBED_SECONDS}s of audio for an embedding, "
            f"got {audio.duration:.3f}s"
        )
    config = dsp.SpectrogramConfig(mel_bands=_EMBED_BANDS)
    log_energies = dsp.log_mel(audio, config).frames
    ceps = scipy.fft.dct(log_energies, type=2, norm="ortho", axis=1)[:, :_EMBED_CEPSTRA]
    vec = np.concatenate([ceps.mean(axis=0), ceps.std(axis=0)])
    norm = np.linalg.norm(vec)
    if norm < 1e-12:
        raise DataError("degenerate audio produced a zero embedding")
    return vec / norm


def cosine_similarity(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.linalg.norm(a) * np.linalg.norm(b)
    if denom < 1e-24:
        raise DataError("cosine similarity of a zero vector")
    return float(np.dot(a, b) / denom)


# --- equal error rate -------------------------------------------------------------


@dataclass
class ScoreSet:
    genuine: list
    impostor: list


def eer(scores):
    """Equal error rate and its threshold.

    FAR(t) is the fraction of impostor scores >= t, FRR(t) the fraction of
    genuine scores < t; both are evaluated at every observed score (plus
    sentinels beyond the extremes) and the crossing of FAR - FRR is located
    by linear interpolation between the two adjacent thresholds where the
    sign changes.
    """
    g = np.asarray(scores.genuine, dtype=np.float64)
    imp = np.asarray(scores.impostor, dtype=np.float64)
    if g.size == 0 or imp.size == 0:
        raise DataError("EER needs both genuine and impostor scores")
    if not (np.all(np.isfinite(g)) and np.all(np.isfinite(imp))):
        raise DataError("EER scores must be finite")
    both = np.concatenate([g, imp])
    thresholds = np.concatenate(
        [[both.min() - 1.0], np.unique(both), [both.max() + 1.0]]
    )
    far = (imp[None, :] >= thresholds[:, None]).mean(axis=1)
    frr = (g[None, :] < thresholds[:, None]).mean(axis=1)
    d = far - frr  # starts at +1, ends at -1
    k = int(np.argmax(d <= 0.0))
    d1, d2 = d[k - 1], d[k]
    u = 1.0 if d1 == d2 else d1 / (d1 - d2)
    value = frr[k - 1] + (frr[k] - frr[k - 1]) * u
    threshold = thresholds[k - 1] + (thresholds[k] - thresholds[k - 1]) * u
    return float(value), float(threshold)


# --- manifests ---------------------------------------------------------------------

_BASE_COLUMNS = ("audio_path", "speaker_id", "gender", "accent", "transcript")
_CONVERSION_COLUMNS = ("source_path", "target_speaker_id", "converted_path")


@dataclass
class ManifestRow:
    audio_path: str
    speaker_id: str
    gender: str
    accent: str
    transcript: str
    source_path: str = None
    target_speaker_id: str = None
    converted_path: str = None

    @property
    def is_conversion(self):
        return self.converted_path is not None


def read_manifest(path):
    """Tab-separated manifest with a header line; returns ManifestRow list.

    Relative audio paths are resolved against the manifest's directory.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines:
        raise DataError(f"manifest is empty: {path}")
    header = tuple(lines[0].rstrip("\n").split("\t"))
    if header == _BASE_COLUMNS:
        has_conversion = False
    elif header == _BASE_COLUMNS + _CONVERSION_COLUMNS:
        has_conversion = True
    else:
        raise DataError(f"unrecognized manifest columns: {header}")
    base = path.parent

    def resolve(p):
        p = Path(p)
        return str(p if p.is_absolute() else base / p)

    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != len(header):
            raise DataError(
                f"{path}:{lineno}: expected {len(header)} fields, got {len(fields)}"
            )
        row = ManifestRow(*fields[:5])
        row.audio_path = resolve(row.audio_path)
        if has_conversion and fields[5]:
            row.source_path = resolve(fields[5])
            row.target_speaker_id = fields[6]
            row.converted_path = resolve(fields[7])
        rows.append(row)
    if not rows:
        raise DataError(f"manifest has a header but no rows: {path}")
    return rows


def _portable_path(p, base):
    """Store paths under the manifest's directory relative to it, so the
    corpus stays relocatable; leave other paths untouched."""
    if not p:
        return ""
    pp = Path(p)
    if not pp.is_absolute():
        return str(pp)
    try:
        return str(pp.resolve().relative_to(base))
    except ValueError:
        return str(pp)


def write_manifest(path, rows):
    path = Path(path)
    base = path.resolve().parent
    conversion = any(r.is_conversion for r in rows)
    header = _BASE_COLUMNS + _CONVERSION_COLUMNS if conversion else _BASE_COLUMNS
    out = ["\t".join(header)]
    for r in rows:
        fields = [_portable_path(r.audio_path, base), r.speaker_id, r.gender,
                  r.accent, r.transcript]
        if conversion:
            fields += [_portable_path(r.source_path, base), r.target_speaker_id or "",
                       _portable_path(r.converted_path, base)]
        out.append("\t".join(fields))
    path.write_text("\n".join(out) + "\n", encoding="utf-8")


# --- batch evaluation ---------------------------------------------------------------


def mean_ci(values):
    """Mean with its 95% confidence half-width (normal approximation)."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise DataError("mean_ci of an empty list")
    stderr = arr.std(ddof=0) / np.sqrt(arr.size)
    return float(arr.mean()), float(1.96 * stderr)


def _speaker_table(rows):
    table = {}
    for r in rows:
        entry = (r.gender, r.accent)
        if r.speaker_id in table and table[r.speaker_id] != entry:
            raise DataError(f"speaker {r.speaker_id!r} has conflicting metadata")
        table[r.speaker_id] = entry
    return table


def _enrollment_index(rows):
    index = {}
    for r in rows:
        index.setdefault(r.speaker_id, r.audio_path)
    return index


def evaluate_manifest(rows, transcriber, embedder, genuine_side="source", jobs=1):
    """Score every conversion row and aggregate a report.

    Per conversion: CER of the converted audio's transcription against the
    reference transcript, and a genuine similarity trial pairing the
    converted audio with an enrollment utterance of the source speaker (or
    of the claimed target when ``genuine_side="target"``).  Each conversion
    also contributes one impostor trial against an unrelated speaker's
    enrollment, chosen round-robin by manifest position.  Higher EER under
    the source pairing means the conversion hides the source speaker
    better.  Categories split conversions by gender pairing and accent
    pairing of the source and target speakers; empty categories are simply
    absent.
    """
    if isinstance(rows, (str, Path)):
        rows = read_manifest(rows)
    if genuine_side not in ("source", "target"):
        raise DataError(f"genuine_side must be source or target, got {genuine_side!r}")
    conversions = [r for r in rows if r.is_conversion]
    if not conversions:
        raise DataError("manifest has no conversion rows")
    speakers = _speaker_table(rows)
    enrollment = _enrollment_index(rows)

    def score_row(item):
        k, row = item
        if row.target_speaker_id not in speakers:
            raise DataError(f"unknown target speaker {row.target_speaker_id!r}")
        converted = dsp.load_wav(row.converted_path)
        hyp = transcriber.transcribe(converted, audio_path=row.converted_path)
        row_cer = cer(row.transcript, hyp)
        emb_conv = embedder.embed(converted, audio_path=row.converted_path)

        claimed = row.speaker_id if genuine_side == "source" else row.target_speaker_id
        enroll_path = enrollment[claimed]
        emb_enroll = embedder.embed(dsp.load_wav(enroll_path), audio_path=enroll_path)
        genuine = cosine_similarity(emb_conv, emb_enroll)

        others = sorted(s for s in enrollment if s not in (row.speaker_id, row.target_speaker_id))
        if not others:
            raise DataError("impostor trials need at least one unrelated speaker")
        other = others[k % len(others)]
        emb_other = embedder.embed(
            dsp.load_wav(enrollment[other]), audio_path=enrollment[other]
        )
        impostor = cosine_similarity(emb_conv, emb_other)
        return row_cer, genuine, impostor

    items = list(enumerate(conversions))
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(score_row, items))
    else:
        results = [score_row(it) for it in items]

    cers = [r[0] for r in results]
    score_set = ScoreSet([r[1] for r in results], [r[2] for r in results])
    eer_value, eer_threshold = eer(score_set)

    def pairing_category(row, index):
        src_g, src_a = speakers[row.speaker_id]
        tgt_g, tgt_a = speakers[row.target_speaker_id]
        return ("same_gender" if src_g == tgt_g else "different_gender",
                "same_accent" if src_a == tgt_a else "cross_accent")[index]

    def grouped(index):
        groups = {}
        for (k, row), c in zip(items, cers):
            groups.setdefault(pairing_category(row, index), []).append(c)
        out = {}
        for name, vals in sorted(groups.items()):
            m, ci = mean_ci(vals)
            out[name] = {"mean_cer": m, "ci95": ci, "count": len(vals)}
        return out

    all_mean, all_ci = mean_ci(cers)
    report = {
        "n_conversions": len(conversions),
        "genuine_side": genuine_side,
        "cer": {"mean": all_mean, "ci95": all_ci, "count": len(cers)},
        "eer": {
            "value": eer_value,
            "threshold": eer_threshold,
            "n_genuine": len(score_set.genuine),
            "n_impostor": len(score_set.impostor),
        },
        "similarity": {
            "genuine_mean": float(np.mean(score_set.genuine)),
            "impostor_mean": float(np.mean(score_set.impostor)),
        },
        "categories": {
            "gender_pairing": grouped(0),
            "accent_pairing": grouped(1),
        },
    }
    return report


def format_report(report):
    """Plain-text table rendering of an evaluation report."""
    lines = [
        f"conversions evaluated : {report['n_conversions']}",
        f"CER  (all)            : {report['cer']['mean']:.4f} ± {report['cer']['ci95']:.4f}",
        f"EER  (genuine={report['genuine_side']})  : {report['eer']['value']:.4f} "
        f"@ threshold {report['eer']['threshold']:.4f}",
        f"cosine genuine/impost : {report['similarity']['genuine_mean']:.4f} / "
        f"{report['similarity']['impostor_mean']:.4f}",
    ]
    for axis, groups in report["categories"].items():
        for name, vals in groups.items():
            lines.append(
                f"  {axis:>15s} {name:<17s}: CER {vals['mean_cer']:.4f} "
                f"± {vals['ci95']:.4f}  (n={vals['count']})"
            )
    return "\n".join(lines)


def save_report(path, report):
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")


# --- ablation runner ----------------------------------------------------------------


def ablation_variants(base=None):
    """The eight weight masks: no perceptual terms, each alone, each pair,
    and all three."""
    from .training import LossWeights

    base = base or LossWeights()
    masks = [
        ("vanilla", (0, 0, 0)),
        ("quality", (1, 0, 0)),
        ("phoneme", (0, 1, 0)),
        ("formant", (0, 0, 1)),
        ("quality+phoneme", (1, 1, 0)),
        ("quality+formant", (1, 0, 1)),
        ("phoneme+formant", (0, 1, 1)),
        ("all", (1, 1, 1)),
    ]
    variants = []
    for name, (q, p, f) in masks:
        variants.append((name, LossWeights(
            lambda_recon=base.lambda_recon,
            lambda_code=base.lambda_code,
            lambda_com=base.lambda_com,
            lambda_quality=base.lambda_quality * q,
            lambda_phoneme=base.lambda_phoneme * p,
            lambda_formant=base.lambda_formant * f,
            enable_quality_epoch=base.enable_quality_epoch,
            enable_phoneme_epoch=base.enable_phoneme_epoch,
            enable_formant_epoch=base.enable_formant_epoch,
        )))
    return variants


def ablation_run(clips, config, extractors, regressor, variants=None,
                 model_factory=None, evaluate=None):
    """Train one model per weight variant under identical seeds and budgets
    and measure each on the validation split.

    Every row records the mean validation quality-proxy score and the mean
    validation formant-track error; ``evaluate`` (trained model, variant
    name -> dict) can attach further metrics such as manifest CER/EER.
    Returns a list of row dicts in variant order.
    """
    import copy

    from . import vqvae
    from .training import fit, split_dataset, validation_quality

    variants = variants or ablation_variants()
    if model_factory is None:
        def model_factory():
            speaker_ids = sorted({sid for _, sid in clips})
            return vqvae.HierarchicalVqvae(vqvae.VqvaeConfig(), speaker_ids=speaker_ids,
                                           seed=config.seed)

    rows = []
    for name, weights in variants:
        run_config = copy.deepcopy(config)
        model = model_factory()
        model, history, _ = fit(model, clips, run_config, weights, extractors, regressor)
        _, val_clips = split_dataset(clips, run_config.val_fraction, run_config.seed)
        row = {
            "name": name,
            "epochs_run": len(history),
            "val_quality": validation_quality(model, val_clips, extractors.quality),
            "val_formant_error": validation_formant_error(model, val_clips, regressor),
            "weights": {
                "quality": weights.lambda_quality,
                "phoneme": weights.lambda_phoneme,
                "formant": weights.lambda_formant,
            },
        }
        if evaluate is not None:
            row.update(evaluate(model, name))
        rows.append(row)
    return rows


def validation_formant_error(model, val_clips, regressor):
    """Mean squared difference between regressor formant tracks of each
    validation clip and its reconstruction."""
    from . import diffcore as dc
    from .training import _clip_frames

    errors = []
    for clip in val_clips:
        frames, speaker_id = _clip_frames(clip, model)
        x_dec, _, _ = model.forward_reconstruct(dc.Tensor(frames), speaker_id)
        phi_x = regressor.track(dsp.MelSpectrogram(frames))
        phi_d = regressor.track(dsp.MelSpectrogram(x_dec.data))
        errors.append(float(np.mean((phi_x.values - phi_d.values) ** 2)))
    return float(np.mean(errors))


def format_ablation_table(rows):
    header = f"{'variant':<18s} {'epochs':>6s} {'val quality':>12s} {'formant err':>12s}"
    lines = [header, "-" * len(header)]
    for r in rows:
        lines.append(
            f"{r['name']:<18s} {r['epochs_run']:>6d} {r['val_quality']:>12.4f} "
            f"{r['val_formant_error']:>12.6f}"
        )
    return "\n".join(lines)
